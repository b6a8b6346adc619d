import copy
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
import typing as tp

import torch
from scipy.spatial.transform import Rotation

from .control import POSE_DIM, MpcConfig, RobotPose
from .errors import NonConvergedEquilibrium, ParseError, SingularSystem, TooFewPoints, ValidationError
from .estimation import GmmConfig, PointCloud, RimState
from .geom import cumulative_length, cyclic_second_difference, ellipse3d_points, interpolate_closed_polyline, polyline_perimeter, resample_closed_polyline
from .manifold import ManifoldParams
from .planner import ObstacleVolume, PlannerConfig
from .soigen import ObjectModel, SoiGenParams
from .utils import DTYPE, as_points, get_logger, nested_set

logger = get_logger(__name__)

SCENARIO_DIR = Path(__file__).parent / "scenarios"
INITIAL_LOOP_SAMPLES = 2000
MIN_POINTS_PER_KEYPOINT = 10
CHOLESKY_RETRIES = 20
ARMIJO = 1e-4
ENERGY_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class PlantConfig:
    n_s: int = 100
    k_s: float = 100.0
    k_b: float = 1.0
    k_g: float = 0.5
    k_c: float = 200.0
    clamp_width: int = 3
    contact_margin: float = 1e-3
    max_iter: int = 500
    tolerance_grad: float = 1e-8
    line_search_steps: int = 40
    left_gripper: tp.Tuple[float, float, float] = (-0.11, 0.0, 0.15)
    right_gripper: tp.Tuple[float, float, float] = (0.11, 0.0, 0.15)

    def __post_init__(self):
        if self.n_s < 8 or self.n_s % 2:
            raise ValidationError("n_s must be an even number >= 8")
        if min(self.k_s, self.k_b) <= 0 or min(self.k_g, self.k_c) < 0:
            raise ValidationError("k_s and k_b must be > 0, k_g and k_c must be >= 0")
        if not 0 <= self.clamp_width < self.n_s // 4:
            raise ValidationError("clamp_width must be in [0, n_s/4)")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.tolerance_grad > 0:
            raise ValidationError("tolerance_grad must be > 0")
        if self.line_search_steps < 1:
            raise ValidationError("line_search_steps must be >= 1")
        if len(self.left_gripper) != 3 or len(self.right_gripper) != 3:
            raise ValidationError("gripper positions must have 3 components")


@dataclass(frozen=True)
class SensorConfig:
    points_per_frame: int = 1500
    noise_sigma: float = 0.002
    outlier_fraction: float = 0.05
    outlier_lower: tp.Tuple[float, float, float] = (-0.3, -0.3, 0.0)
    outlier_upper: tp.Tuple[float, float, float] = (0.3, 0.3, 0.5)
    rng_seed: int = 0

    def __post_init__(self):
        if self.points_per_frame < 1:
            raise ValidationError("points_per_frame must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0 <= self.outlier_fraction < 0.5:
            raise ValidationError("outlier_fraction must be in [0,0.5)")
        if not all(lo < hi for lo, hi in zip(self.outlier_lower, self.outlier_upper)):
            raise ValidationError("outlier_lower must be < outlier_upper")

    def generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(int(self.rng_seed))


def render_cloud(rim, cfg: SensorConfig, generator: tp.Optional[torch.Generator] = None) -> PointCloud:
    """
    Synthetic depth-sensor frame: inliers uniform by arc length on the closed polyline plus
    isotropic Gaussian noise, outliers uniform in the outlier box.
    """
    loop = rim.keypoints if isinstance(rim, RimState) else as_points(rim)
    generator = generator if generator is not None else cfg.generator()
    n_out = int(round(cfg.points_per_frame * cfg.outlier_fraction))
    n_in = cfg.points_per_frame - n_out

    arc = torch.rand(n_in, generator=generator, dtype=DTYPE) * cumulative_length(loop)[-1]
    inliers = interpolate_closed_polyline(loop, arc)
    if cfg.noise_sigma > 0:
        inliers = inliers + cfg.noise_sigma * torch.randn(n_in, 3, generator=generator, dtype=DTYPE)
    lower = torch.tensor(cfg.outlier_lower, dtype=DTYPE)
    upper = torch.tensor(cfg.outlier_upper, dtype=DTYPE)
    outliers = lower + torch.rand(n_out, 3, generator=generator, dtype=DTYPE) * (upper - lower)
    return torch.cat([inliers, outliers])


def initial_loop(left, right, omega: float, n_s: int) -> torch.Tensor:
    """
    Horizontal ellipse through both grippers with perimeter omega, resampled to n_s nodes
    by arc length starting at the left gripper.
    """
    left, right = torch.as_tensor(left, dtype=DTYPE), torch.as_tensor(right, dtype=DTYPE)
    centre = (left + right) / 2
    span = right - left
    beta_a = float(span.norm()) / 2
    if beta_a <= 0 or 4 * beta_a >= omega:
        raise ValidationError(f"gripper separation {2 * beta_a:.3f} m is incompatible with rim perimeter {omega} m")
    u = span / span.norm()
    v = torch.linalg.cross(torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE), u)
    if v.norm() < 1e-9:
        raise ValidationError("grippers must not be stacked vertically")
    v = v / v.norm()

    theta = math.pi + 2 * math.pi * torch.arange(INITIAL_LOOP_SAMPLES, dtype=DTYPE) / INITIAL_LOOP_SAMPLES
    lo, hi = 1e-9, omega / 2
    for _ in range(100):
        beta_b = (lo + hi) / 2
        if polyline_perimeter(ellipse3d_points(centre, beta_a, beta_b, u, v, theta)) < omega:
            lo = beta_b
        else:
            hi = beta_b
    dense = ellipse3d_points(centre, beta_a, (lo + hi) / 2, u, v, theta)
    return resample_closed_polyline(dense, n_s)


def _rotation(rpy: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(Rotation.from_euler("xyz", rpy.numpy()).as_matrix()).to(DTYPE)


def _solve_spd(H: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Solve H x = g, adding a growing diagonal shift until the Cholesky factorization succeeds."""
    eye = torch.eye(H.shape[0], dtype=DTYPE)
    floor = 1e-12 * float(H.diagonal().abs().max())
    shift = 0.0
    for _ in range(CHOLESKY_RETRIES):
        L, info = torch.linalg.cholesky_ex(H + shift * eye)
        if int(info) == 0:
            return torch.cholesky_solve(g[:, None], L)[:, 0]
        shift = max(10 * shift, floor)
    raise SingularSystem("plant Hessian is not positive definite")


class BagPlant:
    """
    Quasi-static elastic rim of n_s nodes pinned at two antipodal grasp nodes. The nodes within
    clamp_width of a grasp node move rigidly with its gripper; the rest settle to the minimum of
    stretch + bending + gravity + contact energy after every command.

    Energy is evaluated in coordinates scaled by the rim radius omega / 2 pi, with per-segment
    quadrature weights, so the stiffness constants are dimensionless. Equilibria are found by
    projected Newton iterations: the Hessian is assembled analytically with the compressive part
    of the stretch term clipped to zero, and each step is backtracked on the energy.

    :param u_max: controller saturation per pose component; commands beyond twice this are rejected
    """

    def __init__(
        self,
        cfg: PlantConfig,
        omega: float,
        n_x: int,
        sensor: tp.Optional[SensorConfig] = None,
        obstacles: tp.Sequence[ObstacleVolume] = (),
        u_max: tp.Optional[torch.Tensor] = None,
    ):
        if cfg.n_s < n_x or cfg.n_s % n_x:
            raise ValidationError(f"n_s ({cfg.n_s}) must be a multiple of n_x ({n_x})")
        self.cfg, self.omega, self.n_x = cfg, omega, n_x
        self.sensor = sensor or SensorConfig()
        self.obstacles = tuple(obstacles)
        self.u_max = torch.as_tensor(u_max if u_max is not None else MpcConfig().u_max, dtype=DTYPE).reshape(POSE_DIM)
        self.generator = self.sensor.generator()
        self.scale = omega / (2 * math.pi)
        self.rest_length = omega / cfg.n_s
        self.grasp = (0, cfg.n_s // 2)
        self.converged = True
        self.nonconverged_steps = 0
        self.iterations = 0

        self.pose = RobotPose.from_positions(cfg.left_gripper, cfg.right_gripper)
        self.nodes = initial_loop(cfg.left_gripper, cfg.right_gripper, omega, cfg.n_s)

        offsets = torch.arange(-cfg.clamp_width, cfg.clamp_width + 1)
        self.clamped = [(g + offsets) % cfg.n_s for g in self.grasp]
        positions = (self.pose.left_position, self.pose.right_position)
        self.clamp_offsets = [self.nodes[idx] - p for idx, p in zip(self.clamped, positions)]
        for offset in self.clamp_offsets:
            offset[cfg.clamp_width] = 0.0
        self.fixed_index = torch.cat(self.clamped)
        free = torch.ones(cfg.n_s, dtype=torch.bool)
        free[self.fixed_index] = False
        self.free_index = torch.nonzero(free).flatten()
        self.free_dofs = (3 * self.free_index[:, None] + torch.arange(3)).flatten()

        half = cfg.n_s // 2
        hops = torch.arange(cfg.n_s, dtype=DTYPE)
        self.right_weight = torch.where(hops <= half, hops, cfg.n_s - hops) / half

        eye = torch.eye(cfg.n_s, dtype=DTYPE)
        second = torch.roll(eye, -1, dims=0) - 2 * eye + torch.roll(eye, 1, dims=0)
        rest = self.rest_length / self.scale
        self.bending_hessian = torch.kron(2 * cfg.k_b / rest ** 3 * second.T @ second, torch.eye(3, dtype=DTYPE))
        self.settle()

    @property
    def state(self) -> RimState:
        return RimState(self.nodes[:: self.cfg.n_s // self.n_x].clone())

    @property
    def loop(self) -> RimState:
        return RimState(self.nodes.clone())

    def observe(self) -> PointCloud:
        return render_cloud(self.loop, self.sensor, self.generator)

    def fixed_positions(self) -> torch.Tensor:
        grippers = (
            (self.pose.left_position, self.pose.left_rpy),
            (self.pose.right_position, self.pose.right_rpy),
        )
        return torch.cat([p + offset @ _rotation(rpy).T for (p, rpy), offset in zip(grippers, self.clamp_offsets)])

    def energy(self, nodes: torch.Tensor) -> torch.Tensor:
        """Scaled-coordinate energy of a full (n_s, 3) loop given in meters."""
        cfg = self.cfg
        s = nodes / self.scale
        rest = self.rest_length / self.scale
        lengths = (torch.roll(s, -1, dims=0) - s).norm(dim=-1)
        energy = cfg.k_s * ((lengths - rest) ** 2).sum() / rest
        energy = energy + cfg.k_b * (cyclic_second_difference(s) ** 2).sum() / rest ** 3
        energy = energy + cfg.k_g * s[:, 2].sum() * rest
        for obstacle in self.obstacles:
            depth = torch.relu(cfg.contact_margin - obstacle.signed_distance(nodes)) / self.scale
            energy = energy + cfg.k_c * (depth ** 2).sum() / rest
        return energy

    def hessian(self, nodes: torch.Tensor) -> torch.Tensor:
        """Positive semi-definite (3 n_s, 3 n_s) Hessian of energy() with respect to the scaled coordinates."""
        cfg, n = self.cfg, self.cfg.n_s
        s = nodes / self.scale
        rest = self.rest_length / self.scale
        edge = torch.roll(s, -1, dims=0) - s
        length = edge.norm(dim=-1)
        direction = edge / length[:, None]
        along = direction[:, :, None] * direction[:, None, :]
        tension = (1 - rest / length).clamp(min=0)
        K = 2 * cfg.k_s / rest * (along + tension[:, None, None] * (torch.eye(3, dtype=DTYPE) - along))

        i = torch.arange(n)
        j = (i + 1) % n
        blocks = torch.zeros(n, n, 3, 3, dtype=DTYPE)
        blocks.index_put_((i, i), K, accumulate=True)
        blocks.index_put_((j, j), K, accumulate=True)
        blocks.index_put_((i, j), -K, accumulate=True)
        blocks.index_put_((j, i), -K, accumulate=True)
        for obstacle in self.obstacles:
            residual = nodes @ obstacle.normals.T + obstacle.offsets
            worst, face = residual.max(dim=1)
            active = torch.nonzero(worst < cfg.contact_margin).flatten()
            normal = obstacle.normals[face[active]]
            blocks.index_put_((active, active), 2 * cfg.k_c / rest * normal[:, :, None] * normal[:, None, :], accumulate=True)
        return blocks.permute(0, 2, 1, 3).reshape(3 * n, 3 * n) + self.bending_hessian

    def _assemble(self, free: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        nodes = torch.zeros(self.cfg.n_s, 3, dtype=DTYPE)
        return nodes.index_put((self.free_index,), free).index_put((self.fixed_index,), fixed)

    def _energy_gradient(self, free: torch.Tensor, fixed: torch.Tensor) -> tp.Tuple[float, torch.Tensor]:
        """Energy and its gradient with respect to the scaled free coordinates."""
        free = free.detach().requires_grad_(True)
        energy = self.energy(self._assemble(free, fixed))
        (grad,) = torch.autograd.grad(energy, free)
        return float(energy), grad * self.scale

    def settle(self) -> RimState:
        """
        Pin the clamped nodes to the grippers and relax the free ones until the gradient norm in
        scaled coordinates is below tolerance_grad. A state that already satisfies it is kept as is.

        :raises NonConvergedEquilibrium: after max_iter iterations or a failed line search; the best
            state found is kept on the plant and carried by the exception
        """
        cfg = self.cfg
        fixed = self.fixed_positions()
        free = self.nodes[self.free_index].clone()
        energy, grad = self._energy_gradient(free, fixed)
        gradient = float(grad.norm())
        iterations = 0
        while gradient > cfg.tolerance_grad and iterations < cfg.max_iter:
            iterations += 1
            H = self.hessian(self._assemble(free, fixed))[self.free_dofs][:, self.free_dofs]
            scaled_step = -_solve_spd(H, grad.reshape(-1))
            slope = float(grad.reshape(-1) @ scaled_step)
            direction = scaled_step.reshape(free.shape) * self.scale
            step, accepted = 1.0, False
            with torch.no_grad():
                for _ in range(cfg.line_search_steps):
                    trial = free + step * direction
                    trial_energy = float(self.energy(self._assemble(trial, fixed)))
                    if trial_energy <= energy + ARMIJO * step * slope + ENERGY_ROUNDOFF * abs(energy):
                        accepted = True
                        break
                    step /= 2
            if not accepted:
                break
            free = trial
            energy, grad = self._energy_gradient(free, fixed)
            gradient = float(grad.norm())

        self.nodes = self._assemble(free, fixed)
        self.iterations = iterations
        self.converged = gradient <= cfg.tolerance_grad
        if not self.converged:
            self.nonconverged_steps += 1
            raise NonConvergedEquilibrium(
                f"plant equilibrium gradient {gradient:.3e} after {iterations} iterations", state=self.state, gradient=gradient
            )
        return self.state

    def step(self, u) -> RimState:
        u = torch.as_tensor(u, dtype=DTYPE).reshape(POSE_DIM)
        if bool((u.abs() > 2 * self.u_max).any()):
            raise ValueError(f"command exceeds twice the controller saturation: {u.tolist()}")
        previous = self.pose
        self.pose = previous.apply(u)
        d_left = self.pose.left_position - previous.left_position
        d_right = self.pose.right_position - previous.right_position
        # warm start: free nodes follow a blend of both gripper displacements
        w = self.right_weight[:, None]
        self.nodes = self.nodes + (1 - w) * d_left + w * d_right
        return self.settle()


class RigidRimPlant:
    """Rigid rim translated by the mean of both gripper translations."""

    def __init__(self, rim: RimState, sensor: tp.Optional[SensorConfig] = None, pose: tp.Optional[RobotPose] = None):
        self.rim = rim
        self.sensor = sensor or SensorConfig()
        self.generator = self.sensor.generator()
        self.pose = pose or RobotPose(torch.zeros(POSE_DIM, dtype=DTYPE))

    @property
    def state(self) -> RimState:
        return self.rim

    def step(self, u) -> RimState:
        u = torch.as_tensor(u, dtype=DTYPE).reshape(POSE_DIM)
        self.pose = self.pose.apply(u)
        self.rim = self.rim.translated((u[0:3] + u[6:9]) / 2)
        return self.rim

    def observe(self) -> PointCloud:
        return render_cloud(self.rim, self.sensor, self.generator)


@dataclass(eq=False)
class Scenario:
    name: str
    omega: float
    n_x: int
    object: ObjectModel
    obstacles: tp.Tuple[ObstacleVolume, ...]
    plant: PlantConfig
    sensor: SensorConfig
    planner: PlannerConfig
    mpc: MpcConfig
    soigen: SoiGenParams
    manifold: ManifoldParams
    gmm: GmmConfig
    notes: str = ""
    source: str = ""

    @property
    def all_obstacles(self) -> tp.Tuple[ObstacleVolume, ...]:
        return tuple(self.object.collision_volumes) + tuple(self.obstacles)

    def build_plant(self) -> BagPlant:
        return BagPlant(self.plant, self.omega, self.n_x, self.sensor, self.all_obstacles, u_max=self.mpc.u_max)


_SECTIONS = {
    "plant": PlantConfig,
    "sensor": SensorConfig,
    "planner": PlannerConfig,
    "mpc": MpcConfig,
    "soigen": SoiGenParams,
    "manifold": ManifoldParams,
    "gmm": GmmConfig,
}
_TOP_LEVEL = {"name", "notes", "omega", "n_x", "object", "obstacles", *_SECTIONS}
_OBSTACLE_KEYS = {"kind", "lower", "upper", "vertices", "name"}
_OBJECT_KEYS = {"name", "bottom_vertices", "collision_volumes"}


def _reject_unknown(raw, allowed, path: str):
    if not isinstance(raw, dict):
        raise ValidationError(f"{path} must be an object")
    for key in raw:
        if key not in allowed:
            raise ValidationError(f"unknown key {path}.{key}" if path else f"unknown key {key}")


def _build_section(cls, raw, path: str, shared: tp.Dict[str, tp.Any]):
    names = {f.name for f in fields(cls) if f.init}
    _reject_unknown(raw, names - set(shared), path)
    kwargs = {key: tuple(value) if isinstance(value, list) else value for key, value in raw.items()}
    kwargs.update({key: value for key, value in shared.items() if key in names})
    try:
        return cls(**kwargs)
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from e
    except TypeError as e:
        raise ValidationError(f"{path}: {e}") from e


def _build_obstacle(raw, path: str) -> ObstacleVolume:
    _reject_unknown(raw, _OBSTACLE_KEYS, path)
    kind = raw.get("kind", "box")
    tensors = {key: torch.tensor(raw[key], dtype=DTYPE) for key in ("lower", "upper", "vertices") if key in raw}
    try:
        return ObstacleVolume(kind=kind, name=raw.get("name", path), **tensors)
    except (TypeError, RuntimeError) as e:
        raise ValidationError(f"{path}: {e}") from e


def apply_overrides(doc: dict, overrides: tp.Sequence[str]) -> dict:
    """Apply KEY=VALUE dotted-path edits to a copy of a raw scenario document; VALUE is JSON or a string."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValidationError(f"override {item!r} must look like KEY=VALUE")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        try:
            nested_set(doc, key, parsed, create=True)
        except (KeyError, TypeError) as e:
            raise ValidationError(f"override {key} does not address a config field") from e
    return doc


def scenario_from_dict(doc: dict, source: str = "") -> Scenario:
    _reject_unknown(doc, _TOP_LEVEL, "")
    for key in ("name", "omega", "n_x", "object"):
        if key not in doc:
            raise ValidationError(f"missing key {key}")
    shared = {"omega": doc["omega"], "n_x": doc["n_x"]}
    sections = {name: _build_section(cls, doc.get(name, {}), name, shared) for name, cls in _SECTIONS.items()}

    raw_object = doc["object"]
    _reject_unknown(raw_object, _OBJECT_KEYS, "object")
    if "bottom_vertices" not in raw_object:
        raise ValidationError("missing key object.bottom_vertices")
    volumes = tuple(
        _build_obstacle(raw, f"object.collision_volumes[{i}]") for i, raw in enumerate(raw_object.get("collision_volumes", []))
    )
    try:
        vertices = torch.tensor(raw_object["bottom_vertices"], dtype=DTYPE)
    except (TypeError, ValueError, RuntimeError) as e:
        raise ValidationError(f"object.bottom_vertices: {e}") from e
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValidationError("object.bottom_vertices must be a list of [x, y, z] points")
    obj = ObjectModel(
        raw_object.get("name", doc["name"]), vertices, volumes, coplanarity_tol=sections["soigen"].coplanarity_tol
    )
    obstacles = tuple(_build_obstacle(raw, f"obstacles[{i}]") for i, raw in enumerate(doc.get("obstacles", [])))

    sensor = sections["sensor"]
    if sensor.points_per_frame < MIN_POINTS_PER_KEYPOINT * doc["n_x"]:
        raise TooFewPoints(
            f"sensor.points_per_frame={sensor.points_per_frame} is below {MIN_POINTS_PER_KEYPOINT} points per keypoint"
        )
    if sections["plant"].n_s % doc["n_x"]:
        raise ValidationError(f"plant.n_s must be a multiple of n_x ({doc['n_x']})")
    return Scenario(
        name=doc["name"],
        omega=float(doc["omega"]),
        n_x=int(doc["n_x"]),
        object=obj,
        obstacles=obstacles,
        notes=doc.get("notes", ""),
        source=source,
        **sections,
    )


def load_scenario(path, overrides: tp.Sequence[str] = ()) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"cannot read scenario {path}: {e.strerror or e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    scenario = scenario_from_dict(apply_overrides(doc, overrides), source=str(path))
    logger.debug(f"loaded scenario {scenario.name} from {path}")
    return scenario


def bundled_scenarios() -> tp.List[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


def bundled_scenario(name: str) -> Path:
    path = SCENARIO_DIR / f"{name}.json"
    if not path.is_file():
        raise ParseError(f"no bundled scenario {name!r}; available: {', '.join(bundled_scenarios())}")
    return path
