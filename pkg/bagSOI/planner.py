import math
import time
from dataclasses import dataclass, field
import typing as tp

import numpy as np
import torch
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.transform import Rotation

from .errors import BagSOIError, PlanningFailed, ValidationError
from .estimation import RimState
from .geom import Ellipse3D, chamfer, chamfer_batch, ellipse3d_points, polyline_perimeter, sample_angles
from .manifold import ManifoldParams, project_with_ellipse
from .solver import SolveOptions
from .utils import DTYPE, as_points, get_logger

logger = get_logger(__name__)

MIN_VOLUME = 1e-12
SAMPLE_RETRIES = 100
# projections warm-started from a neighbouring node: two penalty stages, no restarts
PROJECTION_OPTIONS = SolveOptions(
    penalty_schedule=(1e4, 1e6), max_inner_iters=100, gtol=1e-9, polish_rounds=0, restarts=0, jac="autograd"
)


@dataclass(frozen=True, eq=False)
class ObstacleVolume:
    """
    Convex obstacle in the world frame, kept as half-spaces n . x + b <= 0 with unit normals.
    A box is given by lower/upper corners, a polytope by its vertices.
    """

    kind: str = "box"
    lower: tp.Optional[torch.Tensor] = None
    upper: tp.Optional[torch.Tensor] = None
    vertices: tp.Optional[torch.Tensor] = None
    name: str = ""
    normals: torch.Tensor = field(init=False, repr=False)
    offsets: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "box":
            if self.lower is None or self.upper is None:
                raise ValidationError(f"obstacle {self.name}: box needs lower and upper corners")
            lower = torch.as_tensor(self.lower, dtype=DTYPE).reshape(3)
            upper = torch.as_tensor(self.upper, dtype=DTYPE).reshape(3)
            if not bool((upper - lower > 0).all()) or float((upper - lower).prod()) < MIN_VOLUME:
                raise ValidationError(f"obstacle {self.name}: box must have positive volume")
            eye = torch.eye(3, dtype=DTYPE)
            normals = torch.cat([eye, -eye])
            offsets = torch.cat([-upper, lower])
            object.__setattr__(self, "lower", lower)
            object.__setattr__(self, "upper", upper)
        elif self.kind == "polytope":
            if self.vertices is None:
                raise ValidationError(f"obstacle {self.name}: polytope needs vertices")
            vertices = as_points(self.vertices)
            try:
                hull = ConvexHull(vertices.numpy())
            except (QhullError, ValueError) as e:
                raise ValidationError(f"obstacle {self.name}: polytope vertices are degenerate ({e})") from e
            if hull.volume < MIN_VOLUME:
                raise ValidationError(f"obstacle {self.name}: polytope must have positive volume")
            equations = torch.from_numpy(hull.equations).to(DTYPE)
            normals, offsets = equations[:, :3], equations[:, 3]
            object.__setattr__(self, "vertices", vertices)
        else:
            raise ValidationError(f"obstacle {self.name}: kind must be 'box' or 'polytope', got {self.kind!r}")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def box(cls, lower, upper, name: str = "") -> "ObstacleVolume":
        return cls(kind="box", lower=torch.as_tensor(lower, dtype=DTYPE), upper=torch.as_tensor(upper, dtype=DTYPE), name=name)

    @classmethod
    def polytope(cls, vertices, name: str = "") -> "ObstacleVolume":
        return cls(kind="polytope", vertices=torch.as_tensor(vertices, dtype=DTYPE), name=name)

    def signed_distance(self, pts) -> torch.Tensor:
        """Largest face residual: exact depth inside (negative), a lower bound on the distance outside."""
        pts = as_points(pts)
        return (pts @ self.normals.T + self.offsets).max(dim=1).values

    def contains(self, pts, margin: float = 0.0) -> torch.Tensor:
        return self.signed_distance(pts) < margin


@dataclass(frozen=True)
class PlannerConfig:
    step: float = 0.02
    max_iterations: int = 5000
    goal_tolerance: float = 0.01
    workspace_lower: tp.Tuple[float, float, float] = (-0.3, -0.3, 0.05)
    workspace_upper: tp.Tuple[float, float, float] = (0.3, 0.3, 0.5)
    displacement_limit: float = 0.03
    rng_seed: int = 0
    shortcut_attempts: int = 100
    shortcut_budget: int = 300
    collision_margin: float = 1e-3
    densify: int = 10
    goal_bias: float = 0.1

    def __post_init__(self):
        if not self.step > 0:
            raise ValidationError("step must be > 0")
        if not self.goal_tolerance > 0:
            raise ValidationError("goal_tolerance must be > 0")
        if self.displacement_limit < self.step:
            raise ValidationError("displacement_limit must be >= step")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if len(self.workspace_lower) != 3 or len(self.workspace_upper) != 3:
            raise ValidationError("workspace bounds must have 3 components")
        if not all(lo < hi for lo, hi in zip(self.workspace_lower, self.workspace_upper)):
            raise ValidationError("workspace_lower must be < workspace_upper")
        if self.shortcut_attempts < 0 or self.shortcut_budget < 0:
            raise ValidationError("shortcut_attempts and shortcut_budget must be >= 0")
        if self.collision_margin < 0:
            raise ValidationError("collision_margin must be >= 0")
        if self.densify < 0:
            raise ValidationError("densify must be >= 0")
        if not 0 <= self.goal_bias < 1:
            raise ValidationError("goal_bias must be in [0, 1)")


@dataclass(eq=False)
class Node:
    rim: RimState
    ellipse: Ellipse3D
    parent: tp.Optional["Node"] = None

    def branch(self) -> tp.List["Node"]:
        """Nodes from the tree root down to this node."""
        nodes, node = [], self
        while node is not None:
            nodes.append(node)
            node = node.parent
        return nodes[::-1]


@dataclass(eq=False)
class DeformationPath:
    nodes: tp.List[RimState]
    handover_index: int
    ellipses: tp.List[Ellipse3D] = field(default_factory=list)

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("a deformation path needs at least one node")
        if not 0 <= self.handover_index < len(self.nodes):
            raise ValueError(f"handover_index {self.handover_index} outside [0, {len(self.nodes)})")

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, index: int) -> RimState:
        return self.nodes[index]

    def stage_of(self, index: int) -> str:
        return "pre-bagging" if index <= self.handover_index else "bagging"

    @property
    def stages(self) -> tp.List[str]:
        return [self.stage_of(i) for i in range(len(self.nodes))]

    @property
    def start(self) -> RimState:
        return self.nodes[0]

    @property
    def handover(self) -> RimState:
        return self.nodes[self.handover_index]

    @property
    def goal(self) -> RimState:
        return self.nodes[-1]


def densify_loop(keypoints: torch.Tensor, per_segment: int) -> torch.Tensor:
    """Keypoints plus per_segment evenly spaced points on every closed-loop segment, in loop order."""
    t = torch.arange(per_segment + 1, dtype=DTYPE) / (per_segment + 1)
    nxt = torch.roll(keypoints, -1, dims=0)
    return (keypoints[:, None, :] + t[None, :, None] * (nxt - keypoints)[:, None, :]).reshape(-1, 3)


def in_collision(x: RimState, obstacles: tp.Sequence[ObstacleVolume], margin: float = 1e-3, densify: int = 10) -> bool:
    if not obstacles:
        return False
    samples = densify_loop(x.keypoints, densify)
    return any(bool(obstacle.contains(samples, margin).any()) for obstacle in obstacles)


def segment_in_collision(
    a: RimState,
    b: RimState,
    obstacles: tp.Sequence[ObstacleVolume],
    n: int = 10,
    margin: float = 1e-3,
    densify: int = 10,
) -> bool:
    """Collision check of n intermediate keypoint-wise interpolations between two rims."""
    if not obstacles:
        return False
    for t in torch.arange(1, n + 1, dtype=DTYPE) / (n + 1):
        between = RimState((1 - t) * a.keypoints + t * b.keypoints)
        if in_collision(between, obstacles, margin, densify):
            return True
    return False


def align_correspondence(x: RimState, reference: RimState) -> RimState:
    """Re-index x by the cyclic shift / reversal that minimizes the ordered distance to reference."""
    n = x.n_x
    if reference.n_x != n:
        return x
    index = torch.arange(n)
    shifts = (index[None, :] + index[:, None]) % n
    candidates = torch.cat([shifts, torch.flip(shifts, dims=[1])])
    cost = (x.keypoints[candidates] - reference.keypoints[None]).pow(2).sum(dim=(1, 2))
    best = int(torch.argmin(cost))
    return x if best == 0 else RimState(x.keypoints[candidates[best]])


def sample_random_ellipse(rng: np.random.Generator, cfg: PlannerConfig, params: ManifoldParams) -> Ellipse3D:
    """Ellipse with uniform centre in the workspace, uniform plane orientation and aspect in [1, 2.5]."""
    centre = torch.from_numpy(rng.uniform(cfg.workspace_lower, cfg.workspace_upper)).to(DTYPE)
    basis = torch.from_numpy(Rotation.random(random_state=rng).as_matrix()).to(DTYPE)
    aspect = float(rng.uniform(1.0, 2.5))
    # sampled polygon perimeter is linear in the radius scale
    unit = polyline_perimeter(ellipse3d_points(centre, aspect, 1.0, basis[:, 0], basis[:, 1], sample_angles(params.n_samples)))
    scale = params.omega / unit
    return Ellipse3D(centre, aspect * scale, scale, basis[:, 0].clone(), basis[:, 1].clone())


def sample_random_config(rng: np.random.Generator, cfg: PlannerConfig, params: ManifoldParams, n_x: int) -> RimState:
    return RimState(sample_random_ellipse(rng, cfg, params).point(sample_angles(n_x)))


def nearest_node(tree: tp.Sequence[Node], target: RimState) -> Node:
    distances = chamfer_batch(torch.stack([node.rim.keypoints for node in tree]), target.keypoints)
    return tree[int(torch.argmin(distances))]


def constrained_extend(
    tree: tp.List[Node],
    target: RimState,
    cfg: PlannerConfig,
    params: ManifoldParams,
    obstacles: tp.Sequence[ObstacleVolume],
) -> tp.Tuple[Node, bool]:
    """
    Grow the tree from its node nearest to target in manifold-projected steps of Chamfer size ~step.
    Stops on collision, failed projection or stalled progress (< step / 10).

    :returns: last accepted node and whether it is within goal_tolerance of target
    """
    node = nearest_node(tree, target)
    goal = align_correspondence(target, node.rim).keypoints
    distance = chamfer(node.rim.keypoints, goal)
    for _ in range(cfg.max_iterations):
        if distance <= cfg.goal_tolerance:
            return node, True
        delta = goal - node.rim.keypoints
        lengths = delta.norm(dim=-1, keepdim=True)
        # a rigid shift by d has Chamfer distance 2 d
        step = delta * min(1.0, cfg.step / (2 * float(lengths.mean())))
        step = step * (cfg.displacement_limit / step.norm(dim=-1, keepdim=True).clamp_min(1e-300)).clamp(max=1.0)
        try:
            rim, ellipse = project_with_ellipse(RimState(node.rim.keypoints + step), params, init=node.ellipse, opts=PROJECTION_OPTIONS)
        except BagSOIError as e:
            logger.debug(f"extend stopped, projection failed: {e}")
            break
        rim = align_correspondence(rim, node.rim)
        if in_collision(rim, obstacles, cfg.collision_margin, cfg.densify) or segment_in_collision(
            node.rim, rim, obstacles, cfg.densify, cfg.collision_margin, cfg.densify
        ):
            break
        new_distance = chamfer(rim.keypoints, goal)
        if new_distance > distance - cfg.step / 10:
            break
        node = Node(rim, ellipse, parent=node)
        tree.append(node)
        distance = new_distance
    return node, distance <= cfg.goal_tolerance


def _join(node_a: Node, node_b: Node, a_is_start: bool) -> tp.List[Node]:
    nodes = node_a.branch() + node_b.branch()[::-1]
    return nodes if a_is_start else nodes[::-1]


def _sample_free(rng, cfg, params, n_x, obstacles) -> RimState:
    for _ in range(SAMPLE_RETRIES):
        x = sample_random_config(rng, cfg, params, n_x)
        if not in_collision(x, obstacles, cfg.collision_margin, cfg.densify):
            return x
    raise PlanningFailed(f"no collision-free sample in {SAMPLE_RETRIES} draws")


def cbirrt(
    start: Node,
    goal: Node,
    obstacles: tp.Sequence[ObstacleVolume],
    cfg: PlannerConfig,
    params: ManifoldParams,
    rng: np.random.Generator,
) -> tp.List[Node]:
    """
    Bidirectional RRT over projected rim configurations; the trees swap roles every iteration.
    Both endpoint nodes must already lie on the manifold and be collision-free.

    :returns: start -> goal node sequence
    """
    if chamfer(start.rim.keypoints, goal.rim.keypoints) <= cfg.goal_tolerance:
        return [start]
    tree_a, tree_b = [Node(start.rim, start.ellipse)], [Node(goal.rim, goal.ellipse)]
    a_is_start = True

    node_a, reached = constrained_extend(tree_a, tree_b[0].rim, cfg, params, obstacles)
    if reached:
        return _join(node_a, tree_b[0], a_is_start)

    for iteration in range(1, cfg.max_iterations + 1):
        if rng.random() < cfg.goal_bias:
            target = tree_b[0].rim
        else:
            target = _sample_free(rng, cfg, params, start.rim.n_x, obstacles)
        node_a, _ = constrained_extend(tree_a, target, cfg, params, obstacles)
        node_b, reached = constrained_extend(tree_b, node_a.rim, cfg, params, obstacles)
        if reached:
            logger.debug(f"trees connected after {iteration} iterations ({len(tree_a) + len(tree_b)} nodes)")
            return _join(node_b, node_a, not a_is_start)
        tree_a, tree_b = tree_b, tree_a
        a_is_start = not a_is_start
    raise PlanningFailed(f"trees did not connect within {cfg.max_iterations} iterations", iterations=cfg.max_iterations)


def path_length(nodes: tp.Sequence[Node]) -> float:
    return sum(chamfer(a.rim.keypoints, b.rim.keypoints) for a, b in zip(nodes[:-1], nodes[1:]))


def _shortcut(nodes, cfg, params, obstacles, rng) -> tp.List[Node]:
    spent = 0
    for _ in range(cfg.shortcut_attempts):
        if len(nodes) < 3 or spent >= cfg.shortcut_budget:
            break
        i, j = sorted(int(k) for k in rng.choice(len(nodes), size=2, replace=False))
        if j - i < 2:
            continue
        current = path_length(nodes[i : j + 1])
        if chamfer(nodes[i].rim.keypoints, nodes[j].rim.keypoints) >= current:
            continue
        tree = [Node(nodes[i].rim, nodes[i].ellipse)]
        end, reached = constrained_extend(tree, nodes[j].rim, cfg, params, obstacles)
        spent += len(tree)
        if not reached:
            continue
        bridge = end.branch()
        if len(bridge) > 1:
            bridge = bridge[:-1]
        if path_length(bridge + [nodes[j]]) < current:
            nodes = nodes[:i] + bridge + nodes[j:]
    if spent >= cfg.shortcut_budget:
        logger.debug(f"shortcut budget of {cfg.shortcut_budget} projections used up")
    return nodes


def _needs_split(a: Node, b: Node, cfg: PlannerConfig) -> bool:
    if chamfer(a.rim.keypoints, b.rim.keypoints) > cfg.step + 1e-6:
        return True
    return float((b.rim.keypoints - a.rim.keypoints).norm(dim=-1).max()) > cfg.displacement_limit + 1e-9


def _interpolate(a: Node, b: Node, pieces: int, params, cfg, obstacles) -> tp.Optional[tp.List[Node]]:
    """Projected keypoint-wise interpolations strictly between a and b, or None if one fails or collides."""
    inserted, previous = [], a
    for k in range(1, pieces):
        t = k / pieces
        try:
            rim, ellipse = project_with_ellipse(
                RimState((1 - t) * a.rim.keypoints + t * b.rim.keypoints), params, init=previous.ellipse, opts=PROJECTION_OPTIONS
            )
        except BagSOIError as e:
            logger.debug(f"subdivision with {pieces} pieces failed: {e}")
            return None
        rim = align_correspondence(rim, previous.rim)
        if in_collision(rim, obstacles, cfg.collision_margin, cfg.densify):
            logger.debug(f"subdivision with {pieces} pieces collides")
            return None
        previous = Node(rim, ellipse)
        inserted.append(previous)
    return inserted


def _subdivide(nodes, cfg, params, obstacles, max_passes: int = 6) -> tp.List[Node]:
    """
    Insert projected nodes until every consecutive pair is within step (Chamfer) and
    displacement_limit (per keypoint). A segment whose interpolation fails is retried with
    twice the pieces.

    :raises PlanningFailed: when a segment cannot be split or the limits still fail after max_passes
    """
    for _ in range(max_passes):
        refined, changed = [nodes[0]], False
        for index, (a, b) in enumerate(zip(nodes[:-1], nodes[1:])):
            if _needs_split(a, b, cfg):
                gap = max(
                    chamfer(a.rim.keypoints, b.rim.keypoints) / cfg.step,
                    float((b.rim.keypoints - a.rim.keypoints).norm(dim=-1).max()) / cfg.displacement_limit,
                )
                pieces = max(2, math.ceil(gap))
                inserted = _interpolate(a, b, pieces, params, cfg, obstacles)
                if inserted is None:
                    inserted = _interpolate(a, b, 2 * pieces, params, cfg, obstacles)
                if inserted is None:
                    raise PlanningFailed(f"segment {index} of the path could not be subdivided below step {cfg.step}")
                refined.extend(inserted)
                changed = True
            refined.append(b)
        nodes = refined
        if not changed:
            return nodes
    long_segments = sum(_needs_split(a, b, cfg) for a, b in zip(nodes[:-1], nodes[1:]))
    if long_segments:
        raise PlanningFailed(f"{long_segments} path segments still exceed the step limits after {max_passes} subdivision passes")
    return nodes


def refine_path(
    raw: tp.Sequence[Node],
    cfg: PlannerConfig,
    params: ManifoldParams,
    obstacles: tp.Sequence[ObstacleVolume],
    rng: tp.Optional[np.random.Generator] = None,
) -> tp.List[Node]:
    """Random shortcuts (kept only when shorter), then subdivision until the spacing limits hold."""
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    nodes = [Node(node.rim, node.ellipse) for node in raw]
    if len(nodes) < 2:
        return nodes
    raw_length = path_length(nodes)
    nodes = _shortcut(nodes, cfg, params, obstacles, rng)
    nodes = _subdivide(nodes, cfg, params, obstacles)
    logger.debug(f"refined path: {len(raw)} -> {len(nodes)} nodes, length {raw_length:.4f} -> {path_length(nodes):.4f} m")
    return nodes


def _endpoint(x: RimState, params, reference: tp.Optional[RimState] = None) -> Node:
    if reference is not None:
        x = align_correspondence(x, reference)
    rim, ellipse = project_with_ellipse(x, params)
    if reference is not None:
        rim = align_correspondence(rim, reference)
    return Node(rim, ellipse)


def plan(
    x0: RimState,
    x_dag: RimState,
    x_star: RimState,
    obstacles: tp.Sequence[ObstacleVolume],
    cfg: PlannerConfig,
    params: ManifoldParams,
) -> DeformationPath:
    """
    Two-stage plan x0 -> x_dag (pre-bagging) -> x_star (bagging). Endpoints are projected
    first; the handover node appears once, at handover_index.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    start = _endpoint(x0, params)
    handover = _endpoint(x_dag, params, start.rim)
    goal = _endpoint(x_star, params, handover.rim)
    for stage, node in (("start", start), ("handover", handover), ("goal", goal)):
        if in_collision(node.rim, obstacles, cfg.collision_margin, cfg.densify):
            raise PlanningFailed(f"{stage} configuration is in collision", stage=stage)

    stages = []
    for stage, a, b in (("pre-bagging", start, handover), ("bagging", handover, goal)):
        tic = time.perf_counter()
        try:
            raw = cbirrt(a, b, obstacles, cfg, params, rng)
            refined = refine_path(raw, cfg, params, obstacles, rng)
        except PlanningFailed as e:
            raise PlanningFailed(str(e), stage=stage, iterations=e.iterations) from e
        logger.info(f"{stage} stage planned: {len(refined)} nodes in {time.perf_counter() - tic:.2f} s")
        stages.append(refined)

    first, second = stages
    nodes = first + second[1:]
    for i in range(1, len(nodes)):
        nodes[i] = Node(align_correspondence(nodes[i].rim, nodes[i - 1].rim), nodes[i].ellipse)
    return DeformationPath([n.rim for n in nodes], len(first) - 1, [n.ellipse for n in nodes])
