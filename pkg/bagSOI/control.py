import math
from dataclasses import dataclass, field
import typing as tp

import torch
from tqdm.auto import trange

from .errors import NonConvergedEquilibrium, SingularSystem, SizeMismatch, TrackingFailed, ValidationError
from .estimation import GmmConfig, PointCloud, RimEstimator, RimState
from .geom import chamfer
from .planner import DeformationPath
from .utils import DTYPE, get_logger

logger = get_logger(__name__)

POSE_DIM = 12
ANGLE_SLOTS = (3, 4, 5, 9, 10, 11)


def wrap_angles(angles: torch.Tensor) -> torch.Tensor:
    """Wrap to (-pi, pi]."""
    return math.pi - torch.remainder(math.pi - angles, 2 * math.pi)


@dataclass(frozen=True, eq=False)
class RobotPose:
    """Left arm (x, y, z, roll, pitch, yaw) followed by the right arm, meters and radians."""

    r: torch.Tensor

    def __post_init__(self):
        r = torch.as_tensor(self.r, dtype=DTYPE).reshape(POSE_DIM).clone()
        if not torch.isfinite(r).all():
            raise ValueError("pose must be finite")
        r[list(ANGLE_SLOTS)] = wrap_angles(r[list(ANGLE_SLOTS)])
        object.__setattr__(self, "r", r)

    @classmethod
    def from_positions(cls, left, right) -> "RobotPose":
        zeros = torch.zeros(3, dtype=DTYPE)
        return cls(torch.cat([torch.as_tensor(left, dtype=DTYPE), zeros, torch.as_tensor(right, dtype=DTYPE), zeros]))

    @property
    def left_position(self) -> torch.Tensor:
        return self.r[0:3]

    @property
    def left_rpy(self) -> torch.Tensor:
        return self.r[3:6]

    @property
    def right_position(self) -> torch.Tensor:
        return self.r[6:9]

    @property
    def right_rpy(self) -> torch.Tensor:
        return self.r[9:12]

    def apply(self, u) -> "RobotPose":
        """Small-increment update; angles are added component-wise and re-wrapped."""
        return RobotPose(self.r + torch.as_tensor(u, dtype=DTYPE))


@dataclass(frozen=True, eq=False)
class JacobianEstimate:
    J_hat: torch.Tensor
    epsilon: float = 0.5

    def __post_init__(self):
        J = torch.as_tensor(self.J_hat, dtype=DTYPE)
        assert J.ndim == 2 and J.shape[1] == POSE_DIM and J.shape[0] % 3 == 0, f"bad Jacobian shape {tuple(J.shape)}"
        if not torch.isfinite(J).all():
            raise ValueError("Jacobian entries must be finite")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must be in (0, 1]")
        object.__setattr__(self, "J_hat", J)

    @property
    def n_x(self) -> int:
        return self.J_hat.shape[0] // 3


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    lambda1: float = 1.0
    lambda2: float = 0.1
    u_max_translation: float = 0.005
    u_max_rotation: float = 0.02
    subgoal_tol: float = 0.008
    max_steps_per_subgoal: int = 60
    max_steps: int = 3000
    epsilon: float = 0.5

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if not self.lambda1 > 0 or not self.lambda2 > 0:
            raise ValidationError("lambda1 and lambda2 must be > 0")
        if not self.u_max_translation > 0 or not self.u_max_rotation > 0:
            raise ValidationError("u_max must be > 0")
        if not self.subgoal_tol > 0:
            raise ValidationError("subgoal_tol must be > 0")
        if self.max_steps_per_subgoal < 1:
            raise ValidationError("max_steps_per_subgoal must be >= 1")
        if self.max_steps < 1:
            raise ValidationError("max_steps must be >= 1")
        if not 0 < self.epsilon <= 1:
            raise ValidationError("epsilon must be in (0,1]")

    @property
    def u_max(self) -> torch.Tensor:
        arm = [self.u_max_translation] * 3 + [self.u_max_rotation] * 3
        return torch.tensor(arm + arm, dtype=DTYPE)


@dataclass
class StepRecord:
    step: int
    subgoal_index: int
    err_tracking: float
    chamfer_to_goal: float
    u: torch.Tensor
    x: torch.Tensor

    def row(self) -> list:
        return [self.step, self.subgoal_index, self.err_tracking, self.chamfer_to_goal, *self.u.tolist(), *self.x.tolist()]


@dataclass
class RunLog:
    n_x: int
    records: tp.List[StepRecord] = field(default_factory=list)
    success: bool = False
    nonconverged_steps: int = 0

    def append(self, record: StepRecord):
        assert not self.records or record.step > self.records[-1].step, "step index must increase"
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def header(self) -> tp.List[str]:
        return (
            ["step", "subgoal_index", "err_tracking", "chamfer_to_goal"]
            + [f"u_{i}" for i in range(1, POSE_DIM + 1)]
            + [f"x_{i}" for i in range(1, 3 * self.n_x + 1)]
        )

    def to_rows(self) -> tp.List[list]:
        return [record.row() for record in self.records]

    @property
    def final_chamfer(self) -> float:
        return self.records[-1].chamfer_to_goal if self.records else math.nan


class Plant(tp.Protocol):
    pose: RobotPose

    def step(self, u) -> RimState:
        ...

    def observe(self) -> PointCloud:
        ...


def actuate(plant: Plant, u, log: tp.Optional[RunLog] = None) -> RimState:
    """plant.step(u), keeping the best state of an equilibrium that did not converge and counting it on log."""
    try:
        return plant.step(u)
    except NonConvergedEquilibrium as e:
        logger.warning_once("plant equilibrium did not converge, continuing from the best state found")
        logger.debug(str(e))
        if log is not None:
            log.nonconverged_steps += 1
        return e.state


def broyden_update(J: JacobianEstimate, u, y, deadband: float = 1e-6) -> JacobianEstimate:
    """Rank-one secant correction J + eps (y - J u) u^T / (u^T u); skipped when |u| <= deadband."""
    u = torch.as_tensor(u, dtype=DTYPE).reshape(-1)
    y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
    if y.shape[0] != J.J_hat.shape[0]:
        raise SizeMismatch(f"displacement has {y.shape[0]} entries, Jacobian has {J.J_hat.shape[0]} rows")
    if u.norm() <= deadband:
        return J
    residual = y - J.J_hat @ u
    return JacobianEstimate(J.J_hat + J.epsilon * torch.outer(residual, u) / (u @ u), J.epsilon)


def subgoal_error(x: RimState, g: RimState) -> float:
    """Euclidean norm of the stacked ordered keypoint differences."""
    if x.n_x != g.n_x:
        raise SizeMismatch(f"rim has {x.n_x} keypoints, subgoal has {g.n_x}")
    return float((x.keypoints - g.keypoints).norm())


def goal_window(path: DeformationPath, index: int, horizon: int) -> tp.List[RimState]:
    """path[index : index + horizon], padded with the final node."""
    return [path[min(index + k, len(path) - 1)] for k in range(horizon)]


def _prediction_matrices(J: torch.Tensor, horizon: int) -> tp.Tuple[torch.Tensor, torch.Tensor]:
    n = J.shape[0]
    D = torch.kron(torch.ones(horizon, 1, dtype=DTYPE), torch.eye(n, dtype=DTYPE))
    Theta = torch.kron(torch.tril(torch.ones(horizon, horizon, dtype=DTYPE)), J)
    return D, Theta


def mpc_system(J: JacobianEstimate, x_t: RimState, goals: tp.Sequence[RimState], cfg: MpcConfig):
    """Normal equations A u = b of the horizon cost; D and Theta stack the h predicted rims."""
    if len(goals) != cfg.horizon:
        raise SizeMismatch(f"expected {cfg.horizon} goals, got {len(goals)}")
    for g in goals:
        if g.n_x * 3 != J.J_hat.shape[0]:
            raise SizeMismatch(f"goal has {g.n_x} keypoints, Jacobian expects {J.n_x}")
    D, Theta = _prediction_matrices(J.J_hat, cfg.horizon)
    target = torch.cat([g.flat for g in goals])
    A = cfg.lambda1 * Theta.T @ Theta + cfg.lambda2 * torch.eye(Theta.shape[1], dtype=DTYPE)
    b = cfg.lambda1 * Theta.T @ (target - D @ x_t.flat)
    return A, b


def mpc_solve(J: JacobianEstimate, x_t: RimState, goals: tp.Sequence[RimState], cfg: MpcConfig) -> torch.Tensor:
    """Unclamped optimal command sequence of length 12 h."""
    A, b = mpc_system(J, x_t, goals, cfg)
    try:
        solution = torch.linalg.solve(A, b)
        if torch.isfinite(solution).all():
            return solution
    except RuntimeError:
        pass
    logger.warning("MPC normal equations singular, retrying with 1e-9 regularization")
    try:
        solution = torch.linalg.solve(A + 1e-9 * torch.eye(A.shape[0], dtype=DTYPE), b)
    except RuntimeError as e:
        raise SingularSystem(f"MPC system is singular: {e}") from e
    if not torch.isfinite(solution).all():
        raise SingularSystem("MPC system is singular (non-finite solution)")
    return solution


def mpc_step(J: JacobianEstimate, x_t: RimState, goals: tp.Sequence[RimState], cfg: MpcConfig) -> torch.Tensor:
    goals = list(goals)
    if not goals:
        raise SizeMismatch("empty goal window")
    goals = (goals + [goals[-1]] * cfg.horizon)[: cfg.horizon]
    u_max = cfg.u_max
    return torch.clamp(mpc_solve(J, x_t, goals, cfg)[:POSE_DIM], -u_max, u_max)


def probe_jacobian(
    plant: Plant, measure: tp.Callable[[], RimState], cfg: MpcConfig, log: tp.Optional[RunLog] = None
) -> JacobianEstimate:
    """
    Central-difference bootstrap of the Jacobian: every pose component is moved by +a, -2a, +a
    with a = u_max / 2, and the column is (x+ - x-) / 2a.
    """
    amplitude = cfg.u_max / 2
    columns = []
    for i in trange(POSE_DIM, desc="Probing Jacobian", leave=False, disable=None):
        probe = torch.zeros(POSE_DIM, dtype=DTYPE)
        probe[i] = amplitude[i]
        actuate(plant, probe, log)
        x_plus = measure()
        actuate(plant, -2 * probe, log)
        x_minus = measure()
        actuate(plant, probe, log)
        columns.append((x_plus.flat - x_minus.flat) / (2 * amplitude[i]))
    return JacobianEstimate(torch.stack(columns, dim=1), cfg.epsilon)


def track_path(
    path: DeformationPath,
    plant: Plant,
    cfg: MpcConfig,
    gmm: tp.Optional[GmmConfig] = None,
    estimator: tp.Optional[RimEstimator] = None,
    jacobian: tp.Optional[JacobianEstimate] = None,
) -> RunLog:
    """
    Closed loop sense -> estimate -> MPC -> act over the path. The active subgoal advances when
    reached or after max_steps_per_subgoal steps on it; the run succeeds on the final subgoal
    once the ordered error or the Chamfer distance to the goal is within subgoal_tol.

    :param estimator: defaults to a RimEstimator primed with the path start
    :param jacobian: initial estimate, probed on the plant when omitted
    """
    estimator = estimator or RimEstimator(gmm or GmmConfig(), path.start.n_x, prior=path.start)

    def measure() -> RimState:
        return estimator.update(plant.observe())

    log = RunLog(path.start.n_x)
    x = measure()
    J = jacobian if jacobian is not None else probe_jacobian(plant, measure, cfg, log)
    if jacobian is None:
        x = measure()

    last = len(path) - 1
    index, steps_on_subgoal = 0, 0
    for t in range(cfg.max_steps):
        while index < last and subgoal_error(x, path[index]) <= cfg.subgoal_tol:
            index, steps_on_subgoal = index + 1, 0
        if index < last and steps_on_subgoal >= cfg.max_steps_per_subgoal:
            logger.warning(f"subgoal {index} not reached in {steps_on_subgoal} steps, moving on")
            index, steps_on_subgoal = index + 1, 0

        if index == last and (
            subgoal_error(x, path.goal) <= cfg.subgoal_tol or chamfer(x.keypoints, path.goal.keypoints) <= cfg.subgoal_tol
        ):
            log.success = True
            logger.info(f"path tracked in {t} steps, final Chamfer {chamfer(x.keypoints, path.goal.keypoints):.4f} m")
            return log

        u = mpc_step(J, x, goal_window(path, index, cfg.horizon), cfg)
        actuate(plant, u, log)
        x_new = measure()
        J = broyden_update(J, u, x_new.flat - x.flat)
        x = x_new
        steps_on_subgoal += 1
        log.append(
            StepRecord(
                step=t,
                subgoal_index=index,
                err_tracking=subgoal_error(x, path[index]),
                chamfer_to_goal=chamfer(x.keypoints, path.goal.keypoints),
                u=u,
                x=x.flat.clone(),
            )
        )
    raise TrackingFailed(
        f"goal not reached within {cfg.max_steps} steps (final Chamfer {log.final_chamfer:.4f} m, subgoal {index}/{last})",
        log=log,
    )
