import math
from dataclasses import dataclass
import typing as tp

import torch

from .errors import DegenerateCovariance, DegenerateVertices, Infeasible, TooFewVertices, ValidationError
from .estimation import RimState
from .geom import (
    Ellipse2D,
    Frame,
    build_mapping_frame,
    ellipse2d_implicit,
    ellipse2d_perimeter_approx,
    ellipse2d_sample,
    resample_closed_polyline,
    principal_axis_2d,
    transform_points,
)
from .planner import ObstacleVolume
from .solver import ConstraintSpec, SolveOptions, minimize_penalized
from .utils import DTYPE, as_points, get_logger

logger = get_logger(__name__)

PERIMETER_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class ObjectModel:
    name: str
    bottom_vertices: torch.Tensor
    collision_volumes: tp.Tuple[ObstacleVolume, ...] = ()
    coplanarity_tol: float = 1e-3

    def __post_init__(self):
        vertices = as_points(self.bottom_vertices)
        object.__setattr__(self, "bottom_vertices", vertices)
        object.__setattr__(self, "collision_volumes", tuple(self.collision_volumes))
        if vertices.shape[0] < 3:
            raise ValidationError(f"object {self.name}: bottom_vertices needs at least 3 vertices")
        try:
            frame = build_mapping_frame(vertices)
        except DegenerateVertices as e:
            raise ValidationError(f"object {self.name}: bottom_vertices are degenerate ({e})") from e
        offset = transform_points(frame, vertices)[:, 2].abs().max().item()
        if offset > self.coplanarity_tol:
            raise ValidationError(
                f"object {self.name}: bottom_vertices must be coplanar within {self.coplanarity_tol} m "
                f"(largest off-plane offset {offset:.4f} m)"
            )


@dataclass(frozen=True)
class SoiGenParams:
    omega: float = 0.68
    lambda1: float = 0.85
    lambda2: float = 0.005
    lambda3: float = 0.001
    gamma: float = 0.05
    n_x: int = 20
    n_samples: int = 1800
    coplanarity_tol: float = 1e-3

    def __post_init__(self):
        if not self.omega > 0:
            raise ValidationError("omega must be > 0")
        if not 0 < self.lambda1 < 1:
            raise ValidationError("lambda1 must be in (0,1)")
        if self.lambda2 < 0:
            raise ValidationError("lambda2 must be >= 0")
        if self.lambda3 < 0:
            raise ValidationError("lambda3 must be >= 0")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if self.n_x < 8:
            raise ValidationError("n_x must be >= 8")
        if self.n_samples < self.n_x:
            raise ValidationError("n_samples must be >= n_x")


@dataclass
class BaggingResiduals:
    """Constraint values re-evaluated from the returned ellipse (not from solver internals)."""

    c1: tp.List[float]
    c2: float
    c3: float
    perimeter: float
    isotropic: bool

    def feasible(self, params: SoiGenParams, tol: float = 1e-6) -> bool:
        return (
            all(-tol <= value <= params.lambda1 + tol for value in self.c1)
            and self.c2 <= params.lambda2 + tol
            and self.c3 <= params.lambda3 + tol
            and abs(self.perimeter - params.omega) <= PERIMETER_TOL
        )


class BaggingSoi(tp.NamedTuple):
    rim: RimState
    frame: Frame
    ellipse: Ellipse2D


def _footprint_axis(V2: torch.Tensor) -> tp.Optional[torch.Tensor]:
    try:
        return principal_axis_2d(V2)
    except DegenerateCovariance:
        return None


def bagging_residuals(V2, ellipse: Ellipse2D, params: SoiGenParams) -> BaggingResiduals:
    V2 = as_points(V2, dim=2)
    eta_v = _footprint_axis(V2)
    c3 = 0.0 if eta_v is None else abs(abs(float(ellipse.major_axis @ eta_v)) - 1.0)
    return BaggingResiduals(
        c1=[float(v) for v in ellipse2d_implicit(ellipse, V2)],
        c2=float((ellipse.center - V2.mean(dim=0)).norm()),
        c3=c3,
        perimeter=ellipse2d_perimeter_approx(ellipse),
        isotropic=eta_v is None,
    )


def fit_bagging_ellipse(V2, params: SoiGenParams, opts: tp.Optional[SolveOptions] = None) -> Ellipse2D:
    """
    Ellipse in the mapping plane whose RMS-axes perimeter matches omega while enclosing the
    footprint vertices (implicit value in [0, lambda1]), centred on them (within lambda2) and
    aligned with their principal axis (within lambda3; dropped for isotropic footprints).

    Solver parameters are (tau_x, tau_y, rho_a, rho_b, alpha); the rho_a axis points along
    (cos alpha, sin alpha) and is kept the major one by an ordering constraint.
    """
    V2 = as_points(V2, dim=2)
    if V2.shape[0] < 3:
        raise TooFewVertices(f"need at least 3 footprint vertices, got {V2.shape[0]}")
    centroid = V2.mean(dim=0)
    if (V2 - centroid).norm(dim=-1).max() < 1e-12:
        raise DegenerateVertices("footprint vertices coincide")
    eta_v = _footprint_axis(V2)
    vertices = [(float(x), float(y)) for x, y in V2]
    cx, cy = float(centroid[0]), float(centroid[1])

    def perimeter_cost(p):
        rho_a, rho_b = float(p[2]), float(p[3])
        return (2 * math.pi * math.sqrt((rho_a ** 2 + rho_b ** 2) / 2) - params.omega) ** 2

    def implicit_at(vx, vy):
        def evaluate(p):
            tx, ty, rho_a, rho_b, alpha = (float(v) for v in p)
            ca, sa = math.cos(alpha), math.sin(alpha)
            along = (vx - tx) * ca + (vy - ty) * sa
            across = -(vx - tx) * sa + (vy - ty) * ca
            return along ** 2 / rho_a ** 2 + across ** 2 / rho_b ** 2

        return evaluate

    constraints = [
        ConstraintSpec(implicit_at(vx, vy), 0.0, params.lambda1, name=f"C1[{i}]") for i, (vx, vy) in enumerate(vertices)
    ]
    constraints.append(
        ConstraintSpec(lambda p: math.hypot(float(p[0]) - cx, float(p[1]) - cy), 0.0, params.lambda2, name="C2")
    )
    constraints.append(ConstraintSpec(lambda p: abs(float(p[2])) - abs(float(p[3])), 0.0, math.inf, name="axis order"))
    if eta_v is not None:
        ex, ey = float(eta_v[0]), float(eta_v[1])
        constraints.append(
            ConstraintSpec(
                lambda p: abs(math.cos(float(p[4])) * ex + math.sin(float(p[4])) * ey) - 1.0,
                -params.lambda3,
                params.lambda3,
                name="C3",
            )
        )

    alpha0 = 0.0 if eta_v is None else math.atan2(float(eta_v[1]), float(eta_v[0]))
    radius0 = params.omega / (2 * math.pi)
    init = torch.tensor([cx, cy, radius0, radius0, alpha0], dtype=DTYPE)
    report = minimize_penalized(perimeter_cost, constraints, init, opts)

    tx, ty, rho_a, rho_b, alpha = (float(v) for v in report.params)
    if min(abs(rho_a), abs(rho_b)) <= 0:
        raise Infeasible("ellipse collapsed during the fit")
    ellipse = Ellipse2D.canonical(tx, ty, rho_a, rho_b, alpha)
    residuals = bagging_residuals(V2, ellipse, params)
    if not residuals.feasible(params):
        raise Infeasible(
            f"no enclosing ellipse with perimeter {params.omega} m: "
            f"max C1={max(residuals.c1):.4f}, C2={residuals.c2:.4f}, C3={residuals.c3:.2e}, "
            f"perimeter={residuals.perimeter:.5f} after {report.restarts} restarts"
        )
    if not report.converged:
        logger.debug("bagging ellipse accepted on post-hoc feasibility; solver reported no convergence")
    return ellipse


def generate_bagging_soi(obj: ObjectModel, params: SoiGenParams, opts: tp.Optional[SolveOptions] = None) -> BaggingSoi:
    frame = build_mapping_frame(obj.bottom_vertices)
    mapped = transform_points(frame, obj.bottom_vertices, "world_to_frame")
    if mapped[:, 2].abs().max() > params.coplanarity_tol:
        raise DegenerateVertices("bottom vertices are not coplanar")
    ellipse = fit_bagging_ellipse(mapped[:, :2], params, opts)

    boundary = ellipse2d_sample(ellipse, params.n_samples)
    boundary = torch.cat([boundary, torch.zeros(boundary.shape[0], 1, dtype=DTYPE)], dim=1)
    boundary = transform_points(frame, boundary, "frame_to_world")
    # equal arc-length picks starting on the major axis
    rim = RimState(resample_closed_polyline(torch.roll(boundary, 1, dims=0), params.n_x))
    logger.info(
        f"bagging SOI for {obj.name}: rho_a={ellipse.rho_a:.4f} rho_b={ellipse.rho_b:.4f} "
        f"alpha={ellipse.alpha:.3f}"
    )
    return BaggingSoi(rim, frame, ellipse)


def generate_goal_soi(x_dag: RimState, frame: Frame, gamma: float) -> RimState:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return RimState(x_dag.keypoints + gamma * frame.a)
