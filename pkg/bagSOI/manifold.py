import math
from dataclasses import dataclass
import typing as tp

import torch

from .errors import DegenerateCovariance, DegenerateRim, Infeasible, ValidationError
from .estimation import RimState
from .geom import Ellipse3D, best_fit_plane, chamfer_tensor, ellipse3d_points, polyline_perimeter, rotvec_matrix, sample_angles
from .solver import ConstraintSpec, SolveOptions, minimize_penalized
from .utils import DTYPE, get_logger

logger = get_logger(__name__)

MIN_ANGLE_STEP = 1e-6
FIT_OPTIONS = SolveOptions(jac="autograd")


@dataclass(frozen=True)
class ManifoldParams:
    omega: float = 0.68
    lambda4: float = 0.002
    lambda5: float = 0.02
    n_samples: int = 2000

    def __post_init__(self):
        if not self.omega > 0:
            raise ValidationError("omega must be > 0")
        if not 0 < self.lambda4 < 0.1:
            raise ValidationError("lambda4 must be in (0,0.1)")
        if not self.lambda5 > 0:
            raise ValidationError("lambda5 must be > 0")
        if self.n_samples < 3:
            raise ValidationError("n_samples must be >= 3")


class _StableEllipseProblem:
    """
    8 free parameters: centre (3), axis-angle rotation of the initial plane basis (3), radii (2).
    Evaluators return differentiable tensors; the sampled ellipse is cached per parameter
    tensor since the cost and both constraints are evaluated on the same one.
    """

    def __init__(self, x: RimState, params: ManifoldParams, basis0: torch.Tensor):
        self.points = x.keypoints
        self.centroid = x.centroid
        self.params = params
        self.basis0 = basis0
        self.thetas = sample_angles(params.n_samples)
        self._owner = None
        self._samples = None

    def unpack(self, p: torch.Tensor):
        basis = rotvec_matrix(p[3:6]) @ self.basis0
        return p[:3], p[6], p[7], basis[:, 0], basis[:, 1]

    def samples(self, p: torch.Tensor) -> torch.Tensor:
        if p is not self._owner:
            c, beta_a, beta_b, u, v = self.unpack(p)
            self._samples = ellipse3d_points(c, beta_a, beta_b, u, v, self.thetas)
            self._owner = p
        return self._samples

    def chamfer_cost(self, p: torch.Tensor) -> torch.Tensor:
        return chamfer_tensor(self.samples(p), self.points) ** 2

    def perimeter_ratio(self, p: torch.Tensor) -> torch.Tensor:
        s = self.samples(p)
        return (torch.roll(s, -1, dims=0) - s).norm(dim=-1).sum() / self.params.omega

    def centroid_offset(self, p: torch.Tensor) -> torch.Tensor:
        return (p[:3] - self.centroid).norm()

    def constraints(self) -> tp.List[ConstraintSpec]:
        return [
            ConstraintSpec(self.perimeter_ratio, 1 - self.params.lambda4, 1 + self.params.lambda4, name="C4"),
            ConstraintSpec(self.centroid_offset, 0.0, self.params.lambda5, name="C5"),
        ]


def _initial_guess(x: RimState, init: tp.Optional[Ellipse3D]):
    if init is not None:
        basis0 = torch.stack([init.u, init.v, init.normal], dim=1)
        return init.c, init.beta_a, init.beta_b, basis0
    try:
        centroid, e1, e2, normal = best_fit_plane(x.keypoints)
    except DegenerateCovariance as e:
        raise DegenerateRim(f"rim has no supporting plane: {e}") from e
    rel = x.keypoints - centroid
    # uniformly spaced ellipse samples have mean cos^2 = 1/2
    beta_a = math.sqrt(2 * float((rel @ e1).pow(2).mean()))
    beta_b = math.sqrt(2 * float((rel @ e2).pow(2).mean()))
    if beta_b < 1e-9:
        raise DegenerateRim("rim collapsed to a near-collinear set")
    return centroid, beta_a, beta_b, torch.stack([e1, e2, normal], dim=1)


def ellipse_residuals(e: Ellipse3D, x: RimState, params: ManifoldParams) -> tp.Tuple[float, float]:
    """Perimeter ratio chi / omega of the sampled ellipse and its centre offset from the rim centroid."""
    chi = polyline_perimeter(ellipse3d_points(e.c, e.beta_a, e.beta_b, e.u, e.v, sample_angles(params.n_samples)))
    return chi / params.omega, float((e.c - x.centroid).norm())


def fit_stable_ellipse(
    x: RimState,
    params: ManifoldParams,
    init: tp.Optional[Ellipse3D] = None,
    opts: tp.Optional[SolveOptions] = None,
) -> Ellipse3D:
    """
    Perimeter-feasible 3D ellipse closest to the rim in squared Chamfer distance.
    :param init: warm start; defaults to the rim's best-fit plane with RMS radii
    """
    c0, beta_a0, beta_b0, basis0 = _initial_guess(x, init)
    problem = _StableEllipseProblem(x, params, basis0)
    start = torch.cat([c0, torch.zeros(3, dtype=DTYPE), torch.tensor([beta_a0, beta_b0], dtype=DTYPE)])
    report = minimize_penalized(problem.chamfer_cost, problem.constraints(), start, opts or FIT_OPTIONS)

    c, beta_a, beta_b, u, v = problem.unpack(report.params)
    beta_a, beta_b = float(beta_a), float(beta_b)
    if min(abs(beta_a), abs(beta_b)) < 1e-9:
        raise DegenerateRim("fitted ellipse collapsed")
    ellipse = Ellipse3D.canonical(c.clone(), beta_a, beta_b, u.clone(), v.clone())
    ratio, offset = ellipse_residuals(ellipse, x, params)
    tol = 1e-6 if opts is None else opts.feasibility_tol
    if abs(ratio - 1) > params.lambda4 + tol or offset > params.lambda5 + tol:
        raise Infeasible(f"stable ellipse violates constraints: chi/omega={ratio:.5f}, centre offset={offset:.4f} m")
    logger.debug(f"stable ellipse: beta=({ellipse.beta_a:.4f}, {ellipse.beta_b:.4f}) J2={report.cost:.3e} iters={report.iterations}")
    return ellipse


def _ordered_angles(theta: torch.Tensor) -> torch.Tensor:
    """Unwrap keypoint angles into one monotone sweep that keeps the input's cyclic order."""
    steps = torch.remainder(torch.diff(theta) + math.pi, 2 * math.pi) - math.pi
    closing = math.remainder(float(theta[0] - theta[-1]), 2 * math.pi)
    sense = 1.0 if float(steps.sum()) + closing >= 0 else -1.0
    steps = (sense * steps).clamp_min(MIN_ANGLE_STEP)
    budget = 2 * math.pi - MIN_ANGLE_STEP
    if float(steps.sum()) > budget:
        steps = steps * (budget / float(steps.sum()))
    return theta[0] + sense * torch.cat([torch.zeros(1, dtype=DTYPE), torch.cumsum(steps, dim=0)])


def project_with_ellipse(
    x: RimState,
    params: ManifoldParams,
    init: tp.Optional[Ellipse3D] = None,
    opts: tp.Optional[SolveOptions] = None,
) -> tp.Tuple[RimState, Ellipse3D]:
    ellipse = fit_stable_ellipse(x, params, init, opts)
    theta = _ordered_angles(ellipse.parameter_of(x.keypoints))
    return RimState(ellipse.point(theta)), ellipse


def project_stable_config(
    x: RimState,
    params: ManifoldParams,
    init: tp.Optional[Ellipse3D] = None,
    opts: tp.Optional[SolveOptions] = None,
) -> RimState:
    """Fit the stable ellipse and place each keypoint at its nearest ellipse parameter angle."""
    return project_with_ellipse(x, params, init, opts)[0]
