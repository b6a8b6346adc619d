import math
from dataclasses import dataclass, field
import typing as tp

import torch
from scipy.spatial import cKDTree

from .errors import DegenerateRim, NonFiniteLikelihood, TooFewPoints, ValidationError
from .geom import best_fit_plane, fps, resample_closed_polyline
from .utils import DTYPE, as_points, get_logger

logger = get_logger(__name__)

PointCloud = torch.Tensor  # (N, 3) float64, unordered

MIN_KEYPOINTS = 8


@dataclass(frozen=True, eq=False)
class RimState:
    """Ordered closed loop of rim keypoints, world frame, shape (n_x, 3)."""

    keypoints: torch.Tensor

    def __post_init__(self):
        keypoints = as_points(self.keypoints)
        object.__setattr__(self, "keypoints", keypoints)
        if keypoints.shape[0] < 3:
            raise DegenerateRim(f"a rim needs at least 3 keypoints, got {keypoints.shape[0]}")
        if not torch.isfinite(keypoints).all():
            raise DegenerateRim("rim keypoints must be finite")
        spacing = (torch.roll(keypoints, -1, dims=0) - keypoints).norm(dim=-1)
        if spacing.min() <= 0:
            raise DegenerateRim(f"consecutive keypoints coincide at index {int(spacing.argmin())}")

    @classmethod
    def from_flat(cls, flat) -> "RimState":
        return cls(torch.as_tensor(flat, dtype=DTYPE).reshape(-1, 3))

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def n_x(self) -> int:
        return self.keypoints.shape[0]

    @property
    def flat(self) -> torch.Tensor:
        return self.keypoints.reshape(-1)

    @property
    def centroid(self) -> torch.Tensor:
        return self.keypoints.mean(dim=0)

    def translated(self, offset) -> "RimState":
        return RimState(self.keypoints + torch.as_tensor(offset, dtype=DTYPE))


@dataclass(frozen=True)
class GmmConfig:
    outlier_weight: float = 0.1
    variance_init: float = 0.005 ** 2
    max_iters: int = 50
    loglik_tol: float = 1e-6
    smoothness_weight: float = 0.1
    spacing_weight: float = 0.5
    variance_floor: float = 1e-10
    min_box_extent: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.outlier_weight < 1:
            raise ValidationError("outlier_weight must be in [0, 1)")
        if not self.variance_init > 0:
            raise ValidationError("variance_init must be > 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.loglik_tol > 0:
            raise ValidationError("loglik_tol must be > 0")
        if self.smoothness_weight < 0:
            raise ValidationError("smoothness_weight must be >= 0")
        if not 0 <= self.spacing_weight <= 1:
            raise ValidationError("spacing_weight must be in [0, 1]")
        if not 0 < self.variance_floor <= self.variance_init:
            raise ValidationError("variance_floor must be in (0, variance_init]")


@dataclass
class EstimateReport:
    rim: RimState
    loglik: float
    iterations: int
    sigma2_final: float
    loglik_history: tp.List[float] = field(default_factory=list)


def remove_sparse_outliers(cloud, k: int = 8, ratio: float = 3.0) -> PointCloud:
    """Drop points whose k-th neighbour distance exceeds ratio times the median."""
    cloud = as_points(cloud)
    if cloud.shape[0] <= k:
        return cloud
    dist, _ = cKDTree(cloud.numpy()).query(cloud.numpy(), k=k + 1)
    kth = torch.from_numpy(dist[:, -1])
    return cloud[kth <= ratio * kth.median()]


def init_rim(cloud, n_x: int) -> RimState:
    """
    Bootstrap keypoints from a single cloud: farthest point sampling, then ordering
    by polar angle about the centroid inside the best-fit plane.
    """
    cloud = as_points(cloud)
    if n_x < MIN_KEYPOINTS or cloud.shape[0] < n_x:
        raise TooFewPoints(f"need |cloud| >= n_x >= {MIN_KEYPOINTS}, got |cloud|={cloud.shape[0]}, n_x={n_x}")
    centroid, e1, e2, _ = best_fit_plane(cloud)
    picked = fps(cloud, n_x, seed_index=0)
    rel = picked - centroid
    order = torch.argsort(torch.atan2(rel @ e2, rel @ e1))
    return RimState(picked[order])


def _second_difference_matrix(n: int) -> torch.Tensor:
    eye = torch.eye(n, dtype=DTYPE)
    return torch.roll(eye, 1, dims=1) - 2 * eye + torch.roll(eye, -1, dims=1)


def equalize_spacing(Y: torch.Tensor, weight: float) -> torch.Tensor:
    """
    Move keypoints along the loop tangent toward equal arc-length spacing from keypoint 0.
    Only the tangential part of the move is applied, so points stay on the traced curve to first order.
    """
    target = resample_closed_polyline(Y, Y.shape[0])
    tangent = torch.roll(Y, -1, dims=0) - torch.roll(Y, 1, dims=0)
    tangent = tangent / tangent.norm(dim=-1, keepdim=True).clamp_min(1e-300)
    along = ((target - Y) * tangent).sum(dim=-1, keepdim=True)
    return Y + weight * along * tangent


def _expectation(X, Y, sigma2, log_weight, log_outlier):
    d2 = torch.cdist(X, Y, compute_mode="donot_use_mm_for_euclid_dist") ** 2
    log_comp = log_weight - 1.5 * math.log(2 * math.pi * sigma2) - d2 / (2 * sigma2)
    if log_outlier is None:
        log_norm = torch.logsumexp(log_comp, dim=1)
    else:
        outlier = torch.full((X.shape[0], 1), log_outlier, dtype=DTYPE)
        log_norm = torch.logsumexp(torch.cat([log_comp, outlier], dim=1), dim=1)
    resp = torch.exp(log_comp - log_norm[:, None])
    return resp, float(log_norm.sum())


def estimate_rim(cloud, prior: RimState, cfg: tp.Optional[GmmConfig] = None, sigma2: tp.Optional[float] = None) -> EstimateReport:
    """
    EM alignment of the prior keypoints to a noisy cloud.

    Components: n_x isotropic Gaussians with shared variance and equal weights (1 - mu) / n_x,
    plus a uniform outlier density over the cloud's bounding box with weight mu.
    After each M-step the centroid displacement is smoothed along the loop by a cyclic
    second-difference Tikhonov step, and the keypoints slide along the loop toward equal
    arc-length spacing (spacing_weight).

    :param sigma2: starting variance, defaults to cfg.variance_init
    """
    cfg = cfg or GmmConfig()
    X = as_points(cloud)
    Y = prior.keypoints.clone()
    n_points, n_x = X.shape[0], Y.shape[0]
    if n_points < n_x:
        raise TooFewPoints(f"cloud has {n_points} points for {n_x} keypoints")

    sigma2 = float(cfg.variance_init if sigma2 is None else sigma2)
    mu = cfg.outlier_weight
    log_weight = math.log((1 - mu) / n_x)
    log_outlier = None
    if mu > 0:
        extent = (X.max(dim=0).values - X.min(dim=0).values).clamp_min(cfg.min_box_extent)
        log_outlier = math.log(mu) - float(torch.log(extent).sum())

    smoother = torch.eye(n_x, dtype=DTYPE)
    if cfg.smoothness_weight > 0:
        D = _second_difference_matrix(n_x)
        smoother = smoother + cfg.smoothness_weight * D.T @ D

    resp, loglik = _expectation(X, Y, sigma2, log_weight, log_outlier)
    if not math.isfinite(loglik):
        raise NonFiniteLikelihood("log-likelihood is not finite at the prior")
    history = [loglik]
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        mass = resp.sum(dim=0)
        supported = (mass > 1e-12)[:, None]
        means = (resp.T @ X) / mass.clamp_min(1e-300)[:, None]
        step = torch.where(supported, means - Y, torch.zeros_like(Y))
        Y = Y + torch.linalg.solve(smoother, step)
        if cfg.spacing_weight > 0:
            Y = equalize_spacing(Y, cfg.spacing_weight)

        total = resp.sum()
        if total > 0:
            d2 = torch.cdist(X, Y, compute_mode="donot_use_mm_for_euclid_dist") ** 2
            sigma2 = max(float((resp * d2).sum() / (3 * total)), cfg.variance_floor)

        resp, new_loglik = _expectation(X, Y, sigma2, log_weight, log_outlier)
        if not math.isfinite(new_loglik):
            raise NonFiniteLikelihood(f"log-likelihood diverged at iteration {iterations}")
        history.append(new_loglik)
        converged = abs(new_loglik - loglik) <= cfg.loglik_tol * abs(loglik)
        loglik = new_loglik
        if converged:
            break

    logger.debug(f"EM finished after {iterations} iterations: loglik={loglik:.4f} sigma2={sigma2:.3e}")
    return EstimateReport(RimState(Y), loglik, iterations, sigma2, history)


class RimEstimator:
    """
    Stateful estimator handle for the control loop: bootstraps from the first cloud,
    then carries the rim and the variance from frame to frame.
    """

    def __init__(self, cfg: GmmConfig, n_x: int, prior: tp.Optional[RimState] = None):
        self.cfg = cfg
        self.n_x = n_x
        self.rim = prior
        self.sigma2: tp.Optional[float] = None
        self.last_report: tp.Optional[EstimateReport] = None

    def update(self, cloud) -> RimState:
        cloud = as_points(cloud)
        if self.rim is None:
            self.rim = init_rim(remove_sparse_outliers(cloud), self.n_x)
        report = estimate_rim(cloud, self.rim, self.cfg, sigma2=self.sigma2)
        self.rim = report.rim
        self.sigma2 = max(report.sigma2_final, self.cfg.variance_init)
        self.last_report = report
        return report.rim
