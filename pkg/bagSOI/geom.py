import math
from dataclasses import dataclass
import typing as tp

import torch
from scipy.spatial import cKDTree

from .errors import DegenerateCovariance, DegenerateVertices, EmptySet, KTooLarge, TooFewVertices
from .utils import DTYPE, as_points

PointSet = torch.Tensor  # (N, 3) float64, no ordering contract

EXACT_NN_LIMIT = 2000
DEGENERATE_EPS = 1e-12
ELLIPSE2D_SAMPLES = 1800
ELLIPSE3D_SAMPLES = 2000


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2 * math.pi)
    return math.pi if wrapped <= -math.pi else wrapped


def sample_angles(n: int) -> torch.Tensor:
    """theta_i = 2 pi i / n for i = 1..n; the last sample closes the loop at theta = 2 pi."""
    if n < 3:
        raise ValueError(f"need at least 3 samples, got {n}")
    return 2 * math.pi * torch.arange(1, n + 1, dtype=DTYPE) / n


@dataclass(frozen=True, eq=False)
class Frame:
    """Right-handed frame: columns n, o, a of the rotation and origin p (world frame)."""

    n: torch.Tensor
    o: torch.Tensor
    a: torch.Tensor
    p: torch.Tensor

    def __post_init__(self):
        rot = self.rotation
        assert torch.isfinite(rot).all() and torch.isfinite(self.p).all(), "frame entries must be finite"
        err = (rot.T @ rot - torch.eye(3, dtype=DTYPE)).abs().max().item()
        if err > 1e-9 or torch.linalg.det(rot).item() <= 0:
            raise ValueError(f"frame axes are not a proper rotation (orthonormality error {err:.3e})")

    @classmethod
    def from_rotation(cls, rotation, p) -> "Frame":
        rotation = torch.as_tensor(rotation, dtype=DTYPE)
        return cls(rotation[:, 0].clone(), rotation[:, 1].clone(), rotation[:, 2].clone(), torch.as_tensor(p, dtype=DTYPE))

    @classmethod
    def identity(cls) -> "Frame":
        return cls.from_rotation(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @property
    def rotation(self) -> torch.Tensor:
        return torch.stack([self.n, self.o, self.a], dim=1)

    @property
    def matrix(self) -> torch.Tensor:
        """Homogeneous 4x4 transform from the frame to the world."""
        out = torch.eye(4, dtype=DTYPE)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.p
        return out


@dataclass(frozen=True)
class Ellipse2D:
    tau_x: float
    tau_y: float
    rho_a: float
    rho_b: float
    alpha: float

    def __post_init__(self):
        values = (self.tau_x, self.tau_y, self.rho_a, self.rho_b, self.alpha)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite ellipse parameters {values}")
        if not self.rho_a >= self.rho_b > 0:
            raise ValueError(f"need rho_a >= rho_b > 0, got {self.rho_a}, {self.rho_b}")
        if not -math.pi < self.alpha <= math.pi:
            raise ValueError(f"alpha must lie in (-pi, pi], got {self.alpha}")

    @classmethod
    def canonical(cls, tau_x, tau_y, rho_a, rho_b, alpha) -> "Ellipse2D":
        """Build from unconstrained solver parameters: absolute radii, major axis first, wrapped angle."""
        rho_a, rho_b, alpha = abs(float(rho_a)), abs(float(rho_b)), float(alpha)
        if rho_b > rho_a:
            rho_a, rho_b, alpha = rho_b, rho_a, alpha + math.pi / 2
        return cls(float(tau_x), float(tau_y), rho_a, rho_b, wrap_angle(alpha))

    @property
    def center(self) -> torch.Tensor:
        return torch.tensor([self.tau_x, self.tau_y], dtype=DTYPE)

    @property
    def major_axis(self) -> torch.Tensor:
        return torch.tensor([math.cos(self.alpha), math.sin(self.alpha)], dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class Ellipse3D:
    c: torch.Tensor
    beta_a: float
    beta_b: float
    u: torch.Tensor
    v: torch.Tensor

    def __post_init__(self):
        if not self.beta_a >= self.beta_b > 0:
            raise ValueError(f"need beta_a >= beta_b > 0, got {self.beta_a}, {self.beta_b}")
        if abs(self.u.norm().item() - 1) > 1e-9 or abs(self.v.norm().item() - 1) > 1e-9:
            raise ValueError("ellipse direction vectors must be unit length")
        if abs(torch.dot(self.u, self.v).item()) > 1e-9:
            raise ValueError("ellipse direction vectors must be orthogonal")

    @classmethod
    def canonical(cls, c, beta_a, beta_b, u, v) -> "Ellipse3D":
        beta_a, beta_b = abs(float(beta_a)), abs(float(beta_b))
        if beta_b > beta_a:
            beta_a, beta_b, u, v = beta_b, beta_a, v, -u
        return cls(torch.as_tensor(c, dtype=DTYPE), beta_a, beta_b, torch.as_tensor(u, dtype=DTYPE), torch.as_tensor(v, dtype=DTYPE))

    @property
    def normal(self) -> torch.Tensor:
        return torch.linalg.cross(self.u, self.v)

    def point(self, theta: torch.Tensor) -> torch.Tensor:
        return ellipse3d_points(self.c, self.beta_a, self.beta_b, self.u, self.v, torch.as_tensor(theta, dtype=DTYPE))

    def parameter_of(self, points: PointSet) -> torch.Tensor:
        """Ellipse parameter angle of each point after projection into the ellipse plane."""
        rel = as_points(points) - self.c
        return torch.atan2((rel @ self.v) / self.beta_b, (rel @ self.u) / self.beta_a)


def build_mapping_frame(vertices) -> Frame:
    """
    Mapping frame of a coplanar vertex set.
    a is normal to the plane through the first two vertices (flipped to point up),
    o follows the third vertex, n = o x a and p is the centroid.
    """
    V = as_points(vertices)
    if V.shape[0] < 3:
        raise TooFewVertices(f"need at least 3 vertices, got {V.shape[0]}")
    centroid = V.mean(dim=0)
    xi1, xi2 = V[0] - centroid, V[1] - centroid
    normal = torch.linalg.cross(xi1, xi2)
    if normal.norm() < DEGENERATE_EPS:
        raise DegenerateVertices("first two vertices are collinear with the vertex centroid")
    a = normal / normal.norm()
    if a[2] < 0:
        a = -a
    toward_third = V[2] - centroid
    toward_third = toward_third - torch.dot(toward_third, a) * a
    if toward_third.norm() < DEGENERATE_EPS:
        raise DegenerateVertices("third vertex coincides with the vertex centroid")
    o = toward_third / toward_third.norm()
    n = torch.linalg.cross(o, a)
    n = n / n.norm()
    return Frame(n, o, a, centroid)


def transform_points(frame: Frame, pts, direction: str = "world_to_frame") -> PointSet:
    pts = as_points(pts)
    rot = frame.rotation
    if direction == "world_to_frame":
        return (pts - frame.p) @ rot
    elif direction == "frame_to_world":
        return pts @ rot.T + frame.p
    raise ValueError(f"unknown direction {direction!r}")


def ellipse2d_points(e: Ellipse2D, theta: torch.Tensor) -> torch.Tensor:
    theta = torch.as_tensor(theta, dtype=DTYPE)
    cos_t, sin_t = torch.cos(theta), torch.sin(theta)
    ca, sa = math.cos(e.alpha), math.sin(e.alpha)
    x = e.tau_x + e.rho_a * cos_t * ca - e.rho_b * sin_t * sa
    y = e.tau_y + e.rho_a * cos_t * sa + e.rho_b * sin_t * ca
    return torch.stack([x, y], dim=-1)


def ellipse2d_sample(e: Ellipse2D, n: int = ELLIPSE2D_SAMPLES) -> torch.Tensor:
    """(n, 2) boundary points ordered by increasing parameter angle."""
    return ellipse2d_points(e, sample_angles(n))


def ellipse2d_implicit(e: Ellipse2D, q) -> torch.Tensor:
    """Standard-form value: < 1 inside, 1 on the boundary, > 1 outside."""
    q = torch.as_tensor(q, dtype=DTYPE)
    dx, dy = q[..., 0] - e.tau_x, q[..., 1] - e.tau_y
    ca, sa = math.cos(e.alpha), math.sin(e.alpha)
    along = dx * ca + dy * sa
    across = -dx * sa + dy * ca
    return along ** 2 / e.rho_a ** 2 + across ** 2 / e.rho_b ** 2


def ellipse2d_perimeter_approx(e: Ellipse2D) -> float:
    return 2 * math.pi * math.sqrt((e.rho_a ** 2 + e.rho_b ** 2) / 2)


def ellipse3d_points(c, beta_a, beta_b, u, v, theta: torch.Tensor) -> torch.Tensor:
    return c + (beta_a * torch.cos(theta))[..., None] * u + (beta_b * torch.sin(theta))[..., None] * v


def rotvec_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rotation matrix of an axis-angle 3-vector (Rodrigues), differentiable everywhere including r = 0."""
    theta = torch.sqrt(r @ r + 1e-300)
    zero = torch.zeros((), dtype=r.dtype)
    K = torch.stack(
        [
            torch.stack([zero, -r[2], r[1]]),
            torch.stack([r[2], zero, -r[0]]),
            torch.stack([-r[1], r[0], zero]),
        ]
    )
    # sin(t) / t and (1 - cos(t)) / t^2 without cancellation
    a = torch.sinc(theta / math.pi)
    b = 0.5 * torch.sinc(theta / (2 * math.pi)) ** 2
    return torch.eye(3, dtype=r.dtype) + a * K + b * (K @ K)


def ellipse3d_sample(e: Ellipse3D, n: int = ELLIPSE3D_SAMPLES) -> PointSet:
    return ellipse3d_points(e.c, e.beta_a, e.beta_b, e.u, e.v, sample_angles(n))


def polyline_perimeter(pts, closed: bool = True) -> float:
    pts = torch.as_tensor(pts, dtype=DTYPE)
    if pts.shape[0] < 2:
        raise ValueError("a polyline needs at least 2 points")
    total = (pts[1:] - pts[:-1]).norm(dim=-1).sum()
    if closed:
        total = total + (pts[0] - pts[-1]).norm()
    return float(total)


def nearest_distances(A: PointSet, B: PointSet) -> torch.Tensor:
    """For every a in A the exact Euclidean distance to its nearest neighbour in B."""
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise EmptySet("nearest-neighbour query on an empty set")
    if max(A.shape[0], B.shape[0]) <= EXACT_NN_LIMIT:
        return torch.cdist(A, B, compute_mode="donot_use_mm_for_euclid_dist").min(dim=1).values
    dist, _ = cKDTree(B.numpy()).query(A.numpy(), k=1)
    return torch.from_numpy(dist).to(DTYPE)


def chamfer_tensor(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """chamfer() from dense pairwise distances, differentiable in both sets."""
    dist = torch.cdist(A, B, compute_mode="donot_use_mm_for_euclid_dist")
    return dist.min(dim=1).values.mean() + dist.min(dim=0).values.mean()


def chamfer(A, B) -> float:
    """Symmetric nearest-neighbour distance: the sum of both directed means (meters, inner distances not squared)."""
    A, B = as_points(A), as_points(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise EmptySet("chamfer distance of an empty set")
    if max(A.shape[0], B.shape[0]) <= EXACT_NN_LIMIT:
        return float(chamfer_tensor(A, B))
    return float(nearest_distances(A, B).mean() + nearest_distances(B, A).mean())


def chamfer_batch(stack: torch.Tensor, B: PointSet) -> torch.Tensor:
    """Chamfer distance of each set in a (T, n, 3) stack against one (m, 3) set."""
    if stack.shape[0] == 0:
        raise EmptySet("empty stack")
    dist = torch.cdist(stack, B.expand(stack.shape[0], *B.shape), compute_mode="donot_use_mm_for_euclid_dist")
    return dist.min(dim=2).values.mean(dim=1) + dist.min(dim=1).values.mean(dim=1)


def fps_indices(pts, k: int, seed_index: int = 0) -> torch.Tensor:
    pts = as_points(pts)
    if pts.shape[0] == 0:
        raise EmptySet("farthest point sampling on an empty set")
    if not 1 <= k <= pts.shape[0]:
        raise KTooLarge(f"cannot select {k} of {pts.shape[0]} points")
    selected = torch.empty(k, dtype=torch.long)
    selected[0] = seed_index
    dist = ((pts - pts[seed_index]) ** 2).sum(dim=-1)
    for i in range(1, k):
        farthest = int(torch.argmax(dist))
        selected[i] = farthest
        dist = torch.minimum(dist, ((pts - pts[farthest]) ** 2).sum(dim=-1))
    return selected


def fps(pts, k: int, seed_index: int = 0) -> PointSet:
    """Greedy max-min subset of pts, in selection order."""
    pts = as_points(pts)
    return pts[fps_indices(pts, k, seed_index)]


def _canonical_sign(vec: torch.Tensor) -> torch.Tensor:
    for value in vec:
        if abs(value.item()) > DEGENERATE_EPS:
            return vec if value > 0 else -vec
    return vec


def principal_axis_2d(pts) -> torch.Tensor:
    pts = as_points(pts, dim=2)
    if pts.shape[0] < 2:
        raise DegenerateCovariance("need at least 2 points for a principal axis")
    centered = pts - pts.mean(dim=0)
    evals, evecs = torch.linalg.eigh(centered.T @ centered / pts.shape[0])
    if evals[1] - evals[0] < DEGENERATE_EPS:
        raise DegenerateCovariance(f"isotropic point set (eigenvalue gap {float(evals[1] - evals[0]):.3e})")
    return _canonical_sign(evecs[:, 1])


def best_fit_plane(pts) -> tp.Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Least-squares plane of a 3D point set.
    :returns: centroid, in-plane major direction e1, e2 = normal x e1, unit normal (pointing up)
    """
    pts = as_points(pts)
    centroid = pts.mean(dim=0)
    centered = pts - centroid
    evals, evecs = torch.linalg.eigh(centered.T @ centered / pts.shape[0])
    if evals[1] - evals[0] < DEGENERATE_EPS:
        raise DegenerateCovariance("point set has no unique best-fit plane (collinear or coincident)")
    normal = evecs[:, 0]
    if abs(normal[2].item()) > DEGENERATE_EPS:
        normal = normal if normal[2] > 0 else -normal
    else:
        normal = _canonical_sign(normal)
    e1 = _canonical_sign(evecs[:, 2])
    e2 = torch.linalg.cross(normal, e1)
    return centroid, e1, e2, normal


def cumulative_length(loop: PointSet, closed: bool = True) -> torch.Tensor:
    pts = torch.cat([loop, loop[:1]]) if closed else loop
    seg = (pts[1:] - pts[:-1]).norm(dim=-1)
    return torch.cat([torch.zeros(1, dtype=DTYPE), torch.cumsum(seg, dim=0)])


def interpolate_closed_polyline(loop: PointSet, arc: torch.Tensor) -> PointSet:
    """Points at arc-length positions (0 <= s < perimeter) along a closed polyline."""
    closed_pts = torch.cat([loop, loop[:1]])
    cum = cumulative_length(loop)
    seg = torch.searchsorted(cum, arc.contiguous(), right=True).clamp(1, loop.shape[0]) - 1
    seg_len = (cum[seg + 1] - cum[seg]).clamp_min(DEGENERATE_EPS)
    t = ((arc - cum[seg]) / seg_len).clamp(0.0, 1.0)[:, None]
    return closed_pts[seg] + t * (closed_pts[seg + 1] - closed_pts[seg])


def resample_closed_polyline(loop, n: int) -> PointSet:
    """n points uniformly spaced by arc length, starting at loop[0]."""
    loop = as_points(loop)
    perimeter = cumulative_length(loop)[-1]
    arc = perimeter * torch.arange(n, dtype=DTYPE) / n
    return interpolate_closed_polyline(loop, arc)


def point_to_polyline_distance(points, loop, closed: bool = True) -> torch.Tensor:
    points, loop = as_points(points), as_points(loop)
    start = loop
    end = torch.roll(loop, -1, dims=0)
    if not closed:
        start, end = loop[:-1], loop[1:]
    seg = end - start
    rel = points[:, None, :] - start[None, :, :]
    t = ((rel * seg).sum(-1) / (seg * seg).sum(-1).clamp_min(DEGENERATE_EPS ** 2)).clamp(0.0, 1.0)
    closest = start[None] + t[..., None] * seg[None]
    return (points[:, None, :] - closest).norm(dim=-1).min(dim=1).values


def cyclic_second_difference(loop: torch.Tensor) -> torch.Tensor:
    return torch.roll(loop, -1, dims=0) - 2 * loop + torch.roll(loop, 1, dims=0)
