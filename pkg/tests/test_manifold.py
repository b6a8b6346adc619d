import math

import pytest
import torch
from scipy.spatial.transform import Rotation

from bagSOI.errors import DegenerateRim, ValidationError
from bagSOI.estimation import RimState
from bagSOI.geom import Ellipse3D, chamfer, cyclic_second_difference, ellipse3d_sample, sample_angles
from bagSOI.manifold import (
    ManifoldParams,
    ellipse_residuals,
    fit_stable_ellipse,
    project_stable_config,
    project_with_ellipse,
)
from bagSOI.sim import initial_loop

PARAMS = ManifoldParams()
RADIUS = PARAMS.omega / (2 * math.pi)
LEFT, RIGHT = (-0.11, 0.0, 0.15), (0.11, 0.0, 0.15)


def _stable_rim(n: int = 20) -> RimState:
    return RimState(initial_loop(LEFT, RIGHT, PARAMS.omega, n))


def _zigzag(rim: RimState, amplitude: float) -> RimState:
    radial = rim.keypoints - rim.centroid
    radial = radial / radial.norm(dim=-1, keepdim=True)
    sign = torch.tensor([(-1.0) ** i for i in range(rim.n_x)])[:, None]
    lift = torch.tensor([0.0, 0.0, 1.0]) * (amplitude / 2) * torch.cos(torch.arange(rim.n_x) * 0.9)[:, None]
    return RimState(rim.keypoints + amplitude * sign * radial + lift)


def _is_cyclically_ordered(ellipse: Ellipse3D, rim: RimState) -> bool:
    theta = ellipse.parameter_of(rim.keypoints)
    steps = torch.remainder(torch.roll(theta, -1) - theta, 2 * math.pi)
    return bool((steps < math.pi).all()) or bool((steps > math.pi).all())


def test_params_validation():
    with pytest.raises(ValidationError, match="lambda4"):
        ManifoldParams(lambda4=0.2)
    with pytest.raises(ValidationError, match="lambda5"):
        ManifoldParams(lambda5=0.0)


def test_circle_self_consistency():
    circle = ellipse3d_sample(Ellipse3D(torch.zeros(3), RADIUS, RADIUS, torch.tensor([1.0, 0, 0]), torch.tensor([0.0, 1, 0])), 20)
    ellipse = fit_stable_ellipse(RimState(circle), PARAMS)
    assert float(ellipse.c.norm()) < 1e-4
    # the Chamfer term pulls the radius down to the lower perimeter bound
    for beta in (ellipse.beta_a, ellipse.beta_b):
        assert RADIUS * (1 - PARAMS.lambda4) - 1e-5 <= beta <= RADIUS * (1 + PARAMS.lambda4)
    assert abs(float(ellipse.normal[2])) == pytest.approx(1.0, abs=1e-6)


def test_recovers_generating_ellipse():
    ellipse = fit_stable_ellipse(_stable_rim(), PARAMS)
    truth = initial_loop(LEFT, RIGHT, PARAMS.omega, 2000)
    assert chamfer(ellipse3d_sample(ellipse), truth) < 1e-3
    assert ellipse.beta_a > ellipse.beta_b


def test_noisy_rim_satisfies_constraints():
    rim = _stable_rim()
    noise = 0.005 * torch.randn(rim.n_x, 3, generator=torch.Generator().manual_seed(0))
    noisy = RimState(rim.keypoints + noise)
    ellipse = fit_stable_ellipse(noisy, PARAMS)
    ratio, offset = ellipse_residuals(ellipse, noisy, PARAMS)
    assert 1 - PARAMS.lambda4 - 1e-6 <= ratio <= 1 + PARAMS.lambda4 + 1e-6
    assert offset <= PARAMS.lambda5 + 1e-6


def test_collinear_rim_is_degenerate():
    line = torch.stack([torch.linspace(0, 0.3, 10), torch.zeros(10), torch.zeros(10)], dim=1)
    with pytest.raises(DegenerateRim):
        fit_stable_ellipse(RimState(line), PARAMS)


def test_projection_fixed_point():
    rim = _stable_rim()
    projected, ellipse = project_with_ellipse(rim, PARAMS)
    assert (projected.keypoints - rim.keypoints).norm(dim=-1).max() <= 1e-3
    assert ((projected.keypoints - ellipse.c) @ ellipse.normal).abs().max() < 1e-9
    assert _is_cyclically_ordered(ellipse, projected)


def test_projection_smooths_zigzag():
    x = _zigzag(_stable_rim(), 0.004)
    projected, ellipse = project_with_ellipse(x, PARAMS)
    smoothness = cyclic_second_difference(projected.keypoints).norm(dim=-1).max()
    assert smoothness < cyclic_second_difference(x.keypoints).norm(dim=-1).max()
    assert chamfer(projected.keypoints, x.keypoints) <= chamfer(ellipse3d_sample(ellipse), x.keypoints)
    assert _is_cyclically_ordered(ellipse, projected)

    ratio, offset = ellipse_residuals(ellipse, x, PARAMS)
    assert abs(ratio - 1) <= PARAMS.lambda4 + 1e-6
    assert offset <= PARAMS.lambda5 + 1e-6


def test_projection_keeps_reversed_order():
    x = _zigzag(_stable_rim(), 0.003)
    reversed_rim = RimState(torch.flip(x.keypoints, dims=[0]))
    projected, ellipse = project_with_ellipse(reversed_rim, PARAMS)
    forward = project_stable_config(x, PARAMS)
    assert chamfer(projected.keypoints, torch.flip(forward.keypoints, dims=[0])) < 1e-3
    assert _is_cyclically_ordered(ellipse, projected)


def test_double_projection_is_nearly_idempotent():
    x = _zigzag(_stable_rim(), 0.004)
    once = project_stable_config(x, PARAMS)
    twice = project_stable_config(once, PARAMS)
    assert (twice.keypoints - once.keypoints).norm(dim=-1).max() <= 1e-3


def test_warm_start_matches_cold_start():
    x = _zigzag(_stable_rim(), 0.004)
    cold, ellipse = project_with_ellipse(x, PARAMS)
    warm = project_stable_config(x.translated([0.001, 0.0, 0.0]), PARAMS, init=ellipse)
    assert (warm.keypoints - cold.keypoints - torch.tensor([0.001, 0.0, 0.0])).norm(dim=-1).max() <= 2e-3


@pytest.mark.slow
def test_projection_rigid_motion_equivariance():
    x = _zigzag(_stable_rim(), 0.004)
    rot = torch.from_numpy(Rotation.from_euler("xyz", [0.2, -0.3, 0.7]).as_matrix())
    shift = torch.tensor([0.1, 0.05, -0.02])
    base = project_stable_config(x, PARAMS)
    moved = project_stable_config(RimState(x.keypoints @ rot.T + shift), PARAMS)
    assert (moved.keypoints - (base.keypoints @ rot.T + shift)).norm(dim=-1).max() <= 1e-3


def test_sample_count_follows_params():
    params = ManifoldParams(n_samples=500)
    ellipse = fit_stable_ellipse(_stable_rim(), params)
    ratio, _ = ellipse_residuals(ellipse, _stable_rim(), params)
    assert abs(ratio - 1) <= params.lambda4 + 1e-6
    assert sample_angles(params.n_samples).shape == (500,)
