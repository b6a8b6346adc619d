import json

import pytest
import torch

from bagSOI.control import POSE_DIM, MpcConfig
from bagSOI.errors import NonConvergedEquilibrium, ParseError, TooFewPoints, ValidationError
from bagSOI.geom import point_to_polyline_distance, polyline_perimeter
from bagSOI.sim import (
    BagPlant,
    PlantConfig,
    SensorConfig,
    apply_overrides,
    bundled_scenario,
    bundled_scenarios,
    initial_loop,
    load_scenario,
    render_cloud,
)

LEFT, RIGHT = (-0.11, 0.0, 0.15), (0.11, 0.0, 0.15)
OMEGA = 0.68


def test_config_validation():
    with pytest.raises(ValidationError, match="n_s"):
        PlantConfig(n_s=7)
    with pytest.raises(ValidationError, match="clamp_width"):
        PlantConfig(n_s=100, clamp_width=30)
    with pytest.raises(ValidationError, match="outlier_fraction"):
        SensorConfig(outlier_fraction=0.5)
    with pytest.raises(ValidationError, match="outlier_lower"):
        SensorConfig(outlier_lower=(0.0, 0.0, 0.0), outlier_upper=(0.1, 0.1, 0.0))


def test_initial_loop_through_grippers():
    loop = initial_loop(LEFT, RIGHT, OMEGA, 100)
    assert loop.shape == (100, 3)
    assert polyline_perimeter(loop) == pytest.approx(OMEGA, rel=1e-3)
    torch.testing.assert_close(loop[0], torch.tensor(LEFT), atol=1e-6, rtol=0)
    torch.testing.assert_close(loop[50], torch.tensor(RIGHT), atol=1e-4, rtol=0)
    assert (loop[:, 2] - 0.15).abs().max() < 1e-12
    with pytest.raises(ValidationError):
        initial_loop((-0.2, 0, 0), (0.2, 0, 0), OMEGA, 100)


def test_render_cloud_statistics():
    loop = initial_loop(LEFT, RIGHT, OMEGA, 100)
    sensor = SensorConfig(points_per_frame=1000, noise_sigma=0.001, outlier_fraction=0.1)
    cloud = render_cloud(loop, sensor)
    assert cloud.shape == (1000, 3)
    inliers, outliers = cloud[:900], cloud[900:]
    assert float(point_to_polyline_distance(inliers, loop).mean()) <= 2 * sensor.noise_sigma
    assert bool((outliers >= torch.tensor(sensor.outlier_lower)).all())
    assert bool((outliers <= torch.tensor(sensor.outlier_upper)).all())
    assert torch.equal(render_cloud(loop, sensor), cloud)
    assert not torch.equal(render_cloud(loop, SensorConfig(points_per_frame=1000, rng_seed=1)), cloud)


def test_plant_pins_grasp_nodes():
    plant = BagPlant(PlantConfig(), OMEGA, 20)
    assert plant.state.n_x == 20
    assert plant.loop.n_x == 100
    torch.testing.assert_close(plant.loop.keypoints[0], torch.tensor(LEFT))
    torch.testing.assert_close(plant.loop.keypoints[50], torch.tensor(RIGHT))

    u = torch.zeros(POSE_DIM)
    u[2] = u[8] = 0.005
    plant.step(u)
    torch.testing.assert_close(plant.loop.keypoints[0], torch.tensor([-0.11, 0.0, 0.155]))
    torch.testing.assert_close(plant.loop.keypoints[50], torch.tensor([0.11, 0.0, 0.155]))

    with pytest.raises(ValueError, match="saturation"):
        plant.step(torch.full((POSE_DIM,), 0.05))
    with pytest.raises(ValidationError, match="multiple"):
        BagPlant(PlantConfig(), OMEGA, 30)


def test_plant_translation_equivariance():
    offset = torch.tensor([0.05, -0.03, 0.02])
    base = BagPlant(PlantConfig(), OMEGA, 20)
    moved = BagPlant(
        PlantConfig(left_gripper=tuple((torch.tensor(LEFT) + offset).tolist()), right_gripper=tuple((torch.tensor(RIGHT) + offset).tolist())),
        OMEGA,
        20,
    )
    assert float((moved.loop.keypoints - base.loop.keypoints - offset).norm(dim=-1).max()) <= 1e-6


def test_bundled_scenarios_load():
    assert bundled_scenarios() == ["canned_pineapple", "coffee_box", "grapefruit", "triangular_prism"]
    for name in bundled_scenarios():
        scenario = load_scenario(bundled_scenario(name))
        assert scenario.name == name
        assert scenario.soigen.omega == scenario.omega
        assert scenario.manifold.omega == scenario.omega
        assert scenario.plant.n_s % scenario.n_x == 0

    box = load_scenario(bundled_scenario("coffee_box"))
    assert box.n_x == 20 and box.omega == 0.68
    assert len(box.all_obstacles) == 1


def test_scenario_overrides():
    path = bundled_scenario("coffee_box")
    scenario = load_scenario(path, ["mpc.horizon=5", "sensor.noise_sigma=0.001", "notes=edited"])
    assert scenario.mpc.horizon == 5
    assert scenario.sensor.noise_sigma == 0.001
    assert scenario.notes == "edited"

    with pytest.raises(ValidationError, match="unknown key mpc.bogus"):
        load_scenario(path, ["mpc.bogus=1"])
    with pytest.raises(ValidationError, match="KEY=VALUE"):
        load_scenario(path, ["mpc.horizon"])
    with pytest.raises(ValidationError, match="horizon"):
        load_scenario(path, ["mpc.horizon=0"])
    with pytest.raises(TooFewPoints):
        load_scenario(path, ["sensor.points_per_frame=100"])


def test_apply_overrides_copies_document():
    doc = {"mpc": {"horizon": 10}}
    edited = apply_overrides(doc, ["mpc.horizon=3", "planner.goal_bias=0.2"])
    assert doc == {"mpc": {"horizon": 10}}
    assert edited == {"mpc": {"horizon": 3}, "planner": {"goal_bias": 0.2}}


def test_scenario_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text('{"name": "broken",')
    with pytest.raises(ParseError, match="broken.json"):
        load_scenario(broken)
    with pytest.raises(ParseError, match="available"):
        bundled_scenario("no_such_scenario")

    doc = json.loads(bundled_scenario("coffee_box").read_text())
    del doc["object"]
    missing = tmp_path / "missing_object.json"
    missing.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="object"):
        load_scenario(missing)


def test_zero_command_keeps_equilibrium():
    plant = BagPlant(PlantConfig(), OMEGA, 20)
    assert plant.converged
    before = plant.loop.keypoints
    after = plant.step(torch.zeros(POSE_DIM))
    assert float((plant.loop.keypoints - before).norm(dim=-1).max()) <= 1e-9
    assert plant.iterations == 0
    torch.testing.assert_close(after.keypoints, plant.loop.keypoints[::5])


def test_settled_rim_is_stationary():
    plant = BagPlant(PlantConfig(), OMEGA, 20)
    u = torch.zeros(POSE_DIM)
    u[0], u[6], u[4] = -0.004, 0.004, 0.015
    plant.step(u)
    assert plant.converged and plant.nonconverged_steps == 0
    free = plant.nodes[plant.free_index].clone().requires_grad_(True)
    plant.energy(plant._assemble(free, plant.fixed_positions())).backward()
    assert float(free.grad.norm()) * plant.scale <= plant.cfg.tolerance_grad


def test_grippers_apart_keep_perimeter():
    plant = BagPlant(PlantConfig(), OMEGA, 20)
    sag = float(plant.loop.keypoints[:, 2].min())
    assert sag < 0.15
    u = torch.zeros(POSE_DIM)
    u[0], u[6] = -0.005, 0.005
    for _ in range(2):
        plant.step(u)
    span = plant.loop.keypoints[:, 0]
    assert float(span.max() - span.min()) >= 0.24 - 1e-9
    assert polyline_perimeter(plant.loop.keypoints) == pytest.approx(OMEGA, rel=0.02)


def test_unsettled_equilibrium_is_reported():
    with pytest.raises(NonConvergedEquilibrium) as info:
        BagPlant(PlantConfig(max_iter=1), OMEGA, 20)
    assert info.value.state.n_x == 20
    assert info.value.gradient > PlantConfig().tolerance_grad


def test_saturation_guard_follows_controller_limits():
    u_max = MpcConfig(u_max_translation=0.001, u_max_rotation=0.004).u_max
    plant = BagPlant(PlantConfig(), OMEGA, 20, u_max=u_max)
    u = torch.zeros(POSE_DIM)
    u[2] = 0.002
    plant.step(u)
    u[2] = 0.0021
    with pytest.raises(ValueError, match="saturation"):
        plant.step(u)
    u[2], u[9] = 0.0, 0.009
    with pytest.raises(ValueError, match="saturation"):
        plant.step(u)


@pytest.mark.slow
def test_perimeter_holds_over_long_runs():
    plant = BagPlant(PlantConfig(), OMEGA, 20)
    rng = torch.Generator().manual_seed(3)
    u_max = MpcConfig().u_max
    for k in range(250):
        u = (2 * torch.rand(POSE_DIM, generator=rng) - 1) * u_max
        for command in (u, -u):
            plant.step(command)
            assert plant.converged
            assert polyline_perimeter(plant.loop.keypoints) == pytest.approx(OMEGA, rel=0.02)
    assert plant.nonconverged_steps == 0
