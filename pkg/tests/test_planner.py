import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from bagSOI import planner, solver
from bagSOI.errors import Infeasible, PlanningFailed, ValidationError
from bagSOI.estimation import RimState
from bagSOI.geom import Ellipse3D, chamfer, ellipse3d_sample, polyline_perimeter
from bagSOI.manifold import ManifoldParams, ellipse_residuals, project_with_ellipse
from bagSOI.planner import (
    PROJECTION_OPTIONS,
    DeformationPath,
    Node,
    ObstacleVolume,
    PlannerConfig,
    align_correspondence,
    cbirrt,
    constrained_extend,
    densify_loop,
    in_collision,
    nearest_node,
    path_length,
    plan,
    refine_path,
    sample_random_config,
    sample_random_ellipse,
    segment_in_collision,
)
from bagSOI.sim import bundled_scenario, bundled_scenarios, initial_loop, load_scenario
from bagSOI.soigen import generate_bagging_soi, generate_goal_soi

PARAMS = ManifoldParams()
CFG = PlannerConfig(shortcut_attempts=10)
UP = torch.tensor([0.0, 0.0, 1.0])


def _circle(radius: float = 0.1, n: int = 20, z: float = 0.0) -> RimState:
    return RimState(ellipse3d_sample(Ellipse3D(torch.tensor([0.0, 0.0, z]), radius, radius, torch.tensor([1.0, 0, 0]), torch.tensor([0.0, 1, 0])), n))


@pytest.fixture(scope="module")
def start_node() -> Node:
    rim, ellipse = project_with_ellipse(RimState(initial_loop((-0.11, 0, 0.15), (0.11, 0, 0.15), PARAMS.omega, 20)), PARAMS)
    return Node(rim, ellipse)


def test_box_obstacle():
    box = ObstacleVolume.box([-1.0, -1, -1], [1.0, 1, 1])
    assert box.contains(torch.zeros(1, 3)).all()
    assert not box.contains(torch.tensor([[2.0, 0, 0]])).any()
    assert float(box.signed_distance(torch.zeros(1, 3))[0]) == pytest.approx(-1.0)
    assert float(box.signed_distance(torch.tensor([[1.5, 0, 0]]))[0]) == pytest.approx(0.5)
    assert box.contains(torch.tensor([[1.0005, 0, 0]]), margin=1e-3).all()


def test_polytope_obstacle():
    tetra = ObstacleVolume.polytope([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    assert tetra.contains(torch.tensor([[0.1, 0.1, 0.1]])).all()
    assert not tetra.contains(torch.tensor([[0.6, 0.6, 0.6]])).any()
    normals = tetra.normals.norm(dim=-1)
    torch.testing.assert_close(normals, torch.ones_like(normals))


def test_obstacle_validation():
    with pytest.raises(ValidationError, match="positive volume"):
        ObstacleVolume.box([0.0, 0, 0], [1.0, 1, 0])
    with pytest.raises(ValidationError, match="degenerate"):
        ObstacleVolume.polytope([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(ValidationError, match="kind"):
        ObstacleVolume(kind="sphere")
    with pytest.raises(ValidationError):
        ObstacleVolume(kind="box", lower=torch.zeros(3))


def test_planner_config_validation():
    with pytest.raises(ValidationError, match="displacement_limit"):
        PlannerConfig(step=0.05, displacement_limit=0.03)
    with pytest.raises(ValidationError, match="goal_bias"):
        PlannerConfig(goal_bias=1.0)
    with pytest.raises(ValidationError, match="workspace_lower"):
        PlannerConfig(workspace_lower=(0.0, 0.0, 0.6))


def test_densify_loop():
    square = torch.tensor([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    dense = densify_loop(square, 3)
    assert dense.shape == (16, 3)
    torch.testing.assert_close(dense[:4], torch.tensor([[0.0, 0, 0], [0.25, 0, 0], [0.5, 0, 0], [0.75, 0, 0]]))
    assert polyline_perimeter(dense) == pytest.approx(4.0)


def test_in_collision_examples():
    rim = _circle()
    assert not in_collision(rim, [])
    assert not in_collision(rim, [ObstacleVolume.box([-0.01] * 3, [0.01] * 3)])
    assert in_collision(rim, [ObstacleVolume.box([-0.2, -0.2, -0.01], [0.2, 0.2, 0.01])])
    # only the densified segment samples reach this box
    between = ObstacleVolume.box([0.0975, 0.0138, -0.01], [0.0980, 0.0143, 0.01])
    assert not between.contains(rim.keypoints).any()
    assert in_collision(rim, [between], margin=0.0)


def test_segment_in_collision():
    below, above = _circle(z=-0.1), _circle(z=0.1)
    slab = [ObstacleVolume.box([0.05, -0.02, -0.01], [0.15, 0.02, 0.01])]
    assert not in_collision(below, slab) and not in_collision(above, slab)
    assert segment_in_collision(below, above, slab)
    assert not segment_in_collision(below, above, [])


def test_align_correspondence_undoes_shift_and_reversal():
    rim = _circle()
    shifted = RimState(torch.roll(rim.keypoints, 7, dims=0))
    torch.testing.assert_close(align_correspondence(shifted, rim).keypoints, rim.keypoints)
    reversed_rim = RimState(torch.flip(rim.keypoints, dims=[0]))
    torch.testing.assert_close(align_correspondence(reversed_rim, rim).keypoints, rim.keypoints)
    assert align_correspondence(rim, _circle(n=12)) is rim


def test_random_samples_are_feasible_and_deterministic():
    cfg = PlannerConfig()
    a = sample_random_config(np.random.default_rng(5), cfg, PARAMS, 20)
    b = sample_random_config(np.random.default_rng(5), cfg, PARAMS, 20)
    assert torch.equal(a.keypoints, b.keypoints)

    rng = np.random.default_rng(0)
    lower, upper = torch.tensor(cfg.workspace_lower), torch.tensor(cfg.workspace_upper)
    for _ in range(100):
        ellipse = sample_random_ellipse(rng, cfg, PARAMS)
        rim = RimState(ellipse.point(torch.arange(1, 21) * 2 * math.pi / 20))
        ratio, offset = ellipse_residuals(ellipse, rim, PARAMS)
        assert abs(ratio - 1) <= PARAMS.lambda4
        assert offset < 1e-12
        assert bool((rim.centroid >= lower).all() and (rim.centroid <= upper).all())
        assert 1.0 <= ellipse.beta_a / ellipse.beta_b <= 2.5 + 1e-9


def test_nearest_node():
    nodes = [Node(_circle(z=z), None) for z in (0.0, 0.1, 0.2)]
    assert nearest_node(nodes, _circle(z=0.12)) is nodes[1]


def test_deformation_path():
    nodes = [_circle(z=0.01 * i) for i in range(5)]
    path = DeformationPath(nodes, 2)
    assert path.stages == ["pre-bagging"] * 3 + ["bagging"] * 2
    assert path.handover is nodes[2] and path.goal is nodes[-1] and path[0] is path.start
    assert len(DeformationPath(nodes[:1], 0)) == 1
    with pytest.raises(ValueError):
        DeformationPath([], 0)
    with pytest.raises(ValueError):
        DeformationPath(nodes, 5)


def test_extend_to_own_node_leaves_tree_unchanged(start_node):
    tree = [start_node]
    node, reached = constrained_extend(tree, start_node.rim, CFG, PARAMS, [])
    assert reached and node is start_node
    assert tree == [start_node]


def test_extend_reaches_nearby_target(start_node):
    target = start_node.rim.translated(0.03 * UP)
    assert chamfer(target.keypoints, start_node.rim.keypoints) == pytest.approx(3 * CFG.step, rel=1e-6)
    tree = [start_node]
    node, reached = constrained_extend(tree, target, CFG, PARAMS, [])
    assert reached
    assert len(tree) - 1 <= 5
    assert chamfer(node.rim.keypoints, target.keypoints) <= CFG.goal_tolerance


def test_extend_stops_before_obstacle(start_node):
    target = start_node.rim.translated(0.1 * UP)
    lid = [ObstacleVolume.box([-0.3, -0.3, 0.2], [0.3, 0.3, 0.22])]
    tree = [start_node]
    node, reached = constrained_extend(tree, target, CFG, PARAMS, lid)
    assert not reached
    assert not in_collision(node.rim, lid)
    assert chamfer(node.rim.keypoints, target.keypoints) < chamfer(start_node.rim.keypoints, target.keypoints)


def test_cbirrt_identical_endpoints(start_node):
    assert cbirrt(start_node, start_node, [], CFG, PARAMS, np.random.default_rng(0)) == [start_node]


def test_refine_single_node_path(start_node):
    assert len(refine_path([start_node], CFG, PARAMS, [])) == 1


def test_plan_identical_endpoints_is_single_node(start_node):
    path = plan(start_node.rim, start_node.rim, start_node.rim, [], CFG, PARAMS)
    assert len(path) == 1
    assert path.handover_index == 0
    assert chamfer(path.start.keypoints, start_node.rim.keypoints) <= CFG.goal_tolerance


def test_plan_rejects_colliding_endpoint(start_node):
    target = start_node.rim.translated(0.1 * UP)
    block = [ObstacleVolume.box([-0.3, -0.3, 0.24], [0.3, 0.3, 0.26])]
    with pytest.raises(PlanningFailed) as info:
        plan(start_node.rim, target, target, block, CFG, PARAMS)
    assert info.value.stage == "handover"
    assert str(info.value).startswith("[handover]")


def _check_path(path: DeformationPath, cfg: PlannerConfig, obstacles):
    for i, (rim, ellipse) in enumerate(zip(path.nodes, path.ellipses)):
        ratio, offset = ellipse_residuals(ellipse, rim, PARAMS)
        assert abs(ratio - 1) <= PARAMS.lambda4 + 1e-6
        assert not in_collision(rim, obstacles, cfg.collision_margin)
        if i:
            previous = path.nodes[i - 1]
            assert chamfer(previous.keypoints, rim.keypoints) <= cfg.step + 1e-6
            assert float((rim.keypoints - previous.keypoints).norm(dim=-1).max()) <= cfg.displacement_limit + 1e-9


@pytest.mark.slow
def test_plan_translation_task(start_node):
    x_dag = start_node.rim.translated([0.0, 0.05, 0.05])
    x_star = x_dag.translated(0.05 * UP)
    path = plan(start_node.rim, x_dag, x_star, [], CFG, PARAMS)
    _check_path(path, CFG, [])
    assert chamfer(path.handover.keypoints, x_dag.keypoints) <= CFG.goal_tolerance + 2e-3
    assert chamfer(path.goal.keypoints, x_star.keypoints) <= CFG.goal_tolerance + 2e-3
    to_goal = [chamfer(rim.keypoints, path.handover.keypoints) for rim in path.nodes[: path.handover_index + 1]]
    assert all(b < a + 1e-3 for a, b in zip(to_goal, to_goal[1:]))

    again = plan(start_node.rim, x_dag, x_star, [], CFG, PARAMS)
    assert len(again) == len(path)
    assert all(torch.equal(a.keypoints, b.keypoints) for a, b in zip(again.nodes, path.nodes))


@pytest.mark.slow
def test_refine_shortens_zigzag(start_node):
    offsets = [[0.0, 0.0, 0.0], [0.03, 0.0, 0.02], [0.0, 0.0, 0.04], [0.03, 0.0, 0.06], [0.0, 0.0, 0.08]]
    raw = []
    for offset in offsets:
        rim, ellipse = project_with_ellipse(start_node.rim.translated(offset), PARAMS, init=start_node.ellipse)
        raw.append(Node(align_correspondence(rim, start_node.rim), ellipse))
    refined = refine_path(raw, CFG, PARAMS, [], np.random.default_rng(1))
    assert path_length(refined) <= path_length(raw)


def test_warm_projection_uses_exact_gradients(start_node, monkeypatch):
    evaluations = []
    minimize = solver.minimize

    def counting(*args, **kwargs):
        result = minimize(*args, **kwargs)
        evaluations.append(result.nfev)
        return result

    monkeypatch.setattr(solver, "minimize", counting)
    moved = start_node.rim.translated([0.0, 0.005, 0.01])
    rim, ellipse = project_with_ellipse(moved, PARAMS, init=start_node.ellipse, opts=PROJECTION_OPTIONS)
    assert len(evaluations) == len(PROJECTION_OPTIONS.penalty_schedule)
    assert sum(evaluations) <= 4 * PROJECTION_OPTIONS.max_inner_iters
    ratio, offset = ellipse_residuals(ellipse, rim, PARAMS)
    assert abs(ratio - 1) <= PARAMS.lambda4 + 1e-6 and offset <= PARAMS.lambda5 + 1e-6
    assert chamfer(rim.keypoints, moved.keypoints) < 5e-3


def test_extend_step_matches_chamfer_step(start_node):
    target = start_node.rim.translated(0.1 * UP)
    tree = [start_node]
    constrained_extend(tree, target, CFG, PARAMS, [])
    assert len(tree) >= 3
    for parent, child in zip(tree[:-1], tree[1:]):
        assert chamfer(parent.rim.keypoints, child.rim.keypoints) <= 1.25 * CFG.step


def test_shortcut_budget_bounds_projections(start_node, monkeypatch):
    calls = []
    project = planner.project_with_ellipse

    def counting(*args, **kwargs):
        calls.append(1)
        return project(*args, **kwargs)

    monkeypatch.setattr(planner, "project_with_ellipse", counting)
    raw = [Node(start_node.rim.translated(0.004 * k * UP), start_node.ellipse) for k in range(6)]
    cfg = PlannerConfig(shortcut_attempts=100, shortcut_budget=0)
    refined = refine_path(raw, cfg, PARAMS, [], np.random.default_rng(0))
    assert calls == []
    assert len(refined) == len(raw) and all(a.rim is b.rim for a, b in zip(refined, raw))


def test_subdivision_failure_is_reported(start_node, monkeypatch):
    def no_projection(*args, **kwargs):
        raise Infeasible("no stable ellipse")

    monkeypatch.setattr(planner, "project_with_ellipse", no_projection)
    far = Node(start_node.rim.translated(0.05 * UP), start_node.ellipse)
    with pytest.raises(PlanningFailed, match="subdivided"):
        refine_path([start_node, far], PlannerConfig(shortcut_attempts=0), PARAMS, [])


def test_subdivision_retries_with_finer_pieces(start_node, monkeypatch):
    project = planner.project_with_ellipse
    calls = []

    def fails_once(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise Infeasible("no stable ellipse")
        return project(*args, **kwargs)

    monkeypatch.setattr(planner, "project_with_ellipse", fails_once)
    cfg = PlannerConfig(shortcut_attempts=0)
    far = Node(start_node.rim.translated(0.03 * UP), start_node.ellipse)
    nodes = refine_path([start_node, far], cfg, PARAMS, [])
    assert len(calls) > 1 and len(nodes) > 2
    for a, b in zip(nodes[:-1], nodes[1:]):
        assert chamfer(a.rim.keypoints, b.rim.keypoints) <= cfg.step + 1e-6


@pytest.mark.slow
def test_plan_around_cuboid_obstacle(start_node):
    cuboid = [ObstacleVolume.box([0.08, -0.03, 0.20], [0.14, 0.03, 0.24], name="cuboid")]
    x_dag = start_node.rim.translated([0.0, 0.0, 0.12])
    successes = 0
    for seed in range(10):
        cfg = PlannerConfig(rng_seed=seed)
        try:
            path = plan(start_node.rim, x_dag, x_dag, cuboid, cfg, PARAMS)
        except PlanningFailed:
            continue
        _check_path(path, cfg, cuboid)
        successes += 1
    assert successes >= 9


@pytest.mark.slow
@pytest.mark.parametrize("name", bundled_scenarios())
def test_plan_bundled_scenarios(name):
    scenario = load_scenario(bundled_scenario(name))
    x0 = scenario.build_plant().state
    soi = generate_bagging_soi(scenario.object, scenario.soigen)
    x_star = generate_goal_soi(soi.rim, soi.frame, scenario.soigen.gamma)
    successes = 0
    for seed in range(10):
        cfg = replace(scenario.planner, rng_seed=seed)
        tic = time.perf_counter()
        try:
            path = plan(x0, soi.rim, x_star, scenario.all_obstacles, cfg, scenario.manifold)
        except PlanningFailed:
            continue
        assert time.perf_counter() - tic < 30
        _check_path(path, cfg, scenario.all_obstacles)
        successes += 1
    assert successes >= 9
