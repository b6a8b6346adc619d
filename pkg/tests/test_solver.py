import math

import pytest
import torch

from bagSOI.errors import NonFiniteCost
from bagSOI.solver import ConstraintSpec, SolveOptions, minimize_penalized


def test_constraint_violation():
    c = ConstraintSpec(lambda p: p[0], 0.0, 1.0, name="unit")
    assert c.violation(0.5) == 0.0
    assert c.violation(-0.25) == pytest.approx(0.25)
    assert c.violation(3.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        ConstraintSpec(lambda p: p[0], 1.0, 0.0)


def test_unconstrained_quadratic():
    report = minimize_penalized(lambda p: float((p[0] - 1) ** 2 + (p[1] + 2) ** 2), [], torch.zeros(2))
    torch.testing.assert_close(report.params, torch.tensor([1.0, -2.0]), atol=1e-6, rtol=0)
    assert report.max_violation == 0.0
    assert report.converged


def test_active_lower_bound():
    report = minimize_penalized(
        lambda p: float(p[0] ** 2 + p[1] ** 2),
        [ConstraintSpec(lambda p: float(p[0] + p[1]), 1.0, math.inf, name="sum")],
        torch.tensor([2.0, -1.0]),
    )
    torch.testing.assert_close(report.params, torch.tensor([0.5, 0.5]), atol=1e-4, rtol=0)
    assert report.max_violation < 1e-5
    assert report.cost == pytest.approx(0.5, abs=1e-4)


def test_stage_violations_never_increase():
    report = minimize_penalized(
        lambda p: float((p[0] - 3) ** 2),
        [ConstraintSpec(lambda p: float(p[0]), -1.0, 1.0)],
        torch.tensor([0.0]),
    )
    history = report.stage_violations
    assert len(history) == len(SolveOptions().penalty_schedule)
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert float(report.params[0]) == pytest.approx(1.0, abs=1e-4)


def test_infeasible_problem_reports_not_converged():
    opts = SolveOptions(penalty_schedule=(1e2, 1e4), polish_rounds=1, restarts=2)
    report = minimize_penalized(
        lambda p: float(p[0] ** 2),
        [ConstraintSpec(lambda p: float(p[0]), 1.0, math.inf), ConstraintSpec(lambda p: float(p[0]), -math.inf, -1.0)],
        torch.tensor([0.3]),
        opts,
    )
    assert not report.converged
    assert report.max_violation > 0.5
    assert report.restarts == 2


def test_non_finite_initial_cost():
    with pytest.raises(NonFiniteCost):
        minimize_penalized(lambda p: float("nan"), [], torch.zeros(1))
    with pytest.raises(NonFiniteCost):
        minimize_penalized(lambda p: 0.0, [ConstraintSpec(lambda p: math.inf, 0.0, 1.0)], torch.zeros(1))


def test_autograd_gradients_match_finite_differences():
    def cost(p):
        return (p[0] - 1) ** 2 + 10 * (p[1] - p[0] ** 2) ** 2

    constraints = [ConstraintSpec(lambda p: p[0] + p[1], -math.inf, 1.5, name="sum")]
    exact = minimize_penalized(cost, constraints, torch.tensor([-0.5, 0.5]), SolveOptions(jac="autograd"))
    numeric = minimize_penalized(cost, constraints, torch.tensor([-0.5, 0.5]))
    torch.testing.assert_close(exact.params, numeric.params, atol=1e-4, rtol=0)
    assert exact.max_violation < 1e-5


def test_solve_options_validation():
    with pytest.raises(ValueError, match="jac"):
        SolveOptions(jac="2-point")
    with pytest.raises(ValueError, match="penalty_schedule"):
        SolveOptions(penalty_schedule=())


def _circle_to_perimeter():
    def perimeter(p):
        return 2 * math.pi * math.sqrt(float(p[0] ** 2 + p[1] ** 2) / 2)

    def cost(p):
        return float((p[0] - p[1]) ** 2)

    return cost, [ConstraintSpec(perimeter, 0.68, 0.68, name="perimeter")]


def test_circle_radius_from_perimeter():
    cost, constraints = _circle_to_perimeter()
    report = minimize_penalized(cost, constraints, torch.tensor([0.05, 0.15]))
    torch.testing.assert_close(report.params, torch.full((2,), 0.68 / (2 * math.pi)), atol=1e-5, rtol=0)
    assert report.converged


def test_repeated_solves_are_identical():
    cost, constraints = _circle_to_perimeter()
    first = minimize_penalized(cost, constraints, torch.tensor([0.05, 0.15]))
    second = minimize_penalized(cost, constraints, torch.tensor([0.05, 0.15]))
    assert torch.equal(first.params, second.params)
    assert (first.cost, first.max_violation, first.iterations) == (second.cost, second.max_violation, second.iterations)
    assert first.stage_violations == second.stage_violations


def test_feasible_minimum_is_kept():
    init = torch.tensor([0.0, 0.5])
    report = minimize_penalized(
        lambda p: float(p[0] ** 2 + (p[1] - 0.5) ** 2), [ConstraintSpec(lambda p: float(p[0]), -1.0, 1.0)], init
    )
    assert float((report.params - init).norm()) < 1e-6
    assert report.max_violation == 0.0
