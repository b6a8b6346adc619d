import math
from dataclasses import dataclass, field
import typing as tp

import numpy as np
import torch
from scipy.optimize import minimize

from .errors import NonFiniteCost
from .utils import DTYPE, get_logger

logger = get_logger(__name__)

Params = torch.Tensor
Evaluator = tp.Callable[[Params], tp.Union[float, torch.Tensor]]

# stand-in objective value when an evaluation leaves the domain mid-search
_OUT_OF_DOMAIN = 1e30


@dataclass(frozen=True)
class ConstraintSpec:
    """Two-sided interval constraint lower <= evaluator(p) <= upper (either side may be infinite)."""

    evaluator: Evaluator
    lower: float = -math.inf
    upper: float = math.inf
    name: str = ""
    kind: str = "interval"

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"constraint {self.name or '?'}: lower bound {self.lower} exceeds upper {self.upper}")

    def violation(self, value: float) -> float:
        return max(self.lower - value, 0.0) + max(value - self.upper, 0.0)


@dataclass(frozen=True)
class SolveOptions:
    feasibility_tol: float = 1e-6
    cost_rtol: float = 1e-9
    penalty_schedule: tp.Tuple[float, ...] = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
    max_inner_iters: int = 200
    gtol: float = 1e-10
    fd_rel_step: float = 1e-6
    polish_rounds: int = 3
    restarts: int = 5
    jitter: float = 0.1
    jitter_floor: float = 1e-2
    seed: int = 0
    # "3-point" finite differences, or "autograd" for evaluators that return differentiable tensors
    jac: str = "3-point"

    def __post_init__(self):
        if self.jac not in ("3-point", "autograd"):
            raise ValueError(f"jac must be '3-point' or 'autograd', got {self.jac!r}")
        if not self.penalty_schedule:
            raise ValueError("penalty_schedule must not be empty")


@dataclass
class SolveReport:
    params: Params
    cost: float
    max_violation: float
    iterations: int
    converged: bool
    stage_violations: tp.List[float] = field(default_factory=list)
    restarts: int = 0


class _Penalized:
    """cost + mu * sum(violation^2) over numpy parameter vectors."""

    def __init__(self, cost: Evaluator, constraints: tp.Sequence[ConstraintSpec]):
        self.cost = cost
        self.constraints = list(constraints)

    def cost_value(self, x: np.ndarray) -> float:
        return float(self.cost(torch.from_numpy(np.array(x, dtype=np.float64))))

    def violations(self, x: np.ndarray) -> tp.List[float]:
        p = torch.from_numpy(np.array(x, dtype=np.float64))
        return [c.violation(float(c.evaluator(p))) for c in self.constraints]

    def max_violation(self, x: np.ndarray) -> float:
        return max(self.violations(x), default=0.0)

    def __call__(self, x: np.ndarray, mu: float) -> float:
        p = torch.from_numpy(np.array(x, dtype=np.float64))
        total = float(self.cost(p)) + mu * sum(c.violation(float(c.evaluator(p))) ** 2 for c in self.constraints)
        return total if math.isfinite(total) else _OUT_OF_DOMAIN

    def value_and_grad(self, x: np.ndarray, mu: float) -> tp.Tuple[float, np.ndarray]:
        p = torch.from_numpy(np.array(x, dtype=np.float64)).requires_grad_(True)
        total = torch.as_tensor(self.cost(p), dtype=DTYPE)
        for c in self.constraints:
            value = torch.as_tensor(c.evaluator(p), dtype=DTYPE)
            violation = torch.relu(c.lower - value) + torch.relu(value - c.upper)
            total = total + mu * violation ** 2
        if not torch.isfinite(total):
            return _OUT_OF_DOMAIN, np.zeros_like(x)
        if not total.requires_grad:
            return float(total), np.zeros_like(x)
        (grad,) = torch.autograd.grad(total, p, allow_unused=True)
        if grad is None:
            return float(total), np.zeros_like(x)
        if not torch.isfinite(grad).all():
            return _OUT_OF_DOMAIN, np.zeros_like(x)
        return float(total), grad.numpy().copy()


def _inner_minimize(objective: _Penalized, x: np.ndarray, mu: float, opts: SolveOptions):
    if opts.jac == "autograd":
        return minimize(
            objective.value_and_grad,
            x,
            args=(mu,),
            method="BFGS",
            jac=True,
            options=dict(maxiter=opts.max_inner_iters, gtol=opts.gtol),
        )
    return minimize(
        objective,
        x,
        args=(mu,),
        method="BFGS",
        jac="3-point",
        options=dict(maxiter=opts.max_inner_iters, gtol=opts.gtol, finite_diff_rel_step=opts.fd_rel_step),
    )


def _single_solve(objective: _Penalized, init: np.ndarray, opts: SolveOptions) -> SolveReport:
    x = init.copy()
    iterations = 0
    stage_violations: tp.List[float] = []
    for mu in opts.penalty_schedule:
        result = _inner_minimize(objective, x, mu, opts)
        iterations += int(result.nit)
        violation = objective.max_violation(result.x)
        if stage_violations and violation > stage_violations[-1]:
            # keep the previous stage: the recorded violation never increases
            stage_violations.append(stage_violations[-1])
        else:
            x = result.x
            stage_violations.append(violation)
        logger.debug(f"penalty stage mu={mu:.0e}: cost={objective.cost_value(x):.6e} violation={stage_violations[-1]:.3e}")

    mu_max = opts.penalty_schedule[-1]
    value = objective(x, mu_max)
    rel_change = math.inf
    for _ in range(opts.polish_rounds):
        result = _inner_minimize(objective, x, mu_max, opts)
        iterations += int(result.nit)
        rel_change = abs(value - result.fun) / max(1.0, abs(value))
        if result.fun <= value and objective.max_violation(result.x) <= stage_violations[-1]:
            x, value = result.x, float(result.fun)
        if rel_change <= opts.cost_rtol:
            break

    max_violation = objective.max_violation(x)
    return SolveReport(
        params=torch.from_numpy(x.copy()).to(DTYPE),
        cost=objective.cost_value(x),
        max_violation=max_violation,
        iterations=iterations,
        converged=max_violation <= opts.feasibility_tol and rel_change <= opts.cost_rtol,
        stage_violations=stage_violations,
    )


def _rank(report: SolveReport, opts: SolveOptions) -> tp.Tuple[float, float]:
    violation = report.max_violation if report.max_violation > opts.feasibility_tol else 0.0
    return violation, report.cost


def minimize_penalized(
    cost: Evaluator,
    constraints: tp.Sequence[ConstraintSpec],
    init,
    opts: tp.Optional[SolveOptions] = None,
) -> SolveReport:
    """
    Quadratic-penalty minimization of cost subject to interval constraints.
    The inner loop is BFGS with central finite-difference gradients, or autograd gradients when
    opts.jac is "autograd"; when the first solve ends infeasible, up to opts.restarts seeded jittered restarts are tried.

    :param cost: maps a float64 parameter tensor to a scalar
    :param constraints: interval constraints on scalar functions of the parameters
    :param init: initial parameter vector
    :returns: SolveReport of the best attempt (feasible first, then lowest cost);
        converged=False signals failure, the caller decides what to do with it
    """
    opts = opts or SolveOptions()
    objective = _Penalized(cost, constraints)
    init = np.asarray(torch.as_tensor(init, dtype=DTYPE).numpy(), dtype=np.float64).copy()
    if not math.isfinite(objective.cost_value(init)):
        raise NonFiniteCost("cost is not finite at the initial point")
    if not all(math.isfinite(v) for v in objective.violations(init)):
        raise NonFiniteCost("a constraint evaluator is not finite at the initial point")

    best = _single_solve(objective, init, opts)
    rng = np.random.default_rng(opts.seed)
    attempt = 0
    while best.max_violation > opts.feasibility_tol and attempt < opts.restarts:
        attempt += 1
        logger.warning(f"solve infeasible (violation {best.max_violation:.3e}), restart {attempt}/{opts.restarts}")
        jittered = init + rng.normal(size=init.shape) * opts.jitter * (np.abs(init) + opts.jitter_floor)
        report = _single_solve(objective, jittered, opts)
        if _rank(report, opts) < _rank(best, opts):
            best = report
    best.restarts = attempt
    return best
