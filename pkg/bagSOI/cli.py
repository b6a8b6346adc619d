import glob
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
import typing as tp

import torch
from tqdm.auto import tqdm
from transformers import HfArgumentParser

from . import artifacts, plotting
from .control import track_path
from .errors import BagSOIError, ParseError, PlanningFailed, TrackingFailed
from .estimation import RimEstimator, estimate_rim, init_rim, remove_sparse_outliers
from .geom import chamfer, transform_points
from .manifold import ellipse_residuals, project_stable_config
from .planner import in_collision, plan
from .sim import SCENARIO_DIR, Scenario, bundled_scenario, load_scenario
from .soigen import bagging_residuals, generate_bagging_soi, generate_goal_soi
from .utils import DTYPE, configure_logging, get_logger, spawn_seeds, with_default_dtype

logger = get_logger(__name__)

USAGE = "usage: bagsoi {estimate,generate,plan,run,batch} [--scenario PATH] [--seed N] [--out DIR] [--override KEY=VALUE ...] [--parallel N]"


@dataclass
class CliArguments:
    scenario: str = field(
        default="coffee_box",
        metadata={"help": "scenario file, or the name of a bundled scenario; a glob pattern for batch"},
    )
    seed: int = field(default=0, metadata={"help": "run seed; every random stream is derived from it"})
    out: str = field(default="out", metadata={"help": "output directory"})
    override: tp.List[str] = field(
        default_factory=list, metadata={"help": "dotted config edits, e.g. planner.max_iterations=1"}
    )
    parallel: int = field(default=1, metadata={"help": "worker processes for batch"})
    seeds: int = field(default=8, metadata={"help": "batch runs seeds seed .. seed + seeds - 1"})
    verbosity: str = field(default="info", metadata={"help": "debug, info or warning"})


@dataclass
class RunSummary:
    scenario: str
    seed: int
    planning_success: bool = False
    planning_time: float = 0.0
    path_length: int = 0
    tracking_success: bool = False
    final_chamfer: float = float("nan")
    steps: int = 0
    plant_nonconverged_steps: int = 0
    failure: str = ""

    def to_dict(self) -> tp.Dict[str, tp.Any]:
        payload = asdict(self)
        if payload["final_chamfer"] != payload["final_chamfer"]:
            payload["final_chamfer"] = None
        return payload


def resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.suffix == ".json" or path.exists():
        return path
    return bundled_scenario(name)


def prepare_scenario(args: CliArguments, seed: tp.Optional[int] = None, path: tp.Optional[Path] = None) -> Scenario:
    """Load the scenario with overrides and derive the sensor and planner seeds from the run seed."""
    scenario = load_scenario(path or resolve_scenario(args.scenario), args.override)
    sensor_seed, planner_seed = spawn_seeds(args.seed if seed is None else seed, 2)
    scenario.sensor = replace(scenario.sensor, rng_seed=sensor_seed)
    scenario.planner = replace(scenario.planner, rng_seed=planner_seed)
    return scenario


def _generate(scenario: Scenario):
    soi = generate_bagging_soi(scenario.object, scenario.soigen)
    return soi, generate_goal_soi(soi.rim, soi.frame, scenario.soigen.gamma)


def cmd_estimate(args: CliArguments) -> int:
    scenario = prepare_scenario(args)
    out = Path(args.out)
    plant = scenario.build_plant()
    cloud = plant.observe()
    prior = init_rim(remove_sparse_outliers(cloud), scenario.n_x)
    report = estimate_rim(cloud, prior, scenario.gmm)
    projected = project_stable_config(report.rim, scenario.manifold)

    artifacts.write_points(out / "cloud.csv", cloud)
    artifacts.write_rim(out / "keypoints.csv", report.rim)
    artifacts.write_rim(out / "projected.csv", projected)
    artifacts.write_json(
        out / "estimate.json",
        dict(
            scenario=scenario.name,
            seed=args.seed,
            loglik=report.loglik,
            iterations=report.iterations,
            sigma2=report.sigma2_final,
            chamfer_to_truth=chamfer(report.rim.keypoints, plant.loop.keypoints),
        ),
    )
    plotting.plot_estimate(cloud, report.rim, projected, out / "estimate.svg")
    logger.info(f"estimate written to {out}")
    return 0


def cmd_generate(args: CliArguments) -> int:
    scenario = prepare_scenario(args)
    out = Path(args.out)
    soi, x_star = _generate(scenario)
    mapped = transform_points(soi.frame, scenario.object.bottom_vertices, "world_to_frame")
    residuals = bagging_residuals(mapped[:, :2], soi.ellipse, scenario.soigen)

    artifacts.write_rim(out / "x_dag.csv", soi.rim)
    artifacts.write_rim(out / "x_star.csv", x_star)
    artifacts.write_json(
        out / "residuals.json",
        dict(
            scenario=scenario.name,
            c1=residuals.c1,
            c2=residuals.c2,
            c3=residuals.c3,
            perimeter=residuals.perimeter,
            isotropic=residuals.isotropic,
            feasible=residuals.feasible(scenario.soigen),
            ellipse=dict(
                tau_x=soi.ellipse.tau_x,
                tau_y=soi.ellipse.tau_y,
                rho_a=soi.ellipse.rho_a,
                rho_b=soi.ellipse.rho_b,
                alpha=soi.ellipse.alpha,
            ),
        ),
    )
    plotting.plot_soi(scenario.object.bottom_vertices, soi.rim, x_star, out / "soi.svg")
    logger.info(f"bagging and goal SOI written to {out}")
    return 0


def _path_report(path, scenario: Scenario) -> tp.List[tp.Dict[str, tp.Any]]:
    report = []
    for i, (rim, ellipse) in enumerate(zip(path.nodes, path.ellipses)):
        ratio, offset = ellipse_residuals(ellipse, rim, scenario.manifold)
        report.append(
            dict(
                node=i,
                stage=path.stage_of(i),
                perimeter_ratio=ratio,
                centroid_offset=offset,
                in_collision=in_collision(rim, scenario.all_obstacles, scenario.planner.collision_margin),
            )
        )
    return report


def _plan(scenario: Scenario, x0, out: Path, summary: RunSummary):
    soi, x_star = _generate(scenario)
    tic = time.perf_counter()
    try:
        path = plan(x0, soi.rim, x_star, scenario.all_obstacles, scenario.planner, scenario.manifold)
    except PlanningFailed as e:
        summary.planning_time = time.perf_counter() - tic
        summary.failure = str(e)
        raise
    summary.planning_time = time.perf_counter() - tic
    summary.planning_success = True
    summary.path_length = len(path)
    artifacts.write_path(out / "path.csv", path)
    artifacts.write_json(
        out / "path_residuals.json",
        dict(handover_index=path.handover_index, nodes=_path_report(path, scenario)),
    )
    plotting.plot_path(path, scenario.all_obstacles, out / "path.svg")
    return path


def cmd_plan(args: CliArguments) -> int:
    scenario = prepare_scenario(args)
    out = Path(args.out)
    summary = RunSummary(scenario.name, args.seed)
    plant = scenario.build_plant()
    x0 = RimEstimator(scenario.gmm, scenario.n_x).update(plant.observe())
    try:
        _plan(scenario, x0, out, summary)
    finally:
        artifacts.write_json(out / "plan.json", summary.to_dict())
    logger.info(f"path with {summary.path_length} nodes planned in {summary.planning_time:.2f} s")
    return 0


def run_pipeline(scenario: Scenario, seed: int, out: Path) -> RunSummary:
    """Estimate, generate, plan and track on the simulated plant; writes the run artifacts to out."""
    summary = RunSummary(scenario.name, seed)
    log = None
    try:
        plant = scenario.build_plant()
        estimator = RimEstimator(scenario.gmm, scenario.n_x)
        x0 = estimator.update(plant.observe())
        path = _plan(scenario, x0, out, summary)
        try:
            log = track_path(path, plant, scenario.mpc, scenario.gmm, estimator=estimator)
        except TrackingFailed as e:
            log = e.log
            summary.failure = str(e)
            raise
        finally:
            if log is not None:
                summary.steps = len(log)
                summary.plant_nonconverged_steps = log.nonconverged_steps
                summary.final_chamfer = chamfer(estimator.rim.keypoints, path.goal.keypoints)
                artifacts.write_runlog(out / "runlog.csv", log)
                plotting.plot_error_trace(log, out / "error_trace.svg")
                plotting.plot_rim_trajectory(log, path, out / "trajectory.svg")
        summary.tracking_success = log.success
    except BagSOIError as e:
        summary.failure = summary.failure or f"{type(e).__name__}: {e}"
        raise
    finally:
        artifacts.write_json(out / "summary.json", summary.to_dict())
    return summary


def cmd_run(args: CliArguments) -> int:
    scenario = prepare_scenario(args)
    summary = run_pipeline(scenario, args.seed, Path(args.out))
    logger.info(f"{scenario.name} seed {args.seed}: tracked in {summary.steps} steps, final Chamfer {summary.final_chamfer:.4f} m")
    return 0


def _batch_child(job: tp.Tuple[CliArguments, Path, int]) -> tp.Dict[str, tp.Any]:
    args, path, seed = job
    torch.set_num_threads(1)
    configure_logging(args.verbosity)
    with with_default_dtype(DTYPE):
        name, run_dir = path.stem, None
        try:
            scenario = prepare_scenario(args, seed=seed, path=path)
            name = scenario.name
            run_dir = Path(args.out) / name / f"seed_{seed}"
            summary = run_pipeline(scenario, seed, run_dir)
        except BagSOIError as e:
            logger.info(f"{name} seed {seed}: {type(e).__name__}: {e}")
            if run_dir is not None and (run_dir / "summary.json").is_file():
                return dict(artifacts.read_json(run_dir / "summary.json"), crashed=False)
            return dict(RunSummary(name, seed, failure=f"{type(e).__name__}: {e}").to_dict(), crashed=False)
        except Exception as e:  # noqa: BLE001
            logger.error(f"{name} seed {seed} crashed: {type(e).__name__}: {e}")
            return dict(RunSummary(name, seed, failure=f"{type(e).__name__}: {e}").to_dict(), crashed=True)
    return dict(summary.to_dict(), crashed=False)


def _mean_std(values: tp.Sequence[float]) -> tp.Tuple[tp.Optional[float], tp.Optional[float]]:
    if not values:
        return None, None
    return statistics.fmean(values), statistics.pstdev(values)


def aggregate(records: tp.Sequence[tp.Dict[str, tp.Any]]) -> tp.List[tp.Dict[str, tp.Any]]:
    """Per-scenario success rates and planning time statistics, in first-appearance order."""
    table = []
    for name in dict.fromkeys(r["scenario"] for r in records):
        runs = [r for r in records if r["scenario"] == name]
        times = [r["planning_time"] for r in runs if r["planning_success"]]
        mean, std = _mean_std(times)
        table.append(
            dict(
                scenario=name,
                runs=len(runs),
                planning_success=sum(r["planning_success"] for r in runs),
                planning_time_mean=mean,
                planning_time_std=std,
                tracking_success=sum(r["tracking_success"] for r in runs),
                crashed=sum(r["crashed"] for r in runs),
            )
        )
    return table


def format_aggregate(table: tp.Sequence[tp.Dict[str, tp.Any]]) -> str:
    lines = [f"{'scenario':<20} {'planning':>9} {'time (s)':>16} {'tracking':>9} {'crashed':>8}"]
    for row in table:
        runs = row["runs"]
        timing = "-" if row["planning_time_mean"] is None else f"{row['planning_time_mean']:.2f} +- {row['planning_time_std']:.2f}"
        lines.append(
            f"{row['scenario']:<20} {row['planning_success']:>4}/{runs:<4} {timing:>16} "
            f"{row['tracking_success']:>4}/{runs:<4} {row['crashed']:>8}"
        )
    return "\n".join(lines) + "\n"


def cmd_batch(args: CliArguments) -> int:
    pattern = Path(args.scenario)
    if pattern.suffix == ".json" or len(pattern.parts) > 1:
        paths = sorted(Path(p) for p in glob.glob(args.scenario))
    else:
        # bare names select bundled scenarios
        paths = sorted(SCENARIO_DIR.glob(f"{args.scenario}.json"))
    if not paths:
        raise ParseError(f"no scenario matches {args.scenario!r}")
    jobs = [(args, path, seed) for path in paths for seed in range(args.seed, args.seed + args.seeds)]
    logger.info(f"batch: {len(paths)} scenarios x {args.seeds} seeds")

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            records = list(tqdm(pool.map(_batch_child, jobs), total=len(jobs), desc="Batch", disable=None))
    else:
        records = [_batch_child(job) for job in tqdm(jobs, desc="Batch", disable=None)]

    out = Path(args.out)
    table = aggregate(records)
    artifacts.write_json(out / "aggregate.json", dict(runs=records, table=table))
    (out / "aggregate.txt").write_text(format_aggregate(table))
    crashed = sum(r["crashed"] for r in records)
    if crashed:
        logger.error(f"{crashed} batch runs crashed")
        return 1
    return 0


COMMANDS: tp.Dict[str, tp.Callable[[CliArguments], int]] = {
    "estimate": cmd_estimate,
    "generate": cmd_generate,
    "plan": cmd_plan,
    "run": cmd_run,
    "batch": cmd_batch,
}


def main(argv: tp.Optional[tp.Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        print(USAGE, file=sys.stderr)
        return 1
    command = argv[0]
    try:
        (args,) = HfArgumentParser(CliArguments).parse_args_into_dataclasses(args=argv[1:])
    except SystemExit:
        return 1
    except ValueError as e:
        print(e, file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 1
    try:
        configure_logging(args.verbosity)
    except ValueError as e:
        print(e, file=sys.stderr)
        return 1
    torch.set_num_threads(1)

    with with_default_dtype(DTYPE):
        try:
            return COMMANDS[command](args)
        except BagSOIError as e:
            logger.error(f"{type(e).__name__}: {e}")
            return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
