from pathlib import Path
import typing as tp

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .control import RunLog  # noqa: E402
from .estimation import RimState  # noqa: E402
from .planner import DeformationPath, ObstacleVolume  # noqa: E402

STYLE = {
    "savefig.bbox": "tight",
    "savefig.format": "svg",
    "font.size": 9,
    "axes.spines.right": False,
    "axes.spines.top": False,
}


def _closed(points) -> tp.Tuple[list, list, list]:
    pts = points.keypoints if isinstance(points, RimState) else points
    loop = list(pts.tolist()) + [pts[0].tolist()]
    return [p[0] for p in loop], [p[1] for p in loop], [p[2] for p in loop]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def _box_edges(obstacle: ObstacleVolume):
    lo, hi = obstacle.lower.tolist(), obstacle.upper.tolist()
    corners = [[(hi if (k >> d) & 1 else lo)[d] for d in range(3)] for k in range(8)]
    for a in range(8):
        for d in range(3):
            b = a | (1 << d)
            if b != a:
                yield corners[a], corners[b]


def _draw_obstacles(ax, obstacles: tp.Sequence[ObstacleVolume]):
    for obstacle in obstacles:
        if obstacle.kind == "box":
            for a, b in _box_edges(obstacle):
                ax.plot(*zip(a, b), color="black", linewidth=0.8)
        else:
            v = obstacle.vertices
            ax.scatter(v[:, 0], v[:, 1], v[:, 2], color="black", s=2)


def plot_estimate(cloud, estimate: RimState, projected: tp.Optional[RimState], path) -> Path:
    """Point cloud with the estimated keypoints and their stable projection."""
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(5, 4))
        ax = fig.add_subplot(projection="3d")
        ax.scatter(cloud[:, 0], cloud[:, 1], cloud[:, 2], s=1, color="0.6", label="cloud")
        ax.plot(*_closed(estimate), "o-", color="tab:blue", markersize=3, label="estimate")
        if projected is not None:
            ax.plot(*_closed(projected), "-", color="tab:red", label="stable projection")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.legend(loc="upper left")
        return _save(fig, path)


def plot_soi(vertices, x_dag: RimState, x_star: RimState, path) -> Path:
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(5, 4))
        ax = fig.add_subplot(projection="3d")
        ax.plot(*_closed(vertices), "s-", color="black", markersize=3, label="bottom vertices")
        ax.plot(*_closed(x_dag), "o-", color="tab:orange", markersize=3, label="bagging SOI")
        ax.plot(*_closed(x_star), "o-", color="tab:green", markersize=3, label="goal SOI")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.legend(loc="upper left")
        return _save(fig, path)


def plot_path(deformation: DeformationPath, obstacles: tp.Sequence[ObstacleVolume], path) -> Path:
    """Every node of the path, coloured by stage."""
    colors = {"pre-bagging": "tab:blue", "bagging": "tab:orange"}
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(5, 4))
        ax = fig.add_subplot(projection="3d")
        for i, rim in enumerate(deformation.nodes):
            ax.plot(*_closed(rim), color=colors[deformation.stage_of(i)], linewidth=0.7, alpha=0.8)
        _draw_obstacles(ax, obstacles)
        ax.plot(*_closed(deformation.handover), color="tab:red", linewidth=1.5, label="handover")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.legend(loc="upper left")
        return _save(fig, path)


def plot_error_trace(log: RunLog, path) -> Path:
    steps = [r.step for r in log]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, [r.err_tracking for r in log], label="subgoal error")
        ax.plot(steps, [r.chamfer_to_goal for r in log], label="Chamfer to goal")
        ax.set_xlabel("step")
        ax.set_ylabel("error [m]")
        ax.legend()
        return _save(fig, path)


def plot_rim_trajectory(log: RunLog, deformation: DeformationPath, path, every: int = 20) -> Path:
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(5, 4))
        ax = fig.add_subplot(projection="3d")
        records = log.records[::every] + log.records[-1:]
        for record in records:
            ax.plot(*_closed(record.x.reshape(-1, 3)), color="tab:blue", linewidth=0.6, alpha=0.6)
        ax.plot(*_closed(deformation.goal), color="tab:green", linewidth=1.5, label="goal SOI")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.legend(loc="upper left")
        return _save(fig, path)
