"""
Artifact files written by the command line and their loaders.

Tables are comma-separated with one header row and full float precision (%.17g), so
every file reloads to the exact tensors that were written. Summaries are JSON.
"""
import json
from pathlib import Path
import typing as tp

import numpy as np
import torch

from .control import POSE_DIM, RunLog, StepRecord
from .estimation import RimState
from .planner import DeformationPath
from .utils import DTYPE, as_points

FLOAT_FORMAT = "%.17g"
POINT_HEADER = ["x", "y", "z"]
STAGE_CODES = {"pre-bagging": 0, "bagging": 1}


def _write_table(path, header: tp.Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
    np.savetxt(path, rows, fmt=FLOAT_FORMAT, delimiter=",", header=",".join(header), comments="")
    return path


def _read_table(path, expected_header: tp.Optional[tp.Sequence[str]] = None) -> tp.Tuple[tp.List[str], np.ndarray]:
    path = Path(path)
    with path.open() as f:
        header = f.readline().strip().split(",")
    if expected_header is not None and header != list(expected_header):
        raise ValueError(f"{path}: unexpected header {header[:6]}...")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    return header, rows.reshape(-1, len(header))


def write_points(path, points) -> Path:
    return _write_table(path, POINT_HEADER, as_points(points).numpy())


def read_points(path) -> torch.Tensor:
    _, rows = _read_table(path, POINT_HEADER)
    return torch.from_numpy(rows).to(DTYPE)


def write_rim(path, rim: RimState) -> Path:
    return write_points(path, rim.keypoints)


def read_rim(path) -> RimState:
    return RimState(read_points(path))


def path_header(n_x: int) -> tp.List[str]:
    return ["node", "stage"] + [f"x_{i}" for i in range(1, 3 * n_x + 1)]


def write_path(path, deformation: DeformationPath) -> Path:
    """One record per node; stage is 0 for pre-bagging nodes (handover included) and 1 after."""
    rows = [
        [i, STAGE_CODES[deformation.stage_of(i)], *rim.flat.tolist()] for i, rim in enumerate(deformation.nodes)
    ]
    return _write_table(path, path_header(deformation.start.n_x), rows)


def read_path(path) -> DeformationPath:
    header, rows = _read_table(path)
    n_x = (len(header) - 2) // 3
    if header != path_header(n_x):
        raise ValueError(f"{path}: not a deformation path table")
    nodes = [RimState.from_flat(torch.from_numpy(row[2:].copy())) for row in rows]
    pre = np.flatnonzero(rows[:, 1] == STAGE_CODES["pre-bagging"])
    return DeformationPath(nodes, int(pre[-1]) if len(pre) else 0)


def write_runlog(path, log: RunLog) -> Path:
    return _write_table(path, log.header(), log.to_rows())


def read_runlog(path) -> RunLog:
    header, rows = _read_table(path)
    n_x = (len(header) - 4 - POSE_DIM) // 3
    log = RunLog(n_x)
    if header != log.header():
        raise ValueError(f"{path}: not a run log table")
    for row in rows:
        log.append(
            StepRecord(
                step=int(row[0]),
                subgoal_index=int(row[1]),
                err_tracking=float(row[2]),
                chamfer_to_goal=float(row[3]),
                u=torch.from_numpy(row[4 : 4 + POSE_DIM].copy()),
                x=torch.from_numpy(row[4 + POSE_DIM :].copy()),
            )
        )
    return log


def write_json(path, payload: tp.Dict[str, tp.Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    return path


def read_json(path) -> tp.Dict[str, tp.Any]:
    with Path(path).open() as f:
        return json.load(f)
