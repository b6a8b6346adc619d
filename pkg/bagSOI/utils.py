import logging as _std_logging
from contextlib import contextmanager
import typing as tp

import numpy as np
import torch
from transformers.utils import logging

""" utility functions: nested config documents, dtype scoping, logging and seeding """


DTYPE = torch.float64


def get_logger(name: str):
    return logging.get_logger(name)


def configure_logging(verbosity: str = "info") -> None:
    level = getattr(_std_logging, verbosity.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Unknown verbosity {verbosity!r}")
    _std_logging.basicConfig(
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        level=level,
    )
    _std_logging.getLogger("bagSOI").setLevel(level)


def nested_set(t: dict, dotted_key: str, value, create: bool = False) -> dict:
    """
    Set a leaf addressed by a dotted key, in place.
    :param create: allow creating missing sections / leaves
    :returns: the same dict, for chaining
    """
    parts = dotted_key.split(".")
    node = t
    for part in parts[:-1]:
        if part not in node:
            if not create:
                raise KeyError(dotted_key)
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise KeyError(dotted_key)
    if parts[-1] not in node and not create:
        raise KeyError(dotted_key)
    node[parts[-1]] = value
    return t


def as_points(x, dim: int = 3) -> torch.Tensor:
    """Coerce array-likes to a contiguous float64 (N, dim) tensor."""
    pts = torch.as_tensor(x, dtype=DTYPE)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    assert pts.ndim == 2 and pts.shape[1] == dim, f"expected (N, {dim}) points, got {tuple(pts.shape)}"
    return pts.contiguous()


def spawn_seeds(seed: int, count: int) -> tp.List[int]:
    """Derive `count` independent integer seeds from one run seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


@contextmanager
def with_default_dtype(dtype):
    _dtype_original = torch.get_default_dtype()

    try:
        torch.set_default_dtype(dtype)
        yield
    finally:
        torch.set_default_dtype(_dtype_original)
