"""Per-layer parameter statistics.

Each recording produces one row per (layer, group) holding the mean and
population variance of that group's scalars, where the groups are
convolution weights, batch-norm weights, and biases (batch norm and
convolution biases pooled).  Statistics are computed in float64, so a row
recomputed from a checkpoint of the same iteration matches exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError

GROUP_OF_KIND = {
    "conv_weight": "conv_weight",
    "bn_weight": "bn_weight",
    "bn_bias": "bias",
    "conv_bias": "bias",
}

STATS_HEADER = ["run_id", "iter", "layer_name", "group", "mean", "variance"]


@dataclass
class StatsRow:
    run_id: str
    iteration: int
    layer_name: str
    group: str
    mean: float
    variance: float

    def key(self):
        return (self.run_id, self.iteration, self.layer_name, self.group)


def _layer_of(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0]


def record_layer_stats(model, iteration: int, run_id: str = "run") -> list[StatsRow]:
    rows = []
    for name, p in model.named_parameters():
        group = GROUP_OF_KIND.get(p.kind)
        if group is None:
            continue
        vals = p.data.astype(np.float64)
        rows.append(StatsRow(run_id, iteration, _layer_of(name), group,
                             float(vals.mean()), float(vals.var())))
    return rows


def stats_from_arrays(named_arrays: dict[str, np.ndarray], kinds: dict[str, str],
                      iteration: int, run_id: str = "run") -> list[StatsRow]:
    """Same rows as :func:`record_layer_stats`, from raw checkpoint arrays."""
    rows = []
    for name, kind in kinds.items():
        group = GROUP_OF_KIND.get(kind)
        if group is None or name not in named_arrays:
            continue
        vals = named_arrays[name].astype(np.float64)
        rows.append(StatsRow(run_id, iteration, _layer_of(name), group,
                             float(vals.mean()), float(vals.var())))
    return rows


def write_stats_csv(rows: list[StatsRow], path, append: bool = False):
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(STATS_HEADER)
        for r in rows:
            writer.writerow([r.run_id, r.iteration, r.layer_name, r.group,
                             repr(r.mean), repr(r.variance)])


def read_stats_csv(path) -> list[StatsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != STATS_HEADER:
            raise DataError(f"bad stats header in {path}: {header}")
        return [StatsRow(rid, int(it), layer, group, float(mean), float(var))
                for rid, it, layer, group, mean, var in reader]
