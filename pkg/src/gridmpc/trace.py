"""Per-iteration solver records and their CSV form."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("iter", "cost", "primal_infeas", "consensus_resid", "dual_value", "dist_to_ref")


def fmt(value: float) -> str:
    """17 significant digits; enough to round-trip any double."""
    return format(float(value), ".17g")


@dataclass
class SolveTrace:
    """Columns of per-iteration records.

    ``consensus_resid`` is NaN for dual ascent and ``dual_value`` is NaN
    for ADMM; ``dist_to_ref`` is ``max|x - x_ref|`` or NaN without a
    reference.
    """

    iters: list[int] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)
    primal_infeas: list[float] = field(default_factory=list)
    consensus_resid: list[float] = field(default_factory=list)
    dual_value: list[float] = field(default_factory=list)
    dist_to_ref: list[float] = field(default_factory=list)

    def append(self, it, cost, primal_infeas, consensus_resid=math.nan, dual_value=math.nan, dist=math.nan):
        self.iters.append(int(it))
        self.cost.append(float(cost))
        self.primal_infeas.append(float(primal_infeas))
        self.consensus_resid.append(float(consensus_resid))
        self.dual_value.append(float(dual_value))
        self.dist_to_ref.append(float(dist))

    def __len__(self) -> int:
        return len(self.iters)

    def column(self, name: str) -> np.ndarray:
        attr = "iters" if name == "iter" else name
        return np.asarray(getattr(self, attr), dtype=float)

    def first_below(self, name: str, threshold: float) -> int | None:
        """Iteration number of the first record with ``name <= threshold``."""
        col = self.column(name)
        hits = np.flatnonzero(col <= threshold)
        return self.iters[hits[0]] if hits.size else None

    def write_csv(self, path: str | Path, with_reference: bool | None = None) -> None:
        if with_reference is None:
            with_reference = any(not math.isnan(d) for d in self.dist_to_ref)
        cols = COLUMNS if with_reference else COLUMNS[:-1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in zip(self.iters, self.cost, self.primal_infeas, self.consensus_resid, self.dual_value, self.dist_to_ref):
                writer.writerow([row[0]] + [fmt(v) for v in row[1 : len(cols)]])


def read_csv(path: str | Path) -> SolveTrace:
    trace = SolveTrace()
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            trace.append(
                int(rec["iter"]),
                float(rec["cost"]),
                float(rec["primal_infeas"]),
                float(rec["consensus_resid"]),
                float(rec["dual_value"]),
                float(rec.get("dist_to_ref", "nan")),
            )
    return trace
