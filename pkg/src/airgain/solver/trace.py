"""Solve traces: per-iteration progress rows, CSV-exportable."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    alpha: float
    max_residual: float
    inner_iters: int
    kkt_residual: float


@dataclass
class SolveTrace:
    """Progress log of a solve.

    The objective column is nondecreasing across accepted iterations (within
    1e-8); `notes` records solve-wide conventions, in particular that the
    transmit second moment X is frozen at the previous iterate's sensing power
    (lagged) and refreshed only between outer iterations.
    """

    rows: list = field(default_factory=list)
    diverged: bool = False
    route: str = "dual"
    notes: dict = field(default_factory=dict)

    def append(self, iteration: int, alpha: float, max_residual: float,
               inner_iters: int, kkt_residual: float) -> None:
        self.rows.append(TraceRow(iteration=int(iteration), alpha=float(alpha),
                                  max_residual=float(max_residual),
                                  inner_iters=int(inner_iters),
                                  kkt_residual=float(kkt_residual)))

    @property
    def alphas(self):
        return [r.alpha for r in self.rows]

    def is_monotone(self, tol: float = 1e-8) -> bool:
        a = self.alphas
        return all(a[i + 1] >= a[i] - tol * (1 + abs(a[i])) for i in range(len(a) - 1))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "alpha", "max_residual", "inner_iters",
                        "kkt_residual"])
            for r in self.rows:
                w.writerow([r.iteration, repr(r.alpha), repr(r.max_residual),
                            r.inner_iters, repr(r.kkt_residual)])
