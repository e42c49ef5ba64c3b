"""Time-discrete trajectories with their per-step ledger.

Both flows share one layout so the exported CSVs are diff-comparable:
columns n, t, energy, distance, rate, slope, iters, detmin.  The piecewise
constant interpolant convention is U(t) = U_n for t in ((n-1)*tau, n*tau],
with U(0) = U_0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .grid import Field

LEDGER_COLUMNS = ("n", "t", "energy", "distance", "rate", "slope", "iters", "detmin")


@dataclass(frozen=True)
class LedgerEntry:
    n: int
    t: float
    energy: float
    distance: float
    rate: float
    slope: float
    iters: int
    detmin: float

    def row(self):
        return (self.n, self.t, self.energy, self.distance, self.rate,
                self.slope, self.iters, self.detmin)


@dataclass(eq=False)
class Trajectory:
    """Ordered states U_0..U_N of one minimizing-movement run."""

    tau: float
    fields: list[Field] = field(default_factory=list)
    ledger: list[LedgerEntry] = field(default_factory=list)
    completed: bool = True

    @property
    def steps(self) -> int:
        return len(self.fields) - 1

    def state(self, t: float) -> Field:
        """Piecewise-constant interpolant at time t."""
        if t < 0.0:
            raise ValueError("t must be nonnegative")
        n = 0 if t == 0.0 else int(math.ceil(t / self.tau - 1e-9))
        n = min(max(n, 0), self.steps)
        return self.fields[n]

    def energies(self):
        return [e.energy for e in self.ledger]

    def energy_identity_residual(self) -> float:
        """|(1/2) sum tau*rate^2 + (1/2) sum tau*slope^2 + phi(U_N) - phi(U_0)|."""
        acc = 0.0
        for e in self.ledger[1:]:
            acc += 0.5 * self.tau * (e.rate**2 + e.slope**2)
        return abs(acc + self.ledger[-1].energy - self.ledger[0].energy)

    def dissipated(self) -> float:
        """(1/2) sum tau * rate^2 (discrete metric-derivative part)."""
        return sum(0.5 * self.tau * e.rate**2 for e in self.ledger[1:])
