"""Dispatch-fraction tables: per-permutation mean and variance of the fraction
of slots per cycle sent to the l-th longest scaled queue.

Analytic values exist for the built-in policies; arbitrary policies are
estimated by Monte-Carlo cycle simulation with the permutation pinned.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .policy import BUILTIN_KINDS, PolicySpec, plan_cycles

ENUMERATION_CAP = 8
ROW_SUM_TOL = 1e-9


class CapacityError(ValueError):
    """Full permutation enumeration requested beyond the supported server count."""


@dataclass
class FTable:
    """Map from permutation (tuple of server indices, longest first) to
    (dispatch-fraction vector, fraction-variance vector)."""

    n: int
    entries: dict
    provenance: str = "analytic"  # or "monte_carlo"
    symmetric: bool = False  # same (f, tau_sq) for every permutation
    monte_carlo_cycles: int = 0
    std_errors: dict = field(default_factory=dict)

    def get(self, eta) -> tuple[np.ndarray, np.ndarray]:
        eta = tuple(int(i) for i in eta)
        if self.symmetric:
            return next(iter(self.entries.values()))
        return self.entries[eta]

    def permutations(self):
        if self.n > ENUMERATION_CAP:
            raise CapacityError(f"n={self.n} exceeds the enumeration cap {ENUMERATION_CAP}")
        return itertools.permutations(range(self.n))

    def validate(self) -> None:
        for eta, (f, tau_sq) in self.entries.items():
            if sorted(eta) != list(range(self.n)):
                raise ValueError(f"{eta} is not a permutation of 0..{self.n - 1}")
            if len(f) != self.n or len(tau_sq) != self.n:
                raise ValueError("f and tau_sq rows must have length n")
            slack = 0.0
            if self.provenance == "monte_carlo":
                se = self.std_errors.get(tuple(eta))
                slack = 4.0 * float(np.sum(se)) if se is not None else 1e-2
            if abs(float(np.sum(f)) - 1.0) > ROW_SUM_TOL + slack:
                raise ValueError(f"fractions for {eta} do not sum to 1")
            if np.any(f < -ROW_SUM_TOL) or np.any(f > 1 + ROW_SUM_TOL):
                raise ValueError(f"fractions for {eta} outside [0, 1]")
            tau_cap = 0.25 + ROW_SUM_TOL
            if self.provenance == "monte_carlo":
                # sample variance may overshoot the population cap of 1/4
                tau_cap += 1.0 / math.sqrt(max(self.monte_carlo_cycles, 1))
            if np.any(tau_sq < -ROW_SUM_TOL) or np.any(tau_sq > tau_cap):
                raise ValueError(f"fraction variances for {eta} outside [0, 1/4]")


def pod_fractions(n: int, d: int) -> np.ndarray:
    # P(the l-th longest is targeted) = C(l-1, d-1) / C(n, d), l = 1..n.
    denom = math.comb(n, d)
    return np.array([math.comb(l - 1, d - 1) / denom for l in range(1, n + 1)])


def f_analytic(spec: PolicySpec, mu: np.ndarray) -> FTable:
    """Dispatch-fraction table for a built-in policy, in closed form.

    The fraction variances follow from the decision rules: deterministic rules
    (round_robin, jsq, jsed) have zero variance; per-slot i.i.d. rules (rand,
    weighted_rand, pod) make T * N(l)/T binomial, so tau^2 = p(1-p)/T.
    """
    mu = np.asarray(mu, dtype=float)
    n = len(mu)
    spec.validate_for(n)
    t = spec.t_cycle
    if spec.kind not in BUILTIN_KINDS:
        raise ValueError("analytic fractions exist only for built-in policies")
    if spec.kind == "weighted_rand":
        entries = {}
        for eta in itertools.permutations(range(n)):
            f = mu[list(eta)] / mu.sum()
            entries[eta] = (f, f * (1.0 - f) / t)
        return FTable(n, entries, "analytic", symmetric=False)
    if spec.kind == "rand":
        f = np.full(n, 1.0 / n)
        tau_sq = f * (1.0 - f) / t
    elif spec.kind == "round_robin":
        f = np.full(n, 1.0 / n)
        tau_sq = np.zeros(n)
    elif spec.kind in ("jsq", "jsed"):
        f = np.zeros(n)
        f[-1] = 1.0
        tau_sq = np.zeros(n)
    elif spec.kind == "pod":
        f = pod_fractions(n, spec.d)
        tau_sq = f * (1.0 - f) / t
    eta0 = tuple(range(n))
    return FTable(n, {eta0: (f, tau_sq)}, "analytic", symmetric=True)


def f_monte_carlo(
    spec: PolicySpec,
    mu: np.ndarray,
    eta,
    cycles: int,
    rng: np.random.Generator,
):
    """Estimate (f, tau_sq) for one pinned permutation by simulating cycles.

    Returns (f, tau_sq, std_errors) where std_errors are standard errors of
    the mean fraction estimates.
    """
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    mu = np.asarray(mu, dtype=float)
    n = len(mu)
    eta = np.asarray(eta, dtype=np.int64)
    t = spec.t_cycle
    inv_eta = np.empty(n, dtype=np.int64)
    inv_eta[eta] = np.arange(n)
    targets = plan_cycles(spec, eta, mu, rng, count=cycles)
    positions = inv_eta[targets]  # (cycles, T), values in 0..n-1
    counts = np.zeros((cycles, n), dtype=np.int64)
    rows = np.repeat(np.arange(cycles), t)
    np.add.at(counts, (rows, positions.ravel()), 1)
    frac = counts / t
    f = frac.mean(axis=0)
    tau_sq = frac.var(axis=0, ddof=1) if cycles > 1 else np.zeros(n)
    # constant columns (deterministic rules) are exactly zero-variance
    tau_sq[counts.min(axis=0) == counts.max(axis=0)] = 0.0
    se = np.sqrt(tau_sq / cycles)
    return f, tau_sq, se


def build_ftable(
    spec: PolicySpec,
    mu: np.ndarray,
    mode: str = "analytic",
    cycles: int = 100_000,
    rng: np.random.Generator | None = None,
) -> FTable:
    """Full table over all permutations, analytic when available."""
    mu = np.asarray(mu, dtype=float)
    n = len(mu)
    if n > ENUMERATION_CAP:
        raise CapacityError(f"n={n} exceeds the enumeration cap {ENUMERATION_CAP}")
    spec.validate_for(n)
    if mode == "analytic":
        return f_analytic(spec, mu)
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    entries, errors = {}, {}
    for eta in itertools.permutations(range(n)):
        f, tau_sq, se = f_monte_carlo(spec, mu, eta, cycles, rng)
        entries[eta] = (f, tau_sq)
        errors[eta] = se
    table = FTable(n, entries, "monte_carlo", monte_carlo_cycles=cycles, std_errors=errors)
    table.validate()
    return table


def batch_arrival_moments(
    f_l: float, tau_sq_l: float, t_cycle: int, arrival_mean: float, arrival_var: float
) -> tuple[float, float]:
    """Mean and variance of the jobs sent to one sort position over a cycle."""
    mean = t_cycle * arrival_mean * f_l
    var = t_cycle * f_l * arrival_var + t_cycle**2 * arrival_mean**2 * tau_sq_l
    return mean, var


def write_ftable(table: FTable, path) -> None:
    """Text format: three lines per permutation (indices, f row, tau_sq row)."""
    lines = [
        f"# n: {table.n}",
        f"# provenance: {table.provenance}",
        f"# symmetric: {'true' if table.symmetric else 'false'}",
    ]
    if table.provenance == "monte_carlo":
        lines.append(f"# cycles: {table.monte_carlo_cycles}")
    for eta, (f, tau_sq) in sorted(table.entries.items()):
        lines.append(" ".join(str(i) for i in eta))
        lines.append(" ".join(repr(float(x)) for x in f))
        lines.append(" ".join(repr(float(x)) for x in tau_sq))
        se = table.std_errors.get(tuple(eta))
        if se is not None:
            lines.append("# se " + " ".join(repr(float(x)) for x in se))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ftable(path) -> FTable:
    n = None
    provenance = "analytic"
    symmetric = False
    cycles = 0
    entries, errors = {}, {}
    record: list[str] = []
    last_eta = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("n:"):
                    n = int(body.split(":", 1)[1])
                elif body.startswith("provenance:"):
                    provenance = body.split(":", 1)[1].strip()
                elif body.startswith("symmetric:"):
                    symmetric = body.split(":", 1)[1].strip() == "true"
                elif body.startswith("cycles:"):
                    cycles = int(body.split(":", 1)[1])
                elif body.startswith("se ") and last_eta is not None:
                    errors[last_eta] = np.array([float(x) for x in body[3:].split()])
                continue
            record.append(line)
            if len(record) == 3:
                eta = tuple(int(i) for i in record[0].split())
                f = np.array([float(x) for x in record[1].split()])
                tau_sq = np.array([float(x) for x in record[2].split()])
                entries[eta] = (f, tau_sq)
                last_eta = eta
                record = []
    if n is None or record:
        raise ValueError(f"malformed f-table file {path}")
    table = FTable(n, entries, provenance, symmetric, cycles, errors)
    table.validate()
    return table
