"""Stability region and optimality certificates from a dispatch-fraction table.

Everything here is computed from the table alone; simulation is used only as
cross-validation elsewhere.  The threshold h* is the minimum over permutations
and prefixes of (prefix service rate) / (prefix dispatch fraction); the chain
is positive recurrent below h* and, under a symmetry condition on the
minimizers, transient above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fvector import FTable

REL_TOL = 1e-9  # relative tolerance for minimizer membership and equality tests


@dataclass
class StabilityReport:
    h_star: float
    minimizers: list  # (eta tuple, m) pairs, m in 1..n
    throughput_optimal: bool
    throughput_witness: tuple | None
    transience_applicable: bool
    transience_vacuous: bool
    transient_above: float | None
    strict_majorization: bool
    majorization_witnesses: list
    total_rate: float

    def to_dict(self) -> dict:
        return {
            "h_star": self.h_star,
            "total_rate": self.total_rate,
            "minimizers": [[list(eta), m] for eta, m in self.minimizers],
            "throughput_optimal": self.throughput_optimal,
            "throughput_witness": (
                None
                if self.throughput_witness is None
                else [list(self.throughput_witness[0]), self.throughput_witness[1]]
            ),
            "transience_condition_applicable": self.transience_applicable,
            "transience_condition_vacuous": self.transience_vacuous,
            "transient_above": self.transient_above,
            "strict_majorization": self.strict_majorization,
            "majorization_witnesses": [
                [list(eta), m] for eta, m in self.majorization_witnesses
            ],
        }

    def to_text(self) -> str:
        lines = [
            f"h* = {self.h_star:.12g} (total service rate {self.total_rate:.12g})",
            f"stable for arrival rates < {self.h_star:.12g}; the boundary itself is inconclusive",
            ("throughput optimal" if self.throughput_optimal else "NOT throughput optimal"),
        ]
        if self.throughput_witness is not None:
            eta, m = self.throughput_witness
            lines.append(f"  violating prefix: eta={eta}, m={m}")
        if self.transience_applicable:
            note = " (vacuously: every minimizer uses the full prefix)" if self.transience_vacuous else ""
            lines.append(f"transient above {self.transient_above:.12g}{note}")
        else:
            lines.append("transience condition not applicable (asymmetric minimizers)")
        lines.append(
            "strict majorization holds"
            if self.strict_majorization
            else "strict majorization FAILS (equalities or reversals at some prefix)"
        )
        for eta, m in self.majorization_witnesses[:5]:
            lines.append(f"  non-strict prefix: eta={eta}, m={m}")
        lines.append(f"minimizer count: {len(self.minimizers)}")
        return "\n".join(lines)


def h_of(f_table: FTable, mu: np.ndarray, eta, m: int) -> float:
    """Prefix service rate over prefix dispatch fraction; +inf on a zero prefix."""
    mu = np.asarray(mu, dtype=float)
    if not 1 <= m <= f_table.n:
        raise ValueError("m must be in [1, n]")
    f, _ = f_table.get(eta)
    eta = list(eta)
    mu_prefix = float(np.cumsum(mu[eta])[m - 1])
    f_prefix = float(np.cumsum(f)[m - 1])
    if f_prefix <= 0.0:
        return math.inf
    return mu_prefix / f_prefix


def stability_region(f_table: FTable, mu: np.ndarray) -> tuple[float, list]:
    """h* and the set of minimizing (eta, m) pairs (relative tolerance 1e-9)."""
    mu = np.asarray(mu, dtype=float)
    values = []
    for eta in f_table.permutations():
        f, _ = f_table.get(eta)
        mu_prefix = np.cumsum(mu[list(eta)])
        f_prefix = np.cumsum(f)
        for m in range(1, f_table.n + 1):
            if f_prefix[m - 1] <= 0.0:
                continue
            values.append((float(mu_prefix[m - 1] / f_prefix[m - 1]), eta, m))
    h_star = min(v for v, _, _ in values)
    minimizers = [(eta, m) for v, eta, m in values if v <= h_star * (1 + REL_TOL)]
    return h_star, minimizers


def check_throughput_optimal(f_table: FTable, mu: np.ndarray):
    """True iff every prefix fraction is at most its service-rate share."""
    mu = np.asarray(mu, dtype=float)
    total = mu.sum()
    for eta in f_table.permutations():
        f, _ = f_table.get(eta)
        f_prefix = np.cumsum(f)
        share = np.cumsum(mu[list(eta)]) / total
        for m in range(1, f_table.n + 1):
            if f_prefix[m - 1] > share[m - 1] * (1 + REL_TOL) + REL_TOL:
                return False, (tuple(eta), m)
    return True, None


def check_transience_condition(f_table: FTable, mu: np.ndarray, minimizers=None):
    """Transience condition: at each minimizer, the prefix fraction depends only
    on the leading index *set*, not its internal order.

    Returns (applicable, transient_above, vacuous).  Monte-Carlo tables are
    rejected: equality testing on noisy estimates is meaningless.
    """
    if f_table.provenance == "monte_carlo":
        raise ValueError("transience check requires an exact (analytic or custom) table")
    mu = np.asarray(mu, dtype=float)
    if minimizers is None:
        h_star, minimizers = stability_region(f_table, mu)
    else:
        h_star, _ = stability_region(f_table, mu)
    perms = list(f_table.permutations())
    vacuous = all(m == f_table.n for _, m in minimizers)
    for eta_dag, m_dag in minimizers:
        if m_dag == f_table.n:
            continue  # only one leading set of size n: condition holds vacuously
        lead = frozenset(eta_dag[:m_dag])
        f_dag, _ = f_table.get(eta_dag)
        ref = float(np.cumsum(f_dag)[m_dag - 1])
        for eta in perms:
            if frozenset(eta[:m_dag]) != lead:
                continue
            f, _ = f_table.get(eta)
            val = float(np.cumsum(f)[m_dag - 1])
            if abs(val - ref) > REL_TOL * max(1.0, abs(ref)):
                return False, None, False
    return True, h_star, vacuous


def check_strict_majorization(f_table: FTable, mu: np.ndarray):
    """Strict inequality prefix-f < prefix-mu-share for every proper prefix."""
    mu = np.asarray(mu, dtype=float)
    total = mu.sum()
    witnesses = []
    for eta in f_table.permutations():
        f, _ = f_table.get(eta)
        f_prefix = np.cumsum(f)
        share = np.cumsum(mu[list(eta)]) / total
        for m in range(1, f_table.n):
            if f_prefix[m - 1] >= share[m - 1] - REL_TOL * max(1.0, share[m - 1]):
                witnesses.append((tuple(eta), m))
    return len(witnesses) == 0, witnesses


@dataclass
class MinimizerStructureReport:
    applicable: bool
    checks: list = field(default_factory=list)  # (eta, m_star, left_ok, right_ok)

    @property
    def violations(self) -> int:
        return sum(1 for _, _, lo, ro in self.checks if not (lo and ro))


def minimizer_structure_diagnostics(f_table: FTable, mu: np.ndarray) -> MinimizerStructureReport:
    """Self-consistency of the minimizer structure when h* is strictly below
    the total service rate: at each minimizing permutation's largest minimizing
    prefix m*, the single-term ratio at m* is at most h*, and every suffix
    ratio beyond m* is strictly above h*."""
    mu = np.asarray(mu, dtype=float)
    h_star, minimizers = stability_region(f_table, mu)
    if h_star >= mu.sum() * (1 - REL_TOL):
        return MinimizerStructureReport(applicable=False)
    by_eta: dict = {}
    for eta, m in minimizers:
        by_eta[tuple(eta)] = max(by_eta.get(tuple(eta), 0), m)
    report = MinimizerStructureReport(applicable=True)
    tol = REL_TOL * max(1.0, h_star)
    for eta, m_star in by_eta.items():
        f, _ = f_table.get(eta)
        mu_eta = mu[list(eta)]
        h_at = h_of(f_table, mu, eta, m_star)
        left_ok = f[m_star - 1] > 0 and (mu_eta[m_star - 1] / f[m_star - 1]) <= h_at + tol
        right_ok = True
        for k in range(m_star + 1, f_table.n + 1):
            f_suffix = float(np.sum(f[m_star:k]))
            suffix_ratio = (
                math.inf if f_suffix <= 0 else float(np.sum(mu_eta[m_star:k])) / f_suffix
            )
            if suffix_ratio <= h_at + tol:
                right_ok = False
        report.checks.append((eta, m_star, left_ok, right_ok))
    return report


def analyze(f_table: FTable, mu: np.ndarray) -> StabilityReport:
    """All verdicts in one report."""
    mu = np.asarray(mu, dtype=float)
    h_star, minimizers = stability_region(f_table, mu)
    optimal, witness = check_throughput_optimal(f_table, mu)
    try:
        applicable, above, vacuous = check_transience_condition(f_table, mu, minimizers)
    except ValueError:
        applicable, above, vacuous = False, None, False
    strict, maj_witnesses = check_strict_majorization(f_table, mu)
    return StabilityReport(
        h_star=h_star,
        minimizers=minimizers,
        throughput_optimal=optimal,
        throughput_witness=witness,
        transience_applicable=applicable,
        transience_vacuous=vacuous,
        transient_above=above,
        strict_majorization=strict,
        majorization_witnesses=maj_witnesses,
        total_rate=float(mu.sum()),
    )
