"""Discrete-time queue dynamics: arrivals, potential services, dispatch, unused service.

All queue arithmetic is exact 64-bit integer arithmetic.  A single slot applies

    q' = max(q + a * z - s, 0)        componentwise
    u  = q' - (q + a * z - s)         the wasted service on empty queues

so that q' >= 0, 0 <= u <= s, and <q', u> = 0 hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Queue lengths above this trigger a hard error instead of silent wraparound.
OVERFLOW_GUARD = 2**62

# Purpose tags for RNG stream derivation.  One counter-based stream per
# (purpose, replication) keeps arrivals, services, sorting ties and policy
# decisions mutually independent.
STREAM_ARRIVAL = 0
STREAM_SERVICE = 1
STREAM_SORT = 2
STREAM_DECISION = 3

PMF_TOL = 1e-12


class OverflowGuardError(RuntimeError):
    """A queue length exceeded the 64-bit guard (usually signals instability)."""


class MomentMatchError(ValueError):
    """No arrival law with integer support matches the requested moments."""


def make_stream(seed: int, purpose: int, replication: int = 0) -> np.random.Generator:
    """Counter-based RNG stream keyed by (seed, purpose, replication)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(purpose, replication))
    return np.random.Generator(np.random.Philox(ss))


def _check_pmf(values: np.ndarray, probs: np.ndarray) -> None:
    if len(values) != len(probs) or len(values) == 0:
        raise ValueError("pmf needs matching, nonempty value/probability lists")
    if np.any(values < 0) or np.any(values != np.floor(values)):
        raise ValueError("pmf support must be nonnegative integers")
    if np.any(probs < -PMF_TOL) or abs(float(probs.sum()) - 1.0) > PMF_TOL:
        raise ValueError("pmf probabilities must be nonnegative and sum to 1")
    if len(np.unique(values)) != len(values):
        raise ValueError("pmf support values must be distinct")


@dataclass(frozen=True)
class ArrivalLaw:
    """I.i.d. batch-arrival law with integer support.

    ``kind`` is one of deterministic / two_point / binomial / pmf; the last is
    an explicit finite pmf used when exact moment matching needs three atoms.
    """

    kind: str
    values: np.ndarray  # sorted integer support
    probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=float)
        _check_pmf(values, probs)
        order = np.argsort(values)
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "probs", probs[order])

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(np.dot((self.values - m) ** 2, self.probs))

    @property
    def a_max_total(self) -> int:
        return int(self.values[-1])

    @property
    def cum_probs(self) -> np.ndarray:
        return np.cumsum(self.probs)

    @staticmethod
    def deterministic(value: int) -> "ArrivalLaw":
        return ArrivalLaw("deterministic", np.array([value]), np.array([1.0]))

    @staticmethod
    def two_point(lo: int, hi: int, p_hi: float) -> "ArrivalLaw":
        if not 0.0 <= p_hi <= 1.0:
            raise ValueError("p_hi must be in [0, 1]")
        return ArrivalLaw("two_point", np.array([lo, hi]), np.array([1.0 - p_hi, p_hi]))

    @staticmethod
    def binomial(m: int, p: float) -> "ArrivalLaw":
        from scipy.stats import binom

        values = np.arange(m + 1)
        return ArrivalLaw("binomial", values, binom.pmf(values, m, p))

    @staticmethod
    def from_pmf(pairs) -> "ArrivalLaw":
        values = np.array([v for v, _ in pairs])
        probs = np.array([p for _, p in pairs])
        return ArrivalLaw("pmf", values, probs)

    def sample(self, rng: np.random.Generator, size=None):
        idx = np.searchsorted(self.cum_probs, rng.random(size), side="right")
        idx = np.minimum(idx, len(self.values) - 1)
        return self.values[idx]


def two_point_for_moments(mean: float, variance: float, a_max_total: int) -> ArrivalLaw:
    """Integer-support arrival law with exactly the requested mean and variance.

    Solve order: degenerate point mass; then a two-atom law {lo, hi} with
    p_hi = (mean - lo)/(hi - lo), which matches the variance iff
    (hi - mean)(mean - lo) = variance for integers lo, hi; when no such integer
    pair exists the moments are hit exactly with three atoms {lo, c, hi}
    (c adjacent to the mean) by solving the 3x3 moment system for the
    probabilities.
    """
    if variance < 0:
        raise MomentMatchError("variance must be nonnegative")
    if mean < 0 or mean > a_max_total:
        raise MomentMatchError("mean outside [0, a_max_total]")
    if variance < PMF_TOL:
        if abs(mean - round(mean)) > 1e-9:
            raise MomentMatchError("zero variance requires an integer mean")
        return ArrivalLaw.deterministic(int(round(mean)))

    # Exact two-atom solution: hi integer above the mean, lo = mean - var/(hi - mean).
    for hi in range(int(math.floor(mean)) + 1, a_max_total + 1):
        lo_f = mean - variance / (hi - mean)
        lo = round(lo_f)
        if abs(lo_f - lo) < 1e-9 and 0 <= lo < mean:
            p_hi = (mean - lo) / (hi - lo)
            return ArrivalLaw.two_point(int(lo), hi, p_hi)

    # Three-atom fallback: atoms {lo, c, hi}, probabilities from the moment system.
    s = variance + mean * mean
    for hi in range(int(math.floor(mean)) + 1, a_max_total + 1):
        for c in sorted({int(math.floor(mean)), int(math.ceil(mean))}, reverse=True):
            if not c < hi:
                continue
            for lo in range(c - 1, -1, -1):
                atoms = np.array([lo, c, hi], dtype=float)
                vand = np.vstack([np.ones(3), atoms, atoms**2])
                probs = np.linalg.solve(vand, np.array([1.0, mean, s]))
                if np.all(probs >= -PMF_TOL):
                    probs = np.clip(probs, 0.0, 1.0)
                    probs /= probs.sum()
                    return ArrivalLaw.from_pmf(list(zip([lo, c, hi], probs)))
    raise MomentMatchError(
        f"no integer-support law with mean={mean}, variance={variance} "
        f"within [0, {a_max_total}]"
    )


@dataclass(frozen=True)
class ServiceLaw:
    """Per-server potential-service pmf with support in {0, ..., s_max}."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=float)
        _check_pmf(values, probs)
        order = np.argsort(values)
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "probs", probs[order])

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(np.dot((self.values - m) ** 2, self.probs))

    @property
    def cum_probs(self) -> np.ndarray:
        return np.cumsum(self.probs)

    @staticmethod
    def bernoulli_batch(mu: float, s_max: int) -> "ServiceLaw":
        # S in {0, s_max} with P(S = s_max) = mu / s_max: exact mean mu.
        p = mu / s_max
        if not 0.0 < p <= 1.0:
            raise ValueError(f"service rate {mu} not representable with s_max={s_max}")
        return ServiceLaw(np.array([0, s_max]), np.array([1.0 - p, p]))


@dataclass(frozen=True)
class SystemConfig:
    """Server count, service laws, arrival law and the top-level seed.

    Service rates must be sorted nondecreasing (the loader sorts raw configs
    and records the original index map).
    """

    n: int
    mu: np.ndarray
    s_max: int
    arrival: ArrivalLaw
    seed: int
    service_laws: tuple = ()
    index_map: tuple = ()  # original position of each (sorted) server

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        object.__setattr__(self, "mu", mu)
        if self.n < 1 or len(mu) != self.n:
            raise ValueError("mu must have length n >= 1")
        if np.any(mu <= 0):
            raise ValueError("service rates must be positive")
        if np.any(np.diff(mu) < 0):
            raise ValueError("mu must be sorted nondecreasing")
        if self.s_max < 1:
            raise ValueError("s_max must be a positive integer")
        laws = self.service_laws
        if not laws:
            laws = tuple(ServiceLaw.bernoulli_batch(m, self.s_max) for m in mu)
            object.__setattr__(self, "service_laws", laws)
        if len(laws) != self.n:
            raise ValueError("need one service law per server")
        for law, m in zip(laws, mu):
            if abs(law.mean - m) > 1e-9:
                raise ValueError("service pmf mean does not match mu")
            if law.values[-1] > self.s_max:
                raise ValueError("service pmf support exceeds s_max")
        if not self.index_map:
            object.__setattr__(self, "index_map", tuple(range(self.n)))

    @property
    def sigma_sq_service(self) -> np.ndarray:
        return np.array([law.variance for law in self.service_laws])

    @property
    def total_rate(self) -> float:
        return float(self.mu.sum())


@dataclass
class QueueState:
    q: np.ndarray
    slot: int = 0
    cycle_phase: int = 0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int64)
        if np.any(self.q < 0):
            raise ValueError("queue lengths must be nonnegative")


@dataclass(frozen=True)
class SlotOutcome:
    arrivals: int
    dispatch: np.ndarray  # one-hot over servers
    services: np.ndarray
    unused: np.ndarray


def advance(q: np.ndarray, arrivals: int, target: int, services: np.ndarray):
    """One slot of queue arithmetic; returns (new_q, unused)."""
    tmp = q.astype(np.int64).copy()
    tmp[target] += arrivals
    tmp -= services
    new_q = np.maximum(tmp, 0)
    unused = new_q - tmp
    if np.any(new_q > OVERFLOW_GUARD):
        raise OverflowGuardError("queue length exceeded the 64-bit guard")
    return new_q, unused


def step_slot(
    config: SystemConfig,
    state: QueueState,
    target: int,
    arrival_rng: np.random.Generator,
    service_rng: np.random.Generator,
    t_cycle: int = 1,
) -> tuple[QueueState, SlotOutcome]:
    """Sample one slot and apply the queue update."""
    arrivals = int(config.arrival.sample(arrival_rng))
    u = service_rng.random(config.n)
    services = np.empty(config.n, dtype=np.int64)
    for l, law in enumerate(config.service_laws):
        idx = min(np.searchsorted(law.cum_probs, u[l], side="right"), len(law.values) - 1)
        services[l] = law.values[idx]
    new_q, unused = advance(state.q, arrivals, target, services)
    dispatch = np.zeros(config.n, dtype=np.int64)
    dispatch[target] = 1
    new_state = QueueState(new_q, state.slot + 1, (state.cycle_phase + 1) % t_cycle)
    return new_state, SlotOutcome(arrivals, dispatch, services, unused)
