"""Cycle-based dispatching policies: scaling, randomized sorting, cycle plans.

A policy is a tuple (cycle length, scaling vector, sorting rule, decision
rule).  At each cycle boundary the queue lengths are sampled, scaled, and
sorted in decreasing order with uniform-random tie-breaking; the decision rule
then fixes one dispatch target per slot of the cycle.  Server indices are
0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BUILTIN_KINDS = ("rand", "weighted_rand", "round_robin", "jsq", "pod", "jsed")


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    t_cycle: int = 1
    gamma: np.ndarray | None = None
    d: int | None = None  # pod only
    ftable_path: str | None = None  # custom only

    def __post_init__(self):
        if self.kind not in BUILTIN_KINDS + ("custom",):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.t_cycle < 1:
            raise ValueError("cycle length must be >= 1")
        if self.gamma is not None:
            gamma = np.asarray(self.gamma, dtype=float)
            if np.any(gamma <= 0):
                raise ValueError("scaling vector must be strictly positive")
            object.__setattr__(self, "gamma", gamma)

    def validate_for(self, n: int) -> None:
        if self.gamma is not None and len(self.gamma) != n:
            raise ValueError("scaling vector length must equal server count")
        if self.kind == "round_robin" and self.t_cycle != n:
            raise ValueError("round_robin requires cycle length equal to n")
        if self.kind == "pod" and not (self.d and 1 <= self.d <= n):
            raise ValueError("pod requires d in [1, n]")

    def gamma_for(self, n: int, mu: np.ndarray | None = None) -> np.ndarray:
        if self.gamma is not None:
            return self.gamma
        if self.kind == "jsed":
            if mu is None:
                raise ValueError("jsed needs service rates for its scaling vector")
            return np.asarray(mu, dtype=float)
        return np.ones(n)

    @staticmethod
    def rand() -> "PolicySpec":
        return PolicySpec("rand")

    @staticmethod
    def weighted_rand() -> "PolicySpec":
        return PolicySpec("weighted_rand")

    @staticmethod
    def round_robin(n: int) -> "PolicySpec":
        return PolicySpec("round_robin", t_cycle=n)

    @staticmethod
    def jsq() -> "PolicySpec":
        return PolicySpec("jsq")

    @staticmethod
    def pod(d: int) -> "PolicySpec":
        return PolicySpec("pod", d=d)

    @staticmethod
    def jsed() -> "PolicySpec":
        return PolicySpec("jsed")


@dataclass(frozen=True)
class SortResult:
    eta: np.ndarray  # eta[0] = index of the longest scaled queue
    sort_keys: np.ndarray  # q / gamma, unsorted

    def __post_init__(self):
        keys = self.sort_keys[self.eta]
        assert np.all(np.diff(keys) <= 0), "sort keys must be nonincreasing"
        assert len(np.unique(self.eta)) == len(self.eta), "eta must be a bijection"


def sort_scaled(q: np.ndarray, gamma: np.ndarray, rng: np.random.Generator) -> SortResult:
    """Sort queues by q/gamma decreasing; ties get a uniformly random order."""
    if len(q) != len(gamma):
        raise ValueError("q and gamma must have equal length")
    keys = np.asarray(q, dtype=float) / gamma
    tie = rng.random(len(q))
    eta = np.lexsort((tie, -keys))
    return SortResult(eta, keys)


@dataclass
class CyclePlan:
    """Dispatch targets for one cycle, one server index per slot."""

    targets: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)


def dispatch_for_slot(plan: CyclePlan, phase: int) -> int:
    if not 0 <= phase < len(plan.targets):
        raise IndexError(f"phase {phase} out of range for cycle of length {len(plan.targets)}")
    return int(plan.targets[phase])


def plan_cycles(
    spec: PolicySpec,
    eta: np.ndarray,
    mu: np.ndarray,
    rng: np.random.Generator,
    count: int = 1,
    rr_start: int = 0,
) -> np.ndarray:
    """Dispatch targets for ``count`` independent cycles under a fixed permutation.

    Returns an int array of shape (count, T) of server indices.  The built-in
    decision rules are:

    - rand: every slot targets a uniformly random server;
    - weighted_rand: every slot targets server i with probability mu_i / sum(mu);
    - round_robin: slot j targets (rr_start + j) mod n, so each server is hit
      exactly once per cycle (T = n);
    - jsq / jsed: every slot targets the smallest scaled queue, eta[n-1];
    - pod: every slot samples d distinct servers uniformly and targets the one
      with the shortest scaled queue (largest sort position) among them.
    """
    n = len(mu)
    eta = np.asarray(eta, dtype=np.int64)
    t = spec.t_cycle
    if spec.kind == "rand":
        return rng.integers(0, n, size=(count, t))
    if spec.kind == "weighted_rand":
        cum = np.cumsum(mu / mu.sum())
        idx = np.searchsorted(cum, rng.random((count, t)), side="right")
        return np.minimum(idx, n - 1)
    if spec.kind == "round_robin":
        row = (rr_start + np.arange(t)) % n
        return np.broadcast_to(row, (count, t)).copy()
    if spec.kind in ("jsq", "jsed"):
        return np.full((count, t), eta[n - 1], dtype=np.int64)
    if spec.kind == "pod":
        d = spec.d
        # d distinct uniform positions per slot; the largest position wins.
        r = rng.random((count, t, n))
        chosen_pos = np.argsort(r, axis=-1)[..., :d]
        winner_pos = chosen_pos.max(axis=-1)
        return eta[winner_pos]
    raise ValueError(f"no decision rule for policy kind {spec.kind!r}")


def plan_cycle(
    spec: PolicySpec,
    eta: np.ndarray,
    mu: np.ndarray,
    rng: np.random.Generator,
    rr_start: int = 0,
) -> CyclePlan:
    return CyclePlan(plan_cycles(spec, eta, mu, rng, count=1, rr_start=rr_start)[0])
