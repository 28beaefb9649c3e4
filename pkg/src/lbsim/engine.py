"""Vectorized slot-by-slot simulation of many independent replications.

All replications of one run advance in lockstep as rows of (R, n) arrays, so
the wall-clock cost scales with slots-per-replication, not with total slots.
Statistics are sampled at cycle boundaries (the instants where the policy
samples the queue) after the burn-in, and aggregated online.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    OVERFLOW_GUARD,
    STREAM_ARRIVAL,
    STREAM_DECISION,
    STREAM_SERVICE,
    STREAM_SORT,
    OverflowGuardError,
    SystemConfig,
    make_stream,
)
from .policy import PolicySpec

OVERFLOW_CHECK_EVERY = 4096


@dataclass
class RawStats:
    """Online aggregates over post-burn-in cycle-boundary samples."""

    n: int
    replications: int
    slots: int
    burn_in: int
    samples: int = 0
    sum_q: np.ndarray = None
    sum_total: float = 0.0
    sum_total_sq: float = 0.0
    sum_o_sq: float = 0.0
    sum_opar_sq: float = 0.0
    sum_operp_sq: float = 0.0
    sum_share: np.ndarray = None
    share_samples: int = 0
    total_reservoir: np.ndarray = None  # thinned ||Q||_1 samples
    batch_total: np.ndarray = None  # per-batch sums of ||Q||_1
    batch_q: np.ndarray = None  # per-batch sums of Q_l
    batch_counts: np.ndarray = None
    track_times: np.ndarray = None  # slot indices of tracked queue means
    track_values: np.ndarray = None  # across-replication mean of one queue

    @property
    def mean_q(self) -> np.ndarray:
        return self.sum_q / self.samples

    @property
    def mean_total(self) -> float:
        return self.sum_total / self.samples

    @property
    def o_sq_mean(self) -> float:
        return self.sum_o_sq / self.samples

    @property
    def o_perp_sq_mean(self) -> float:
        return self.sum_operp_sq / self.samples

    @property
    def per_queue_share(self) -> np.ndarray:
        if self.share_samples == 0:
            return np.full(self.n, np.nan)
        return self.sum_share / self.share_samples


def _sampler(values: np.ndarray, cum: np.ndarray):
    def draw(u: np.ndarray) -> np.ndarray:
        idx = np.minimum(np.searchsorted(cum, u, side="right"), len(values) - 1)
        return values[idx]

    return draw


def _cycle_targets(
    spec: PolicySpec,
    q: np.ndarray,
    gamma: np.ndarray,
    mu: np.ndarray,
    rng_sort: np.random.Generator,
    rng_dec: np.random.Generator,
    rr_start: int,
) -> np.ndarray:
    """Dispatch targets for one cycle, shape (R, T); server indices."""
    reps, n = q.shape
    t = spec.t_cycle
    kind = spec.kind
    if kind == "rand":
        return rng_dec.integers(0, n, size=(reps, t))
    if kind == "weighted_rand":
        cum = np.cumsum(mu / mu.sum())
        idx = np.searchsorted(cum, rng_dec.random((reps, t)), side="right")
        return np.minimum(idx, n - 1)
    if kind == "round_robin":
        row = (rr_start + np.arange(t)) % n
        return np.broadcast_to(row, (reps, t))
    keys = q / gamma
    tie = rng_sort.random((reps, n))
    if kind in ("jsq", "jsed"):
        mn = keys.min(axis=1, keepdims=True)
        score = np.where(keys == mn, tie, 2.0)
        target = score.argmin(axis=1)
        return np.broadcast_to(target[:, None], (reps, t))
    if kind == "pod":
        d = spec.d
        r = rng_dec.random((reps, t, n))
        chosen = np.argsort(r, axis=-1)[..., :d]  # d distinct servers per slot
        rows = np.arange(reps)[:, None, None]
        k = keys[rows, chosen]
        tb = tie[rows, chosen]
        mn = k.min(axis=-1, keepdims=True)
        score = np.where(k == mn, tb, 2.0)
        sel = score.argmin(axis=-1)
        return np.take_along_axis(chosen, sel[..., None], axis=-1)[..., 0]
    raise ValueError(f"policy kind {spec.kind!r} is not simulatable")


def run(
    system: SystemConfig,
    spec: PolicySpec,
    *,
    replications: int,
    slots: int,
    burn_in: int,
    rep_offset: int = 0,
    reservoir_stride: int = 1,
    batches: int = 32,
    track_queue: int | None = None,
    track_stride: int = 0,
) -> RawStats:
    """Simulate ``replications`` trajectories for ``slots`` slots each.

    Randomness comes from four streams derived from the system seed (arrivals,
    services, sorting ties, decisions), keyed additionally by ``rep_offset`` so
    disjoint blocks of replications are independent.
    """
    if spec.kind == "custom":
        raise ValueError("custom policies carry only an f-table and cannot be simulated")
    spec.validate_for(system.n)
    if not 0 <= burn_in < slots:
        raise ValueError("need 0 <= burn_in < slots")
    n, reps, t = system.n, replications, spec.t_cycle
    gamma = spec.gamma_for(n, system.mu)
    mu = system.mu
    rng_a = make_stream(system.seed, STREAM_ARRIVAL, rep_offset)
    rng_s = make_stream(system.seed, STREAM_SERVICE, rep_offset)
    rng_v = make_stream(system.seed, STREAM_SORT, rep_offset)
    rng_w = make_stream(system.seed, STREAM_DECISION, rep_offset)

    draw_arrival = _sampler(system.arrival.values, system.arrival.cum_probs)
    service_samplers = [_sampler(law.values, law.cum_probs) for law in system.service_laws]

    sqrt_gamma = np.sqrt(gamma)
    gamma_l1 = float(gamma.sum())

    stats = RawStats(n=n, replications=reps, slots=slots, burn_in=burn_in)
    stats.sum_q = np.zeros(n)
    stats.sum_share = np.zeros(n)
    stats.batch_total = np.zeros(batches)
    stats.batch_q = np.zeros((batches, n))
    stats.batch_counts = np.zeros(batches, dtype=np.int64)
    reservoir: list[np.ndarray] = []
    track_t: list[int] = []
    track_v: list[float] = []

    q = np.zeros((reps, n), dtype=np.int64)
    rows = np.arange(reps)
    targets = None
    boundary_index = 0
    post = slots - burn_in

    for slot in range(slots):
        phase = slot % t
        if phase == 0:
            targets = _cycle_targets(spec, q, gamma, mu, rng_v, rng_w, 0)
            if slot >= burn_in:
                # sample the state the policy just observed
                totals = q.sum(axis=1)
                stats.samples += reps
                stats.sum_q += q.sum(axis=0)
                tot = totals.astype(float)
                stats.sum_total += float(tot.sum())
                stats.sum_total_sq += float((tot**2).sum())
                o = q / sqrt_gamma
                o_sq = (o**2).sum(axis=1)
                opar_sq = tot**2 / gamma_l1
                operp = o - (tot / gamma_l1)[:, None] * sqrt_gamma
                stats.sum_o_sq += float(o_sq.sum())
                stats.sum_opar_sq += float(opar_sq.sum())
                stats.sum_operp_sq += float((operp**2).sum())
                pos = totals > 0
                if np.any(pos):
                    stats.sum_share += (q[pos] / tot[pos, None]).sum(axis=0)
                    stats.share_samples += int(pos.sum())
                if boundary_index % reservoir_stride == 0:
                    reservoir.append(tot.copy())
                b = (slot - burn_in) * batches // post
                stats.batch_total[b] += float(tot.sum())
                stats.batch_q[b] += q.sum(axis=0)
                stats.batch_counts[b] += reps
                boundary_index += 1
        tgt = targets[:, phase]
        a = draw_arrival(rng_a.random(reps))
        u = rng_s.random((reps, n))
        q[rows, tgt] += a
        for l in range(n):
            q[:, l] -= service_samplers[l](u[:, l])
        np.maximum(q, 0, out=q)
        if track_stride and slot % track_stride == 0:
            track_t.append(slot)
            track_v.append(float(q[:, track_queue].mean()))
        if slot % OVERFLOW_CHECK_EVERY == 0 and q.max() > OVERFLOW_GUARD:
            raise OverflowGuardError(
                f"queue length exceeded the 64-bit guard at slot {slot}"
            )

    stats.total_reservoir = (
        np.concatenate(reservoir) if reservoir else np.empty(0)
    )
    if track_stride:
        stats.track_times = np.array(track_t)
        stats.track_values = np.array(track_v)
    return stats
