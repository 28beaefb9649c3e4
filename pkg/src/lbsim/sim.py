"""Steady-state estimation and heavy-traffic verification.

Builds on the vectorized engine: mean queue lengths with batch-means
confidence intervals, the parallel/perpendicular decomposition of the scaled
queue vector, capacity-slack sweeps against the closed-form bounds, the
explicit drift constants, and the exponential-limit distribution fit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import t as student_t

from . import engine
from .fvector import FTable
from .model import SystemConfig, two_point_for_moments
from .policy import PolicySpec
from .stability import check_strict_majorization

E_MINUS_2 = math.e - 2.0


@dataclass
class SimStats:
    mean_q: np.ndarray
    mean_total: float
    o_perp_sq_mean: float
    o_sq_mean: float
    eps_total_samples: np.ndarray
    per_queue_share: np.ndarray
    ci_halfwidth_total: float
    ci_halfwidth_q: np.ndarray
    samples: int
    effective_slots: int


@dataclass
class SweepConfig:
    epsilons: list
    replications: int
    slots_per_rep: int
    burn_in: int | None = None  # default per-epsilon: max(1e6, 20 / eps^2)
    variance_pin: float = 1.0
    a_max_total: int = 0  # 0 = derive from the moment-matched law
    reservoir_stride: int = 1

    def __post_init__(self):
        if not self.epsilons:
            raise ValueError("at least one capacity slack is required")
        if self.burn_in is not None and self.burn_in >= self.slots_per_rep:
            raise ValueError("burn_in must be smaller than slots_per_rep")

    def validate_for(self, total_rate: float) -> None:
        for eps in self.epsilons:
            if not 0.0 < eps < total_rate:
                raise ValueError(f"capacity slack {eps} outside (0, total service rate)")

    def burn_in_for(self, eps: float) -> int:
        if self.burn_in is not None:
            return self.burn_in
        return int(max(1_000_000, 20.0 / eps**2))


@dataclass
class SSCConstants:
    delta_star: float
    xi_star: float
    z_bound: float
    k1: float
    k2: float
    k_total: float
    big_delta: float
    a_level: float
    eps0: float
    eta_hajek: float
    rho: float
    n_perp_sq: float
    eps_validity: float  # the bound's regime: eps <= delta* ||mu||_1 / (2 xi*)


@dataclass
class FitReport:
    mean_rel_err: float
    cv2: float
    ks: float
    share_abs_err: np.ndarray
    samples: int


@dataclass
class SweepRow:
    eps: float
    arrival_rate: float
    mean_total: float
    eps_mean_q_per_server: float
    bound_lower: float
    bound_upper_partial: float
    o_perp_sq: float
    o_sq: float
    ks: float
    cv2: float
    mean_rel_err: float
    shares: np.ndarray
    ci_halfwidth_total: float
    effective_slots: int
    delay_optimal_candidate: bool


@dataclass
class SSCVerdict:
    applicable: bool
    passed: bool
    perp_ratio: float
    o_sq_growth: float
    required_growth: float
    perp_bound_ok: bool
    reason: str = ""


def run_steady_state(
    system: SystemConfig,
    policy: PolicySpec,
    slots: int,
    burn_in: int,
    replications: int = 1,
    batches: int = 32,
    reservoir_stride: int = 1,
    rep_offset: int = 0,
    eps_scale: float = 1.0,
    h_star: float | None = None,
) -> SimStats:
    """Cycle-boundary steady-state statistics with batch-means 95% intervals."""
    stable_below = h_star if h_star is not None else system.total_rate
    if system.arrival.mean >= stable_below:
        warnings.warn(
            "arrival rate is at or above the verified stability threshold; "
            "estimates may diverge",
            stacklevel=2,
        )
    raw = engine.run(
        system,
        policy,
        replications=replications,
        slots=slots,
        burn_in=burn_in,
        rep_offset=rep_offset,
        reservoir_stride=reservoir_stride,
        batches=batches,
    )
    ok = raw.batch_counts > 0
    b = int(ok.sum())
    tq = student_t.ppf(0.975, b - 1) if b > 1 else math.inf
    means_total = raw.batch_total[ok] / raw.batch_counts[ok]
    means_q = raw.batch_q[ok] / raw.batch_counts[ok][:, None]
    hw_total = tq * float(means_total.std(ddof=1)) / math.sqrt(b) if b > 1 else math.inf
    hw_q = tq * means_q.std(axis=0, ddof=1) / math.sqrt(b) if b > 1 else np.full(system.n, math.inf)
    return SimStats(
        mean_q=raw.mean_q,
        mean_total=raw.mean_total,
        o_perp_sq_mean=raw.o_perp_sq_mean,
        o_sq_mean=raw.o_sq_mean,
        eps_total_samples=eps_scale * raw.total_reservoir,
        per_queue_share=raw.per_queue_share,
        ci_halfwidth_total=hw_total,
        ci_halfwidth_q=hw_q,
        samples=raw.samples,
        effective_slots=replications * (slots - burn_in),
    )


def decompose(q: np.ndarray, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split the scaled queue vector into its components along and against
    the collapse direction (sqrt(gamma_l))_l."""
    q = np.asarray(q, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("scaling vector must be strictly positive")
    sqrt_gamma = np.sqrt(gamma)
    o = q / sqrt_gamma
    o_par = (q.sum() / gamma.sum()) * sqrt_gamma
    return o_par, o - o_par


def ssc_constants(
    system: SystemConfig, policy: PolicySpec, f_table: FTable
) -> SSCConstants:
    """Explicit drift constants behind the perpendicular-moment bound.

    Evaluated literally from their displayed formulas, with the arrival rate
    taken at capacity (the constants must not depend on the slack).
    """
    mu = system.mu
    n = system.n
    t = policy.t_cycle
    gamma = policy.gamma_for(n, mu)
    gamma_min, gamma_max, gamma_l1 = float(gamma.min()), float(gamma.max()), float(gamma.sum())
    mu_l1 = float(mu.sum())
    s_max = system.s_max
    a_max = system.arrival.a_max_total / n  # per-server arrival bound scale
    n_lambda = mu_l1
    sigma_lambda_n = system.arrival.variance  # n * sigma_lambda^2
    sigma_max_sq = float(system.sigma_sq_service.max())

    delta_star = math.inf
    xi_star = 0.0
    f_max = 0.0
    tau_max_sq = 0.0
    for eta in f_table.permutations():
        f, tau_sq = f_table.get(eta)
        f_max = max(f_max, float(np.max(f)))
        tau_max_sq = max(tau_max_sq, float(np.max(tau_sq)))
        f_prefix = np.cumsum(f)
        share = np.cumsum(mu[list(eta)]) / mu_l1
        for m in range(1, n):
            delta_star = min(delta_star, float(share[m - 1] - f_prefix[m - 1]))
            xi_star = max(xi_star, float(1.0 - f_prefix[m - 1]))
    if n == 1:
        raise ValueError("the collapse constants need at least two servers")
    if delta_star <= 0:
        raise ValueError("non-strict majorization: the gap constant is not positive")

    mu_max = float(mu.max())
    bracket_full = (
        t**2 * (n_lambda * f_max + mu_max) ** 2
        + t * f_max * sigma_lambda_n
        + t**2 * n_lambda**2 * tau_max_sq
        + t * sigma_max_sq
    )
    bracket_idle = (
        t**2 * n_lambda**2 * f_max**2
        + t * f_max * sigma_lambda_n
        + t**2 * n_lambda**2 * tau_max_sq
    )
    k1 = (
        2 * t * (n - 1) * mu_max * t * s_max / gamma_min
        + bracket_full / gamma_min
        + (n - 1) / gamma_min * bracket_full
        + (n - 1) / gamma_min * bracket_idle
    )
    k2 = 2 * t**2 * n**2 * s_max**2 / gamma_l1
    k = k1 + k2
    z = 2 * t * n * (a_max + s_max) / math.sqrt(gamma_min)
    big_delta = delta_star * mu_l1 / (2 * xi_star)
    sqrt_ngmax = math.sqrt(n * gamma_max)
    a_level = k * sqrt_ngmax / (t * xi_star * big_delta)
    eps0 = t * xi_star * big_delta / (2 * sqrt_ngmax)
    eta = min(
        1.0 / z,
        t * xi_star * big_delta / (4 * sqrt_ngmax * z**2 * E_MINUS_2),
        t * xi_star * big_delta / (k * sqrt_ngmax),
    )
    rho = 1.0 - eps0 * eta + z**2 * E_MINUS_2 * eta**2
    if rho >= 1.0:
        raise ValueError("geometric factor at or above 1: constants out of validity")
    denom = t * xi_star * big_delta * eta**3 - 2 * sqrt_ngmax * z**2 * E_MINUS_2 * eta**4
    n_perp_sq = 4 * sqrt_ngmax * math.e**2 / denom
    return SSCConstants(
        delta_star=delta_star,
        xi_star=xi_star,
        z_bound=z,
        k1=k1,
        k2=k2,
        k_total=k,
        big_delta=big_delta,
        a_level=a_level,
        eps0=eps0,
        eta_hajek=eta,
        rho=rho,
        n_perp_sq=n_perp_sq,
        eps_validity=big_delta,
    )


def lower_bound_per_server(system: SystemConfig, eps: float, variance_pin: float) -> float:
    """Single-server coupling: eps * E[(1/n) sum Q] is at least this, for any policy."""
    n = system.n
    return (
        variance_pin + float(system.sigma_sq_service.sum()) + eps**2 - system.s_max * eps
    ) / (2 * n)


def upper_bound_per_server(
    system: SystemConfig,
    policy: PolicySpec,
    eps: float,
    variance_pin: float,
    n_perp: float,
) -> float:
    """Closed-form upper bound on eps * E[(1/n) sum Q] with the explicit
    (loose) perpendicular constant."""
    n = system.n
    t = policy.t_cycle
    gamma = policy.gamma_for(n, system.mu)
    gamma_min, gamma_l1 = float(gamma.min()), float(gamma.sum())
    a_max = system.arrival.a_max_total / n
    s_max = system.s_max
    total = (
        (variance_pin + float(system.sigma_sq_service.sum())) / 2
        + eps**2 * t / 2
        + eps * (t * n * s_max * gamma_min + 2 * t * n * gamma_l1 * a_max) / (2 * gamma_min)
        + math.sqrt(eps) * gamma_l1 * n_perp * math.sqrt(n * s_max) / math.sqrt(gamma_min)
    )
    return total / n


def sandwich_limit_per_server(system: SystemConfig, variance_pin: float) -> float:
    """Common small-slack limit of the upper and lower bounds."""
    return (variance_pin + float(system.sigma_sq_service.sum())) / (2 * system.n)


def exponential_ks(samples: np.ndarray, mean: float) -> float:
    """Kolmogorov-Smirnov distance to Exponential(mean); no parameter fitting."""
    x = np.sort(np.asarray(samples, dtype=float))
    m = len(x)
    cdf = 1.0 - np.exp(-x / mean)
    grid = np.arange(1, m + 1) / m
    return float(np.max(np.maximum(np.abs(grid - cdf), np.abs(grid - 1.0 / m - cdf))))


def distribution_fit(
    eps_total_samples: np.ndarray,
    system: SystemConfig,
    gamma: np.ndarray,
    shares: np.ndarray,
    variance_pin: float | None = None,
) -> FitReport:
    """Compare scaled total-queue samples against the exponential limit and
    per-queue shares against gamma_l / ||gamma||_1."""
    samples = np.asarray(eps_total_samples, dtype=float)
    if len(samples) < 1000:
        raise ValueError("need at least 1000 samples for a distribution fit")
    var_n = system.arrival.variance if variance_pin is None else variance_pin
    target_mean = (var_n + float(system.sigma_sq_service.sum())) / 2
    m = float(samples.mean())
    v = float(samples.var(ddof=1))
    gamma = np.asarray(gamma, dtype=float)
    return FitReport(
        mean_rel_err=abs(m - target_mean) / target_mean,
        cv2=v / m**2,
        ks=exponential_ks(samples, target_mean),
        share_abs_err=np.abs(np.asarray(shares) - gamma / gamma.sum()),
        samples=len(samples),
    )


def heavy_traffic_sweep(
    system_template: SystemConfig,
    policy: PolicySpec,
    sweep: SweepConfig,
    f_table: FTable | None = None,
) -> list[SweepRow]:
    """One row per capacity slack: simulated per-server scaled mean queue,
    the analytic bound sandwich, collapse statistics and the distribution fit.

    Arrival laws are moment-matched per slack so the variance stays pinned
    while the mean tracks the shrinking slack.
    """
    total = system_template.total_rate
    sweep.validate_for(total)
    gamma = policy.gamma_for(system_template.n, system_template.mu)
    n_perp = math.nan
    optimal = False
    if f_table is not None and policy.kind != "custom":
        strict, _ = check_strict_majorization(f_table, system_template.mu)
        if strict:
            optimal = True
            n_perp = math.sqrt(
                ssc_constants(system_template, policy, f_table).n_perp_sq
            )
    rows = []
    a_max = sweep.a_max_total or _auto_a_max(total, sweep.variance_pin)
    for eps in sweep.epsilons:
        arrival = two_point_for_moments(total - eps, sweep.variance_pin, a_max)
        system = SystemConfig(
            n=system_template.n,
            mu=system_template.mu,
            s_max=system_template.s_max,
            arrival=arrival,
            seed=system_template.seed,
            service_laws=system_template.service_laws,
            index_map=system_template.index_map,
        )
        burn_in = sweep.burn_in_for(eps)
        stats = run_steady_state(
            system,
            policy,
            slots=sweep.slots_per_rep,
            burn_in=burn_in,
            replications=sweep.replications,
            reservoir_stride=sweep.reservoir_stride,
            eps_scale=eps,
        )
        fit = distribution_fit(
            stats.eps_total_samples, system, gamma, stats.per_queue_share, sweep.variance_pin
        )
        ub = (
            upper_bound_per_server(system, policy, eps, sweep.variance_pin, n_perp)
            if optimal
            else math.nan
        )
        rows.append(
            SweepRow(
                eps=eps,
                arrival_rate=total - eps,
                mean_total=stats.mean_total,
                eps_mean_q_per_server=eps * stats.mean_total / system.n,
                bound_lower=lower_bound_per_server(system, eps, sweep.variance_pin),
                bound_upper_partial=ub,
                o_perp_sq=stats.o_perp_sq_mean,
                o_sq=stats.o_sq_mean,
                ks=fit.ks,
                cv2=fit.cv2,
                mean_rel_err=fit.mean_rel_err,
                shares=stats.per_queue_share,
                ci_halfwidth_total=stats.ci_halfwidth_total,
                effective_slots=stats.effective_slots,
                delay_optimal_candidate=optimal,
            )
        )
    return rows


def _auto_a_max(total_rate: float, variance: float) -> int:
    return int(math.ceil(total_rate + max(4.0, 4.0 * math.sqrt(max(variance, 1.0)))))


def ssc_empirical_check(rows: list[SweepRow], n_perp_sq: float) -> SSCVerdict:
    """Bounded perpendicular moment across slacks while the full scaled vector
    explodes; also the one-sided check against the explicit constant."""
    if len(rows) < 3:
        raise ValueError("need at least 3 capacity slacks")
    eps = np.array([r.eps for r in rows])
    if eps.max() / eps.min() < 4.0:
        raise ValueError("capacity slacks must span at least a factor of 4")
    perp = np.array([r.o_perp_sq for r in rows])
    o_sq = np.array([r.o_sq for r in rows])
    perp_ratio = float(perp.max() / perp.min())
    growth = float(o_sq[np.argmin(eps)] / o_sq[np.argmax(eps)])
    required = (eps.max() / eps.min()) ** 2 / 2
    bound_ok = bool(np.all(perp <= n_perp_sq))
    passed = perp_ratio <= 2.0 and growth >= required and bound_ok
    return SSCVerdict(
        applicable=True,
        passed=passed,
        perp_ratio=perp_ratio,
        o_sq_growth=growth,
        required_growth=required,
        perp_bound_ok=bound_ok,
    )
