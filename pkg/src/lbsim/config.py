"""TOML experiment configs: [system], [policy], [sweep] sections.

The loader sorts servers by service rate (nondecreasing) and records the
original index map so reports can be mapped back to the raw ordering.
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from dataclasses import dataclass

import numpy as np

from .model import ArrivalLaw, ServiceLaw, SystemConfig, two_point_for_moments
from .policy import PolicySpec
from .sim import SweepConfig


class ConfigError(ValueError):
    def __init__(self, section: str, message: str):
        super().__init__(f"[{section}] {message}")
        self.section = section


def _require(table: dict, section: str, key: str):
    if key not in table:
        raise ConfigError(section, f"missing required field {key!r}")
    return table[key]


def _arrival_from(table: dict) -> ArrivalLaw:
    kind = _require(table, "system.arrival", "kind")
    if kind == "deterministic":
        return ArrivalLaw.deterministic(int(_require(table, "system.arrival", "value")))
    if kind == "two_point":
        return ArrivalLaw.two_point(
            int(_require(table, "system.arrival", "lo")),
            int(_require(table, "system.arrival", "hi")),
            float(_require(table, "system.arrival", "p_hi")),
        )
    if kind == "binomial":
        return ArrivalLaw.binomial(
            int(_require(table, "system.arrival", "m")),
            float(_require(table, "system.arrival", "p")),
        )
    if kind == "pmf":
        return ArrivalLaw.from_pmf(_require(table, "system.arrival", "entries"))
    if kind == "moment_match":
        return two_point_for_moments(
            float(_require(table, "system.arrival", "mean")),
            float(_require(table, "system.arrival", "variance")),
            int(_require(table, "system.arrival", "a_max_total")),
        )
    raise ConfigError("system.arrival", f"unknown kind {kind!r}")


def load_system(doc: dict, seed_override: int | None = None) -> SystemConfig:
    sys_tab = doc.get("system")
    if sys_tab is None:
        raise ConfigError("system", "section missing")
    n = int(_require(sys_tab, "system", "n"))
    mu_raw = np.asarray(_require(sys_tab, "system", "mu"), dtype=float)
    if len(mu_raw) != n:
        raise ConfigError("system", f"mu has {len(mu_raw)} entries, expected n={n}")
    s_max = int(_require(sys_tab, "system", "s_max"))
    seed = int(sys_tab.get("seed", 0)) if seed_override is None else int(seed_override)
    arrival = _arrival_from(_require(sys_tab, "system", "arrival"))
    order = np.argsort(mu_raw, kind="stable")
    pmfs = sys_tab.get("service", {}).get("pmfs")
    laws = ()
    if pmfs is not None:
        if len(pmfs) != n:
            raise ConfigError("system.service", "need one pmf per server")
        laws = tuple(
            ServiceLaw(
                np.array([v for v, _ in pmfs[i]]), np.array([p for _, p in pmfs[i]])
            )
            for i in order
        )
    return SystemConfig(
        n=n,
        mu=mu_raw[order],
        s_max=s_max,
        arrival=arrival,
        seed=seed,
        service_laws=laws,
        index_map=tuple(int(i) for i in order),
    )


def load_policy(doc: dict, n: int) -> PolicySpec:
    pol = doc.get("policy")
    if pol is None:
        raise ConfigError("policy", "section missing")
    kind = _require(pol, "policy", "kind")
    gamma = pol.get("gamma")
    spec = PolicySpec(
        kind=kind,
        t_cycle=int(pol.get("t_cycle", n if kind == "round_robin" else 1)),
        gamma=None if gamma is None else np.asarray(gamma, dtype=float),
        d=int(pol["d"]) if "d" in pol else None,
        ftable_path=pol.get("ftable"),
    )
    try:
        spec.validate_for(n)
    except ValueError as exc:
        raise ConfigError("policy", str(exc)) from exc
    return spec


def load_sweep(doc: dict) -> SweepConfig:
    sw = doc.get("sweep")
    if sw is None:
        raise ConfigError("sweep", "section missing")
    try:
        return SweepConfig(
            epsilons=[float(e) for e in _require(sw, "sweep", "epsilons")],
            replications=int(_require(sw, "sweep", "replications")),
            slots_per_rep=int(_require(sw, "sweep", "slots_per_rep")),
            burn_in=int(sw["burn_in"]) if "burn_in" in sw else None,
            variance_pin=float(sw.get("variance_pin", 1.0)),
            a_max_total=int(sw.get("a_max_total", 0)),
            reservoir_stride=int(sw.get("reservoir_stride", 1)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("sweep", str(exc)) from exc


def load_document(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("toml", f"{path}: {exc}") from exc
