"""Experiment harness: subcommands bound to config files, reproducible seeds,
report and CSV emission.

Every output file starts with a manifest header (config hash, seed,
subcommand, tool version); identical manifests produce bit-identical files.
Exit code is 0 iff every requested verdict passes or is not applicable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ConfigError, load_document, load_policy, load_sweep, load_system
from .fvector import build_ftable, read_ftable, write_ftable
from .model import OverflowGuardError, make_stream
from .sim import (
    SweepConfig,
    distribution_fit,
    heavy_traffic_sweep,
    run_steady_state,
    ssc_constants,
    ssc_empirical_check,
)
from .stability import analyze

MC_STREAM_PURPOSE = 7  # f-table Monte-Carlo draws


@dataclass
class RunManifest:
    config_path: str
    subcommand: str
    seed: int
    out_dir: str
    config_sha256: str
    version: str

    def header(self) -> str:
        payload = {
            "config": os.path.basename(self.config_path),
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "subcommand": self.subcommand,
            "version": self.version,
        }
        return "# manifest: " + json.dumps(payload, sort_keys=True)


def _manifest(args, subcommand: str, seed: int) -> RunManifest:
    with open(args.config, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    return RunManifest(
        config_path=str(args.config),
        subcommand=subcommand,
        seed=seed,
        out_dir=str(args.out),
        config_sha256=digest,
        version=__version__,
    )


def _write(manifest: RunManifest, name: str, body: str) -> str:
    os.makedirs(manifest.out_dir, exist_ok=True)
    path = os.path.join(manifest.out_dir, name)
    with open(path, "w") as fh:
        fh.write(manifest.header() + "\n" + body)
    return path


def _fail(failures: list) -> int:
    if failures:
        print(json.dumps({"failures": failures}, sort_keys=True), file=sys.stderr)
        return 1
    return 0


def cmd_fvector(args) -> int:
    doc = load_document(args.config)
    system = load_system(doc, args.seed)
    spec = load_policy(doc, system.n)
    manifest = _manifest(args, "fvector", system.seed)
    if spec.kind == "custom":
        table = read_ftable(spec.ftable_path)
    elif args.monte_carlo:
        rng = make_stream(system.seed, MC_STREAM_PURPOSE)
        table = build_ftable(spec, system.mu, "monte_carlo", args.monte_carlo, rng)
    else:
        table = build_ftable(spec, system.mu, "analytic")
    table.validate()
    os.makedirs(manifest.out_dir, exist_ok=True)
    path = os.path.join(manifest.out_dir, "ftable.txt")
    tmp = path + ".tmp"
    write_ftable(table, tmp)
    with open(tmp) as fh:
        content = fh.read()
    os.remove(tmp)
    with open(path, "w") as fh:
        fh.write(manifest.header() + "\n" + content)
    print(f"wrote {path} ({'symmetric, ' if table.symmetric else ''}{table.provenance})")
    return 0


def cmd_stability(args) -> int:
    doc = load_document(args.config)
    system = load_system(doc, args.seed)
    spec = load_policy(doc, system.n)
    manifest = _manifest(args, "stability", system.seed)
    if spec.kind == "custom" or args.ftable:
        table = read_ftable(args.ftable or spec.ftable_path)
    else:
        table = build_ftable(spec, system.mu, "analytic")
    report = analyze(table, system.mu)
    body = report.to_text() + "\n" + json.dumps(report.to_dict(), sort_keys=True) + "\n"
    path = _write(manifest, "stability.txt", body)
    print(report.to_text())
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    doc = load_document(args.config)
    system = load_system(doc, args.seed)
    spec = load_policy(doc, system.n)
    sim_tab = doc.get("simulate", {})
    slots = args.slots or int(sim_tab.get("slots", 1_000_000))
    burn_in = int(sim_tab.get("burn_in", min(slots // 10, 1_000_000)))
    reps = args.replications or int(sim_tab.get("replications", 4))
    manifest = _manifest(args, "simulate", system.seed)
    try:
        stats = run_steady_state(system, spec, slots=slots, burn_in=burn_in, replications=reps)
    except OverflowGuardError as exc:
        print(json.dumps({"failures": [{"error": str(exc)}]}), file=sys.stderr)
        return 1
    lines = [
        "stat,value",
        f"mean_total,{stats.mean_total!r}",
        f"ci_halfwidth_total,{stats.ci_halfwidth_total!r}",
        f"o_perp_sq_mean,{stats.o_perp_sq_mean!r}",
        f"o_sq_mean,{stats.o_sq_mean!r}",
        f"samples,{stats.samples}",
        f"effective_slots,{stats.effective_slots}",
    ]
    for l, (mq, hw) in enumerate(zip(stats.mean_q, stats.ci_halfwidth_q)):
        lines.append(f"mean_q_{l},{mq!r}")
        lines.append(f"ci_halfwidth_q_{l},{hw!r}")
    path = _write(manifest, "simulate.csv", "\n".join(lines) + "\n")
    print(f"mean total queue {stats.mean_total:.4f} +- {stats.ci_halfwidth_total:.4f}")
    print(f"wrote {path}")
    return 0


def _sweep_csv(rows, n: int) -> str:
    share_cols = ",".join(f"share_{l}" for l in range(n))
    header = (
        "eps,lambda,mean_total,eps_mean_q_per_server,lb,ub,o_perp_sq,o_sq,"
        f"ks,cv2,mean_rel_err,ci_total,effective_slots,{share_cols}"
    )
    lines = [header]
    for r in rows:
        shares = ",".join(repr(float(s)) for s in r.shares)
        lines.append(
            f"{r.eps!r},{r.arrival_rate!r},{r.mean_total!r},{r.eps_mean_q_per_server!r},"
            f"{r.bound_lower!r},{r.bound_upper_partial!r},{r.o_perp_sq!r},{r.o_sq!r},"
            f"{r.ks!r},{r.cv2!r},{r.mean_rel_err!r},{r.ci_halfwidth_total!r},"
            f"{r.effective_slots},{shares}"
        )
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    doc = load_document(args.config)
    system = load_system(doc, args.seed)
    spec = load_policy(doc, system.n)
    sweep = load_sweep(doc)
    if args.replications:
        sweep.replications = args.replications
    if args.slots:
        sweep.slots_per_rep = args.slots
    manifest = _manifest(args, "sweep", system.seed)
    table = build_ftable(spec, system.mu, "analytic") if spec.kind != "custom" else None
    try:
        rows = heavy_traffic_sweep(system, spec, sweep, f_table=table)
    except OverflowGuardError as exc:
        print(json.dumps({"failures": [{"error": str(exc)}]}), file=sys.stderr)
        return 1
    path = _write(manifest, "sweep.csv", _sweep_csv(rows, system.n))
    failures = []
    for r in rows:
        if not math.isnan(r.bound_lower):
            if r.eps_mean_q_per_server < r.bound_lower - r.eps * r.ci_halfwidth_total / system.n:
                failures.append({"eps": r.eps, "verdict": "below_lower_bound"})
    if table is not None and rows and rows[0].delay_optimal_candidate and len(rows) >= 3:
        n_perp_sq = ssc_constants(system, spec, table).n_perp_sq
        verdict = ssc_empirical_check(rows, n_perp_sq)
        print(
            f"collapse check: {'PASS' if verdict.passed else 'FAIL'} "
            f"(perp ratio {verdict.perp_ratio:.3g}, growth {verdict.o_sq_growth:.3g} "
            f">= {verdict.required_growth:.3g})"
        )
        if not verdict.passed:
            failures.append({"verdict": "state_space_collapse"})
    print(f"wrote {path}")
    return _fail(failures)


def cmd_distcheck(args) -> int:
    doc = load_document(args.config)
    system = load_system(doc, args.seed)
    spec = load_policy(doc, system.n)
    sweep = load_sweep(doc)
    if args.replications:
        sweep.replications = args.replications
    if args.slots:
        sweep.slots_per_rep = args.slots
    eps = min(sweep.epsilons)
    sweep = SweepConfig(
        epsilons=[eps],
        replications=sweep.replications,
        slots_per_rep=sweep.slots_per_rep,
        burn_in=sweep.burn_in,
        variance_pin=sweep.variance_pin,
        a_max_total=sweep.a_max_total,
        reservoir_stride=sweep.reservoir_stride,
    )
    manifest = _manifest(args, "distcheck", system.seed)
    table = build_ftable(spec, system.mu, "analytic") if spec.kind != "custom" else None
    rows = heavy_traffic_sweep(system, spec, sweep, f_table=table)
    r = rows[0]
    body = (
        "stat,value\n"
        f"eps,{r.eps!r}\n"
        f"mean_rel_err,{r.mean_rel_err!r}\n"
        f"cv2,{r.cv2!r}\n"
        f"ks,{r.ks!r}\n"
        + "".join(f"share_{l},{float(s)!r}\n" for l, s in enumerate(r.shares))
    )
    path = _write(manifest, "distcheck.csv", body)
    print(f"ks={r.ks:.4f} cv2={r.cv2:.4f} mean_rel_err={r.mean_rel_err:.4f}")
    print(f"wrote {path}")
    failures = []
    if r.ks > 0.05:
        failures.append({"verdict": "ks_distance", "value": r.ks})
    if not 0.8 <= r.cv2 <= 1.2:
        failures.append({"verdict": "squared_cv", "value": r.cv2})
    if r.mean_rel_err > 0.10:
        failures.append({"verdict": "mean_relative_error", "value": r.mean_rel_err})
    return _fail(failures)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lbsim",
        description="Discrete-time load-balancing laboratory",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [
        ("fvector", cmd_fvector),
        ("stability", cmd_stability),
        ("simulate", cmd_simulate),
        ("sweep", cmd_sweep),
        ("distcheck", cmd_distcheck),
    ]:
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override [system].seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--replications", type=int, default=None)
        p.add_argument("--slots", type=int, default=None)
        p.add_argument(
            "--monte-carlo",
            type=int,
            default=0,
            metavar="CYCLES",
            help="estimate dispatch fractions by cycle simulation",
        )
        if name == "stability":
            p.add_argument("--ftable", default=None, help="explicit f-table file")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    # LBSIM_THREADS caps numpy's thread fan-out for reproducible timing.
    threads = os.environ.get("LBSIM_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
