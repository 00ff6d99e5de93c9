"""Command line: ``adaptdiff {profile,run,bench,analyze}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible job,
4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

import yaml

from . import __version__
from .bench import (
    ExperimentReport,
    PolicyKind,
    compare_policies,
    comparison_csv,
    desk_caps,
    render_tables,
    report_csv,
    run_matrix,
    write_report,
)
from .controller import InfeasibleJob
from .data import golden_fixture_path
from .diffcore import DataError, JobSpec, TableHandle, preflight_profile, write_verdicts
from .exec import SimModel
from .model import PolicyParams, PreflightProfile, ResourceCaps
from .scheduler import AdaptiveScheduler, default_caps
from .telemetry import LogFormatError, TelemetryLog
from .workload import ABLATION_AXES, DESK_SIZES, REFERENCE_SIZES, WorkloadSpec, scenario_matrix

log = logging.getLogger("adaptdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3, 4
ENV_MEM, ENV_CPU = "ADAPTDIFF_CAPS_MEM", "ADAPTDIFF_CAPS_CPU"

_UNITS = {"": 1, "b": 1, "k": 1e3, "kb": 1e3, "m": 1e6, "mb": 1e6, "g": 1e9, "gb": 1e9, "t": 1e12, "tb": 1e12,
          "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40}


class UsageError(Exception):
    pass


def parse_bytes(value) -> float:
    """``8GiB``, ``512 MB``, ``1e9`` -> bytes."""
    if isinstance(value, (int, float)):
        return float(value)
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*([A-Za-z]*)\s*", str(value))
    if not m or m.group(2).lower() not in _UNITS:
        raise UsageError(f"cannot parse memory size {value!r}")
    try:
        return float(m.group(1)) * _UNITS[m.group(2).lower()]
    except ValueError:
        raise UsageError(f"cannot parse memory size {value!r}") from None


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise DataError(f"malformed config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must be a mapping")
    return cfg


def _base_dir(path):
    return os.path.dirname(os.path.abspath(path)) if path else os.getcwd()


def effective_config(cfg, args):
    """Merge file values, environment caps and flags (flags win)."""
    out = {
        "policy": dict(cfg.get("policy") or {}),
        "caps": dict(cfg.get("caps") or {}),
        "backend": cfg.get("backend", "auto"),
        "seed": cfg.get("seed", 0),
        "out_dir": cfg.get("out_dir", "adaptdiff-out"),
    }
    if os.environ.get(ENV_MEM):
        out["caps"]["mem"] = os.environ[ENV_MEM]
    if os.environ.get(ENV_CPU):
        out["caps"]["cpu"] = os.environ[ENV_CPU]
    if getattr(args, "caps_mem", None) is not None:
        out["caps"]["mem"] = args.caps_mem
    if getattr(args, "caps_cpu", None) is not None:
        out["caps"]["cpu"] = args.caps_cpu
    if getattr(args, "policy", None) is not None:
        out["policy"]["name"] = args.policy
    if getattr(args, "b", None) is not None:
        out["policy"]["b"] = args.b
    if getattr(args, "k", None) is not None:
        out["policy"]["k"] = args.k
    for key in ("backend", "seed", "out_dir"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    out["policy"].setdefault("name", "adaptive")
    return out


def resolve_caps(caps_cfg) -> ResourceCaps:
    mem, cpu = caps_cfg.get("mem"), caps_cfg.get("cpu")
    if mem is None or cpu is None:
        d = default_caps()
        mem = d.mem_cap if mem is None else mem
        cpu = d.cpu_cap if cpu is None else cpu
    try:
        return ResourceCaps(parse_bytes(mem), int(cpu))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid caps: {exc}") from None


def _policy_params(policy_cfg) -> PolicyParams:
    params = dict(policy_cfg.get("params") or {})
    if "delta_prior" in params:
        params["delta_prior"] = parse_bytes(params["delta_prior"])
    try:
        return PolicyParams.from_mapping(params)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def load_job(cfg, base_dir) -> JobSpec:
    job = cfg.get("job")
    if not isinstance(job, dict) or "source" not in job or "target" not in job:
        raise UsageError("config needs job.source and job.target")

    def path(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base_dir, p)

    src = TableHandle.from_csv(path(job["source"]), path(job.get("source_schema")))
    tgt = TableHandle.from_csv(path(job["target"]), path(job.get("target_schema")))
    return JobSpec(src, tgt, column_mapping=tuple(tuple(p) for p in job.get("column_mapping") or ()),
                   tolerances=dict(job.get("tolerances") or {}), trim_strings=job.get("trim_strings", True))


# ---------------------------------------------------------------- commands


def cmd_profile(args):
    cfg = load_config(args.config)
    eff = effective_config(cfg, args)
    job = load_job(cfg, _base_dir(args.config))
    profile = preflight_profile(job)
    print(f"sample rows       {profile.sample_rows}")
    print(f"bytes/row (W)     {profile.bytes_per_row:.2f} B")
    print(f"read bandwidth    {profile.read_bandwidth:.4g} B/s")
    for t, c in sorted(profile.delta_cost_per_type.items()):
        print(f"delta cost {t:<9}{c:.4g} s/row")
    if profile.mem_per_row is not None:
        print(f"batch memory/row  {profile.mem_per_row:.1f} B")
    os.makedirs(eff["out_dir"], exist_ok=True)
    out = args.output or os.path.join(eff["out_dir"], "profile.json")
    with open(out, "w") as fh:
        json.dump(profile.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"profile written to {out}")
    return EXIT_OK


def _load_profile(cfg, base_dir):
    p = cfg.get("profile")
    if not p:
        return None
    p = p if os.path.isabs(p) else os.path.join(base_dir, p)
    try:
        with open(p) as fh:
            return PreflightProfile.from_dict(json.load(fh))
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"cannot load profile {p}: {exc}") from exc


def cmd_run(args):
    cfg = load_config(args.config)
    eff = effective_config(cfg, args)
    base = _base_dir(args.config)
    job = load_job(cfg, base)
    caps = resolve_caps(eff["caps"])
    params = _policy_params(eff["policy"])
    pol = eff["policy"]
    name = pol["name"].replace("-", "_")
    kw = dict(params.to_dict(), mem_cap=caps.mem_cap, cpu_cap=caps.cpu_cap, backend=eff["backend"],
              seed=int(eff["seed"]), profile=_load_profile(cfg, base))
    if name == "fixed":
        if pol.get("b") is None or pol.get("k") is None:
            raise UsageError("--policy fixed needs --b and --k")
        kw.update(policy="fixed", fixed_b=int(pol["b"]), fixed_k=int(pol["k"]))
    elif name == "two_stage":
        grid = pol.get("grid") or [(max(1, b), k) for b in (params.b_min, 4 * params.b_min, 16 * params.b_min)
                                   for k in sorted({1, max(1, caps.cpu_cap // 2), caps.cpu_cap})]
        kw.update(policy="two_stage", grid=[tuple(g) for g in grid],
                  warmup_fraction=pol.get("warmup_fraction", 0.1))
    elif name != "adaptive":
        raise UsageError(f"unknown policy {pol['name']!r}")
    if eff["backend"] == "sim":
        kw["sim"] = SimModel(**(cfg.get("sim") or {}))
    if "isolation" in cfg:
        kw["isolation"] = cfg["isolation"]

    est = AdaptiveScheduler(**kw)
    est.fit(job)
    threshold = params.kappa * caps.mem_cap
    cmp = "<=" if est.working_set_ <= threshold else ">"
    print(f"backend {est.gated_backend_}: working set {est.working_set_:.4g} B {cmp} "
          f"kappa*M_cap {threshold:.4g} B (executor {est.backend_})")
    print(f"start config b={est.start_config_[0]} k={est.start_config_[1]}")

    out_dir = eff["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    header_job = {"workload": os.path.basename(job.source.uri or "job"), "policy": PolicyKind(
        name, pol.get("b") and int(pol["b"]), pol.get("k") and int(pol["k"])).label,
        "rep": 0, "backend": est.gated_backend_, "executor": est.backend_}
    config = {**params.to_dict(), "mem_cap": caps.mem_cap, "cpu_cap": caps.cpu_cap, "backend": eff["backend"],
              "seed": eff["seed"], "policy": pol, "start_config": list(est.start_config_)}
    with TelemetryLog(os.path.join(out_dir, "telemetry.jsonl"), header_job, config) as sink:
        result = est.transform(job, sink=sink)
    if sink.errors:
        print(f"warning: {sink.errors} telemetry write(s) failed", file=sys.stderr)
    run = est.run_
    if run.failed:
        print(f"job failed: {run.oom_events} OOM event(s)", file=sys.stderr)
    if result is not None:
        write_verdicts(result, os.path.join(out_dir, "verdicts.jsonl"))
    summary = run.summary.to_dict() if run.summary else {}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    for key in ("job_p95", "job_p50", "peak_rss", "throughput", "reconfig_count", "oom_events", "wall_clock"):
        if key in summary:
            print(f"{key:<15}{summary[key]:.6g}" if isinstance(summary[key], float) else f"{key:<15}{summary[key]}")
    if result is not None:
        print("counts         " + json.dumps(result.counts))
    return EXIT_OK if not run.failed else EXIT_DATA


def _matrix_from_config(cfg):
    base = WorkloadSpec.from_mapping(cfg.get("workload") or {})
    ablations = cfg.get("ablations")
    if ablations == "all":
        ablations = ABLATION_AXES
    return scenario_matrix(base, sizes=tuple(cfg.get("sizes", DESK_SIZES)),
                           reference_sizes=tuple(cfg.get("reference_sizes", REFERENCE_SIZES)),
                           cores=int(cfg.get("cores", 32)),
                           policy=PolicyParams.from_mapping(cfg.get("policy") or {}),
                           ablations={k: tuple(v) for k, v in (ablations or {}).items()})


def cmd_bench(args):
    cfg = load_config(args.matrix)
    eff = effective_config(cfg, args)
    try:
        matrix = _matrix_from_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario matrix: {exc}") from None
    backend = eff["backend"] if eff["backend"] != "auto" else "sim"
    caps = desk_caps(matrix.scale, matrix.cores)
    if eff["caps"]:
        caps = ResourceCaps(parse_bytes(eff["caps"].get("mem", caps.mem_cap)),
                            int(eff["caps"].get("cpu", caps.cpu_cap)))
    reps = int(cfg.get("repetitions", 3))
    if reps < 3:
        raise UsageError("reported cells need at least 3 repetitions")
    out_dir = eff["out_dir"]
    reports = run_matrix(matrix, backend=backend, repetitions=reps, noisy=cfg.get("noisy", True),
                         log_dir=os.path.join(out_dir, "logs"), seed=int(eff["seed"]), caps=caps,
                         sim_overrides=cfg.get("sim"))
    units = dict(time_unit=cfg.get("time_unit", "ms"), mem_unit=cfg.get("mem_unit", "MB"),
                 precision=int(cfg.get("precision", 1)))
    for variant, report in reports.items():
        prefix = "" if variant == "baseline" else f"{variant.replace('=', '_')}__"
        write_report(report, out_dir, prefix=prefix, **units)
    baseline = reports.get("baseline") or next(iter(reports.values()))
    print(render_tables(baseline, **units))
    if len(reports) > 1:
        print("\nvariant reconfigs/job (adaptive, per workload):")
        for variant, report in reports.items():
            vals = [report.cell(w, "adaptive").reconfigs if report.cell(w, "adaptive") else float("nan")
                    for w in report.workloads]
            print(f"  {variant:<16}" + "  ".join(f"{v:.2f}" for v in vals))
    failed = sum(c.failed for r in reports.values() for c in r.cells.values())
    if failed:
        print(f"\n{failed} failed run(s) marked in the report", file=sys.stderr)
    print(f"\nreports and logs in {out_dir}")
    return EXIT_OK


def cmd_analyze(args):
    paths = list(args.logs)
    if args.fixture:
        paths.append(golden_fixture_path())
    if not paths:
        raise UsageError("no telemetry logs given")
    try:
        report = ExperimentReport.from_logs(paths, strict=args.strict)
    except OSError as exc:
        raise DataError(f"cannot read log: {exc}") from exc
    except LogFormatError as exc:
        raise DataError(str(exc)) from exc
    tables = render_tables(report, time_unit=args.time_unit, mem_unit=args.mem_unit, precision=args.precision)
    print(tables)
    try:
        rows = compare_policies(report)
    except ValueError:
        rows = None
    if rows:
        print()
        print(comparison_csv(rows), end="")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "tables.txt"), "w") as fh:
            fh.write(str(tables) + "\n")
        with open(os.path.join(args.out_dir, "report.csv"), "w") as fh:
            fh.write(report_csv(report))
        if rows:
            with open(os.path.join(args.out_dir, "comparison.csv"), "w") as fh:
                fh.write(comparison_csv(rows))
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p, caps=True):
    if caps:
        p.add_argument("--caps-mem", help="memory cap, e.g. 8GiB (env %s)" % ENV_MEM)
        p.add_argument("--caps-cpu", type=int, help="CPU cap in cores (env %s)" % ENV_CPU)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=["auto", "inmem", "taskpool", "sim"])
    p.add_argument("--out-dir", dest="out_dir")


def build_parser():
    parser = _Parser(prog="adaptdiff", description="Adaptive batch scheduling for table differencing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", help="pre-flight profile of a job")
    p.add_argument("config", help="job config (YAML)")
    p.add_argument("-o", "--output", help="profile file (default OUT_DIR/profile.json)")
    _add_common(p, caps=False)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("run", help="run one diff job")
    p.add_argument("config", help="job config (YAML)")
    p.add_argument("--policy", choices=["adaptive", "fixed", "two-stage"])
    p.add_argument("--b", type=int, help="batch size for --policy fixed")
    p.add_argument("--k", type=int, help="workers for --policy fixed")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a scenario matrix")
    p.add_argument("matrix", nargs="?", help="scenario matrix (YAML); default desk matrix")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="recompute tables from telemetry logs")
    p.add_argument("logs", nargs="*")
    p.add_argument("--fixture", action="store_true", help="include the packaged reference fixture")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.add_argument("--time-unit", choices=["s", "ms"], default="s")
    p.add_argument("--mem-unit", choices=["GB", "MB", "KB"], default="GB")
    p.add_argument("--precision", type=int, default=1)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"adaptdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adaptdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"adaptdiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InfeasibleJob as exc:
        print(f"adaptdiff: infeasible job: {exc}", file=sys.stderr)
        print("  the smallest configuration already exceeds the memory envelope; raise --caps-mem "
              "or lower b_min", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"adaptdiff: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
