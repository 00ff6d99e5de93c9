"""Baseline policies on shared jobs, repeated runs, and Table-shaped reports."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import statistics
from dataclasses import dataclass, field, replace

from .controller import InfeasibleJob
from .diffcore import JobSpec
from .exec import SimModel
from .model import GiB, PolicyParams, ResourceCaps
from .scheduler import AdaptiveScheduler
from .telemetry import TelemetryLog, confidence_interval, job_summary, read_log
from .workload import ScenarioMatrix, WorkloadSpec, generate_pair

log = logging.getLogger(__name__)

ADAPTIVE, FIXED, TWO_STAGE = "adaptive", "fixed", "two_stage"
REFERENCE_MEM_CAP = 64 * GiB
REFERENCE_CORES = 32
# resident copy of both tables under the shared-heap backend, per raw byte
RESIDENT_FACTOR = 1.5

TIME_UNITS = {"s": 1.0, "ms": 1e-3}
MEM_UNITS = {"GB": 1e9, "MB": 1e6, "KB": 1e3}


@dataclass(frozen=True)
class PolicyKind:
    kind: str
    b: int | None = None
    k: int | None = None
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in (ADAPTIVE, FIXED, TWO_STAGE):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == FIXED and (self.b is None or self.k is None):
            raise ValueError("a fixed policy needs b and k")

    @classmethod
    def adaptive(cls):
        return cls(ADAPTIVE)

    @classmethod
    def fixed(cls, b, k):
        return cls(FIXED, int(b), int(k))

    @classmethod
    def two_stage(cls, warmup_fraction=0.1):
        return cls(TWO_STAGE, warmup_fraction=warmup_fraction)

    @property
    def label(self):
        if self.kind == FIXED:
            return f"fixed(b={self.b},k={self.k})"
        return self.kind

    @staticmethod
    def parse(label):
        if label in (ADAPTIVE, TWO_STAGE):
            return PolicyKind(label)
        if label.startswith("fixed(") and label.endswith(")"):
            parts = dict(p.split("=") for p in label[6:-1].split(","))
            return PolicyKind.fixed(parts["b"], parts["k"])
        raise ValueError(f"unrecognised policy label {label!r}")


def desk_sim(rows_per_side, scale=0.01, noisy=True, seed=0, **overrides) -> SimModel:
    """The reference machine shrunk to desk scale, for a job of ``rows_per_side``."""
    base = SimModel(seed=seed, **overrides)
    if not noisy:
        base = base.with_noise(sigma=0.0, straggler_prob=0.0)
    elif "straggler_prob" not in overrides:
        base = base.with_noise(straggler_prob=0.02)
    base = base.scaled(scale)
    return replace(base, shared_bytes=RESIDENT_FACTOR * base.bytes_per_row * 2 * rows_per_side)


def desk_caps(scale=0.01, cores=REFERENCE_CORES) -> ResourceCaps:
    return ResourceCaps(mem_cap=REFERENCE_MEM_CAP * scale, cpu_cap=cores)


def _estimator(policy: PolicyKind, params: PolicyParams, caps, backend, sim, grid, seed, isolation):
    kw = dict(params.to_dict(), mem_cap=caps.mem_cap, cpu_cap=caps.cpu_cap, backend=backend, seed=seed,
              isolation=isolation)
    if sim is not None:
        kw.update(sim=sim, mem_beta0=sim.beta0)
    if policy.kind == FIXED:
        kw.update(policy=FIXED, fixed_b=policy.b, fixed_k=min(policy.k, caps.cpu_cap))
    elif policy.kind == TWO_STAGE:
        kw.update(policy=TWO_STAGE, grid=grid, warmup_fraction=policy.warmup_fraction)
    return AdaptiveScheduler(**kw)


def run_policy(job: WorkloadSpec, policy: PolicyKind, backend="sim", repetitions=3, *,
               params: PolicyParams | None = None, caps: ResourceCaps | None = None, sim: SimModel | None = None,
               grid=None, log_path=None, seed=0, meta=None, isolation="thread"):
    """Run ``job`` under ``policy`` ``repetitions`` times; one JobSummary per run.

    On the simulator each repetition reseeds the noise. An OOM marks that run
    failed (its summary has ``oom_events > 0``) and the next repetition still
    runs. An infeasible job yields no summary for that repetition.
    """
    params = params or PolicyParams()
    caps = caps or desk_caps()
    if backend in ("sim", "simulated"):
        sim = sim or desk_sim(job.rows_per_side)
        job_arg = job.rows_per_side + job.n_added
    else:
        a, b, _ = generate_pair(job)
        job_arg = JobSpec(a, b)
    summaries = []
    mode = "a"
    if log_path is not None and not os.path.exists(log_path):
        mode = "w"
    for rep in range(repetitions):
        rep_sim = sim.with_noise(seed=seed + rep) if sim is not None and backend in ("sim", "simulated") else None
        est = _estimator(policy, params, caps, backend, rep_sim, grid, seed + rep, isolation)
        try:
            est.fit(job_arg)
        except InfeasibleJob as exc:
            log.warning("%s %s rep %d infeasible: %s", job.name, policy.label, rep, exc)
            continue
        sink = None
        if log_path is not None:
            header_job = dict(meta or {}, workload=job.name or str(job.rows_per_side), policy=policy.label,
                              rep=rep, rows_per_side=job.rows_per_side, backend=est.gated_backend_,
                              executor=est.backend_)
            config = dict(params.to_dict(), mem_cap=caps.mem_cap, cpu_cap=caps.cpu_cap,
                          start_config=list(est.start_config_))
            sink = TelemetryLog(log_path, header_job, config, mode=mode)
            mode = "a"
        try:
            est.transform(job_arg, sink=sink)
        except InfeasibleJob as exc:
            log.warning("%s %s rep %d became infeasible: %s", job.name, policy.label, rep, exc)
            continue
        finally:
            if sink is not None:
                sink.close()
        s = est.run_.summary
        s.backend = est.run_.backend
        summaries.append(s)
    return summaries


# ---------------------------------------------------------------- reports


def _mean_ci(values):
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return math.nan, math.nan
    if len(values) < 2:
        return values[0], math.nan
    return confidence_interval(values)


@dataclass
class Cell:
    workload: str
    policy: str
    summaries: list = field(default_factory=list)
    backend: str = ""

    @property
    def ok(self):
        return [s for s in self.summaries if s.oom_events == 0]

    @property
    def failed(self):
        return len(self.summaries) - len(self.ok)

    @property
    def p95(self):
        return _mean_ci([s.job_p95 for s in self.ok])

    @property
    def peak_rss(self):
        return _mean_ci([s.peak_rss for s in self.ok])

    @property
    def throughput(self):
        return _mean_ci([s.throughput for s in self.ok])[0]

    @property
    def reconfigs(self):
        vals = [s.reconfig_count for s in self.summaries]
        return statistics.fmean(vals) if vals else math.nan

    @property
    def oom_events(self):
        return sum(s.oom_events for s in self.summaries)


@dataclass
class ExperimentReport:
    """Cells keyed by (workload, policy label); workloads keep insertion order."""

    cells: dict = field(default_factory=dict)
    workloads: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, workload, policy, summaries, backend=""):
        if workload not in self.workloads:
            self.workloads.append(workload)
        cell = self.cells.setdefault((workload, policy), Cell(workload, policy, backend=backend))
        cell.summaries.extend(summaries)
        if backend and not cell.backend:
            cell.backend = backend
        return cell

    def cell(self, workload, policy):
        return self.cells.get((workload, policy))

    def policies(self, workload):
        return [p for (w, p) in self.cells if w == workload]

    def fixed_cells(self, workload):
        cells = [self.cells[(workload, p)] for p in self.policies(workload) if p.startswith(FIXED)]
        return sorted((c for c in cells if c.ok), key=lambda c: (c.p95[0], c.policy))

    def best_fixed(self, workload):
        cells = self.fixed_cells(workload)
        return cells[0] if cells else None

    def median_fixed(self, workload):
        """The middle fixed configuration by mean p95 (lower middle for an even count)."""
        cells = self.fixed_cells(workload)
        return cells[(len(cells) - 1) // 2] if cells else None

    def backend(self, workload):
        c = self.cell(workload, ADAPTIVE)
        if c is not None and c.backend:
            return c.backend
        for p in self.policies(workload):
            if self.cells[(workload, p)].backend:
                return self.cells[(workload, p)].backend
        return ""

    def to_rows(self):
        rows = []
        for (w, p), c in self.cells.items():
            p95, p95_ci = c.p95
            mem, mem_ci = c.peak_rss
            rows.append({"workload": w, "policy": p, "runs": len(c.summaries), "failed": c.failed,
                         "p95_mean": p95, "p95_ci": p95_ci, "peak_rss_mean": mem, "peak_rss_ci": mem_ci,
                         "throughput": c.throughput, "reconfigs": c.reconfigs, "oom_events": c.oom_events,
                         "backend": c.backend})
        return rows

    @classmethod
    def from_sections(cls, sections):
        """Rebuild a report from telemetry log sections (pure in the logs)."""
        report = cls()
        sizes = {}
        for sec in sections:
            if not sec.records:
                continue
            job = sec.job
            sizes.setdefault(str(job.get("workload", "?")), job.get("rows_per_side", math.inf))
            window = sec.header.get("config", {}).get("percentile_window", 20)
            summary = job_summary(sec.records, percentile_window=window)
            summary.backend = job.get("backend", "")
            report.add(str(job.get("workload", "?")), str(job.get("policy", "?")), [summary], summary.backend)
        report.workloads.sort(key=lambda w: (sizes[w], w))
        return report

    @classmethod
    def from_logs(cls, paths, strict=False):
        sections = []
        for p in paths:
            sections.extend(read_log(p, strict=strict))
        return cls.from_sections(sections)


def relative_improvement(base, new):
    """Percentage by which ``new`` is lower than ``base``."""
    if base == 0:
        return 0.0 if new == 0 else -math.inf
    return 100.0 * (base - new) / base


def compare_policies(report: ExperimentReport):
    """Adaptive against the heuristic, the best fixed and the median fixed config, per workload.

    p95 and memory deltas are reductions (positive = adaptive lower);
    throughput is the relative gain of adaptive.
    """
    rows = []
    missing = []
    for w in report.workloads:
        ad = report.cell(w, ADAPTIVE)
        bases = {"heuristic": report.cell(w, TWO_STAGE), "best_fixed": report.best_fixed(w),
                 "median_fixed": report.median_fixed(w)}
        if ad is None or not ad.ok:
            missing.append((w, ADAPTIVE))
            continue
        for name, base in bases.items():
            if base is None:
                missing.append((w, name))
                continue
            rows.append({
                "workload": w, "baseline": name, "baseline_policy": base.policy,
                "p95_improvement_pct": relative_improvement(base.p95[0], ad.p95[0]),
                "mem_reduction_pct": relative_improvement(base.peak_rss[0], ad.peak_rss[0]),
                "throughput_gain_pct": -relative_improvement(base.throughput, ad.throughput),
            })
    if missing:
        raise ValueError(f"policies missing for some workloads: {missing}")
    return rows


# ---------------------------------------------------------------- rendering


@dataclass
class RenderedTables:
    p95: str
    memory: str
    throughput: str

    def __str__(self):
        return "\n\n".join((self.p95, self.memory, self.throughput))


def _fmt(value, precision):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{precision}f}"


def _fmt_ci(mean_ci, scale, precision):
    m, h = mean_ci
    if math.isnan(m):
        return "failed"
    if math.isnan(h):
        return _fmt(m / scale, precision)
    return f"{_fmt(m / scale, precision)} ± {_fmt(h / scale, precision)}"


def _fmt_count(v):
    if math.isnan(v):
        return "-"
    return str(int(v)) if float(v).is_integer() else f"{v:.1f}"


def _table(title, header, rows):
    lines = [title, " | ".join(header), " | ".join("---" for _ in header)]
    lines.extend(" | ".join(r) for r in rows)
    return "\n".join(lines)


def _columns(report, w):
    fixed = report.median_fixed(w)
    return fixed, report.cell(w, TWO_STAGE), report.cell(w, ADAPTIVE)


def render_tables(report: ExperimentReport, time_unit="s", mem_unit="GB", precision=1) -> RenderedTables:
    """p95, peak memory and throughput/stability tables.

    The Fixed column is the median fixed configuration per workload.
    """
    ts, ms = TIME_UNITS[time_unit], MEM_UNITS[mem_unit]
    p95_rows, mem_rows, thr_rows = [], [], []
    for w in report.workloads:
        cols = _columns(report, w)
        p95_rows.append([w] + [_fmt_ci(c.p95, ts, precision) if c else "-" for c in cols]
                        + [report.backend(w) or "-"])
        mem_rows.append([w] + [_fmt_ci(c.peak_rss, ms, precision) if c else "-" for c in cols])
        ad = cols[2]
        thr_rows.append([w] + [_fmt(c.throughput / 1e3, precision) if c else "-" for c in cols]
                        + [_fmt_count(ad.reconfigs) if ad else "-"])
    return RenderedTables(
        _table(f"p95 latency ({time_unit}), mean ± 95% CI", ["Workload", "Fixed", "Heur.", "Adaptive", "Backend"],
               p95_rows),
        _table(f"Peak memory ({mem_unit}), mean ± 95% CI", ["Workload", "Fixed", "Heur.", "Adaptive"], mem_rows),
        _table("Throughput (k rows/s) and reconfigs/job", ["Workload", "Fixed", "Heur.", "Adaptive", "Reconfigs"],
               thr_rows),
    )


def report_csv(report: ExperimentReport) -> str:
    fields = ["workload", "policy", "runs", "failed", "p95_mean", "p95_ci", "peak_rss_mean", "peak_rss_ci",
              "throughput", "reconfigs", "oom_events", "backend"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in report.to_rows():
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def comparison_csv(rows) -> str:
    fields = ["workload", "baseline", "baseline_policy", "p95_improvement_pct", "mem_reduction_pct",
              "throughput_gain_pct"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_report(report: ExperimentReport, out_dir, prefix="", **render_kw):
    """Write tables.txt, report.csv and (when complete) comparison.csv; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    tables = render_tables(report, **render_kw)
    paths["tables"] = os.path.join(out_dir, f"{prefix}tables.txt")
    with open(paths["tables"], "w") as fh:
        fh.write(str(tables) + "\n")
    paths["report"] = os.path.join(out_dir, f"{prefix}report.csv")
    with open(paths["report"], "w") as fh:
        fh.write(report_csv(report))
    try:
        rows = compare_policies(report)
    except ValueError as exc:
        log.warning("comparison skipped: %s", exc)
    else:
        paths["comparison"] = os.path.join(out_dir, f"{prefix}comparison.csv")
        with open(paths["comparison"], "w") as fh:
            fh.write(comparison_csv(rows))
    return paths


# ---------------------------------------------------------------- matrix runner


def run_matrix(matrix: ScenarioMatrix, *, backend="sim", repetitions=3, noisy=True, log_dir=None,
               baselines=True, variants=None, seed=0, caps=None, sim_overrides=None):
    """Run every scenario; returns {variant: ExperimentReport}.

    Fixed-grid and two-stage baselines do not depend on the policy variant,
    so they run once per workload and are shared by every variant's report.
    """
    caps = caps or desk_caps(matrix.scale, matrix.cores)
    names = list(variants or matrix.variants)
    reports = {v: ExperimentReport(meta=dict(matrix.meta, variant=v)) for v in names}

    def logp(label, w, variant):
        if log_dir is None:
            return None
        os.makedirs(log_dir, exist_ok=True)
        safe = label.replace("(", "_").replace(")", "").replace(",", "_").replace("=", "")
        return os.path.join(log_dir, f"{variant}__{w.name}__{safe}.jsonl")

    for w in matrix.workloads:
        sim = desk_sim(w.rows_per_side, matrix.scale, noisy=noisy, **(sim_overrides or {})) \
            if backend in ("sim", "simulated") else None
        common = dict(backend=backend, repetitions=repetitions, caps=caps, sim=sim, grid=matrix.grid, seed=seed,
                      meta={"scale": matrix.scale})
        shared = []
        if baselines:
            base_params = matrix.variants["baseline"]
            for b, k in matrix.grid:
                pk = PolicyKind.fixed(b, k)
                shared.append((pk.label, run_policy(w, pk, params=base_params,
                                                    log_path=logp(pk.label, w, "baseline"), **common)))
            pk = PolicyKind.two_stage()
            shared.append((pk.label, run_policy(w, pk, params=base_params,
                                                log_path=logp(pk.label, w, "baseline"), **common)))
        for v in names:
            params = matrix.variants[v]
            summaries = run_policy(w, PolicyKind.adaptive(), params=params,
                                   log_path=logp(ADAPTIVE, w, v), **common)
            rep = reports[v]
            rep.add(w.name, ADAPTIVE, summaries, summaries[0].backend if summaries else "")
            for label, ss in shared:
                rep.add(w.name, label, ss, ss[0].backend if ss else "")
    return reports
