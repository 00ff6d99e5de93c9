"""Batch-level telemetry: records, the on-disk log, and job summaries.

Log format: JSON lines. A header line (``"format": "adaptdiff-telemetry"``)
opens each job section and carries the schema version, field names, job
metadata and the effective configuration; every following line is one
record. Sections can be concatenated into one file.
"""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields

from scipy import stats

from .model import windowed_percentile

log = logging.getLogger(__name__)

LOG_FORMAT = "adaptdiff-telemetry"
SCHEMA_VERSION = 1


class LogFormatError(Exception):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class TelemetryRecord:
    job_id: str
    batch_id: int
    start: float
    end: float
    latency: float
    rows: int
    b: int
    k: int
    rss_peak: float
    cpu_p95: float
    bytes_read: float = 0.0
    queue_depth_at_submit: int = 0
    worker_id: str = ""
    active_workers: int = 1
    attempt: int = 0
    rss_attributed: bool = False
    oom: bool = False
    backend: str = ""
    action: str = "hold"
    reason: str = ""
    new_b: int = 0
    new_k: int = 0
    h_mem: float | None = None
    h_cpu: float | None = None
    triggers: list = field(default_factory=list)
    reconfig_count: int = 0
    paused: bool = False

    @classmethod
    def from_cycle(cls, m, decision, *, job_id, backend, reconfig_count=0, paused=False):
        h = decision.headrooms
        return cls(job_id=job_id, batch_id=m.batch_id, start=m.start, end=m.end, latency=m.latency,
                   rows=m.rows, b=m.b, k=m.k, rss_peak=m.rss_peak, cpu_p95=m.cpu_p95,
                   bytes_read=m.bytes_read, queue_depth_at_submit=m.queue_depth_at_submit,
                   worker_id=m.worker_id, active_workers=m.active_workers, attempt=m.attempt,
                   rss_attributed=m.rss_attributed, oom=m.oom, backend=backend,
                   action=decision.action, reason=decision.reason, new_b=decision.new_b,
                   new_k=decision.new_k, h_mem=None if h is None else h[0],
                   h_cpu=None if h is None else h[1], triggers=list(decision.triggers),
                   reconfig_count=reconfig_count, paused=paused)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown record fields {sorted(unknown)}")
        return cls(**d)


FIELD_NAMES = [f.name for f in fields(TelemetryRecord)]


def make_header(job=None, config=None):
    return {"format": LOG_FORMAT, "version": SCHEMA_VERSION, "fields": FIELD_NAMES,
            "job": dict(job or {}), "config": dict(config or {})}


class TelemetryLog:
    """Append-only writer for one job section.

    Write failures are logged and counted but never raised: telemetry is
    best-effort and must not abort the job it describes.
    """

    def __init__(self, path, job=None, config=None, mode="w"):
        self.path = os.fspath(path)
        self.errors = 0
        self.count = 0
        self._fh = None
        try:
            self._fh = open(self.path, mode)
            self._write(make_header(job, config))
        except OSError as exc:
            self._fail(exc)

    def _fail(self, exc):
        self.errors += 1
        log.warning("telemetry write to %s failed: %s", self.path, exc)

    def _write(self, obj):
        self._fh.write(json.dumps(obj, sort_keys=False) + "\n")
        self._fh.flush()

    def append(self, record: TelemetryRecord):
        if self._fh is None:
            self.errors += 1
            return False
        try:
            self._write(record.to_dict())
        except OSError as exc:
            self._fail(exc)
            return False
        self.count += 1
        return True

    def close(self):
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError as exc:
                self._fail(exc)
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class LogSection:
    header: dict
    records: list = field(default_factory=list)

    @property
    def job(self):
        return self.header.get("job", {})


def read_log(path, strict=False):
    """Parse a telemetry file into sections.

    Malformed lines raise ``LogFormatError`` in strict mode; otherwise they are
    skipped with a warning naming the line. A version mismatch always raises.
    """
    sections = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
                if obj.get("format") == LOG_FORMAT:
                    if obj.get("version") != SCHEMA_VERSION:
                        raise LogFormatError(
                            f"schema version {obj.get('version')} in log, reader supports {SCHEMA_VERSION}", lineno)
                    sections.append(LogSection(obj))
                    continue
                if not sections:
                    raise ValueError("record before any header")
                sections[-1].records.append(TelemetryRecord.from_dict(obj))
            except LogFormatError:
                raise
            except (ValueError, TypeError) as exc:
                if strict:
                    raise LogFormatError(f"malformed record: {exc}", lineno) from None
                warnings.warn(f"{path}:{lineno}: skipping malformed line ({exc})")
    return sections


@dataclass
class JobSummary:
    job_p95: float
    job_p50: float
    peak_rss: float
    peak_rss_total: float
    throughput: float
    reconfig_count: int
    oom_events: int
    wall_clock: float
    rows: int
    batches: int
    backend: str = ""

    def to_dict(self):
        return asdict(self)


def _weighted_window_percentile(records, q, window):
    total_w = 0
    acc = 0.0
    for i in range(0, len(records), window):
        chunk = records[i:i + window]
        w = sum(r.rows for r in chunk) or len(chunk)
        acc += w * windowed_percentile([r.end for r in chunk], q)
        total_w += w
    return acc / total_w


def job_summary(records, policy=None, percentile_window=None) -> JobSummary:
    """Aggregate one job's records.

    A batch's latency here is its response time: completion measured from job
    admission (``end``). Records are cut into consecutive windows of
    ``percentile_window``; each window's nearest-rank p95 is averaged with
    weights equal to the rows it covers.
    """
    records = list(records)
    if not records:
        raise ValueError("job_summary of an empty record set")
    window = percentile_window or (policy.percentile_window if policy is not None else 20)
    rows = sum(r.rows for r in records)
    wall = max(r.end for r in records)
    return JobSummary(
        job_p95=_weighted_window_percentile(records, 0.95, window),
        job_p50=_weighted_window_percentile(records, 0.50, window),
        peak_rss=max(r.rss_peak for r in records),
        peak_rss_total=max(r.rss_peak * r.active_workers for r in records),
        throughput=rows / wall if wall > 0 else math.inf,
        reconfig_count=max(r.reconfig_count for r in records),
        oom_events=sum(1 for r in records if r.oom),
        wall_clock=wall,
        rows=rows,
        batches=len(records),
        backend=records[0].backend,
    )


def confidence_interval(samples, level=0.95):
    """Mean and Student-t half-width."""
    samples = [float(s) for s in samples]
    n = len(samples)
    if n < 2:
        raise ValueError("a confidence interval needs at least 2 samples")
    mean = sum(samples) / n
    var = sum((s - mean) ** 2 for s in samples) / (n - 1)
    half = stats.t.ppf(0.5 + level / 2, n - 1) * math.sqrt(var / n)
    return mean, float(half)
