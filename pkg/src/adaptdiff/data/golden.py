"""Builder for the packaged reference log.

The log holds three runs per (workload, policy) whose job summaries, once
aggregated, give back published per-cell means and 95% half-widths. Each run
is one window of 20 batch records: 19 finish at the run's p95 and the last
at the wall-clock time implied by the published throughput. Rows count both
sides, so the wall clock always exceeds the p95.
"""
from __future__ import annotations

import math

from scipy import stats

from ..telemetry import TelemetryLog, TelemetryRecord

BATCHES = 20
GB = 1e9

WORKLOADS = (("1M", 1_000_000, "inmem"), ("5M", 5_000_000, "inmem"),
             ("10M", 10_000_000, "taskpool"), ("20M", 20_000_000, "taskpool"))

# (mean, half-width) per workload, in the order of WORKLOADS
P95 = {
    "fixed(b=100000,k=8)": ((21.7, 0.6), (83.5, 2.1), (186.2, 3.9), (401.7, 7.8)),
    "two_stage": ((18.2, 0.5), (72.9, 1.9), (161.4, 3.4), (336.2, 6.5)),
    "adaptive": ((13.9, 0.4), (53.8, 1.4), (115.6, 2.6), (242.7, 4.8)),
}
PEAK_GB = {
    "fixed(b=100000,k=8)": ((9.6, 0.2), (34.2, 0.7), (41.8, 0.9), (53.1, 1.1)),
    "two_stage": ((8.4, 0.2), (30.6, 0.6), (36.4, 0.8), (47.3, 0.9)),
    "adaptive": ((7.1, 0.2), (23.9, 0.5), (28.6, 0.7), (39.7, 0.9)),
}
THROUGHPUT_K = {
    "fixed(b=100000,k=8)": (74.1, 71.5, 66.4, 60.2),
    "two_stage": (76.3, 72.0, 68.8, 62.5),
    "adaptive": (78.8, 73.9, 69.1, 62.0),
}
RECONFIGS = {"fixed(b=100000,k=8)": (0, 0, 0, 0), "two_stage": (1, 1, 1, 1), "adaptive": (5, 7, 9, 10)}


def spread(mean, half, n=3, level=0.95):
    """n=3 samples (mean-d, mean, mean+d) whose Student-t half-width is ``half``."""
    t = stats.t.ppf(0.5 + level / 2, n - 1)
    d = half * math.sqrt(n) / t
    return (mean - d, mean, mean + d)


def _records(job_id, rows_per_side, p95, peak, thr, reconfigs, backend):
    total = 2 * rows_per_side
    per = total // BATCHES
    wall = total / (thr * 1e3)
    out = []
    for i in range(BATCHES):
        end = wall if i == BATCHES - 1 else p95
        start = end / 2
        out.append(TelemetryRecord(
            job_id=job_id, batch_id=i, start=start, end=end, latency=end - start, rows=per, b=per, k=8,
            rss_peak=peak * GB, cpu_p95=0.8, bytes_read=0.0, worker_id=f"w{i % 8}", active_workers=8,
            backend=backend, reconfig_count=round(reconfigs * (i + 1) / BATCHES)))
    return out


def write_fixture(path):
    with open(path, "w"):
        pass
    for wi, (name, rows, backend) in enumerate(WORKLOADS):
        for policy in P95:
            p95s = spread(*P95[policy][wi])
            peaks = spread(*PEAK_GB[policy][wi])
            for rep in range(3):
                job = {"workload": name, "policy": policy, "rep": rep, "rows_per_side": rows, "backend": backend}
                with TelemetryLog(path, job, {"percentile_window": BATCHES}, mode="a") as sink:
                    for rec in _records(f"{name}-{policy}-{rep}", rows, p95s[rep], peaks[rep],
                                        THROUGHPUT_K[policy][wi], RECONFIGS[policy][wi], backend):
                        sink.append(rec)
