import math
from dataclasses import fields

import numpy as np
import pytest

from adaptdiff import exec as ex
from adaptdiff.diffcore import JobSpec, merge_results, partition_job, reference_diff
from adaptdiff.exec import (
    BatchMetrics,
    JobError,
    SimBackend,
    SimModel,
    make_backend,
    simulate_batch,
    submit_batches,
    summarize_samples,
)
from adaptdiff.model import INMEM, SIMULATED, TASKPOOL
from adaptdiff.workload import generate_pair

from oracles import as_tuples


@pytest.fixture
def job(small_spec):
    a, b, _ = generate_pair(small_spec)
    return JobSpec(a, b)


def test_noiseless_sim_equals_truth():
    sim = SimModel(sigma=0.0, straggler_prob=0.0)
    m = simulate_batch(sim, 5000, 4, batch_id=3)
    assert m.latency == sim.truth_latency(5000, 4)
    assert m.rss_peak == sim.truth_rss(5000, 4)
    assert m.cpu_p95 == sim.truth_cpu(4)
    assert m.end - m.start == m.latency


def test_sim_deterministic_in_seed():
    sim = SimModel(sigma=0.3, straggler_prob=0.1, seed=42)
    a = [simulate_batch(sim, 1000 + i, 2, i).to_dict() for i in range(50)]
    b = [simulate_batch(sim, 1000 + i, 2, i).to_dict() for i in range(50)]
    assert a == b
    other = [simulate_batch(sim.with_noise(seed=43), 1000 + i, 2, i).latency for i in range(50)]
    assert other != [x["latency"] for x in a]


def test_lognormal_median_within_two_percent():
    sim = SimModel(sigma=0.1, straggler_prob=0.0, seed=5)
    truth = sim.truth_latency(1000, 1)
    ratios = [simulate_batch(sim, 1000, 1, i).latency / truth for i in range(10_000)]
    assert abs(np.median(ratios) - 1.0) <= 0.02


def test_straggler_factor_applied():
    sim = SimModel(sigma=0.0, straggler_prob=1.0, straggler_factor=3.0)
    assert simulate_batch(sim, 1000, 1, 0).latency == pytest.approx(3.0 * sim.truth_latency(1000, 1))


def test_batch_metrics_invariants():
    with pytest.raises(ValueError):
        BatchMetrics(0, start=2.0, end=1.0, latency=-1.0, rows=1, b=1, k=1, rss_peak=0, cpu_p95=0)
    with pytest.raises(ValueError):
        BatchMetrics(0, start=0.0, end=1.0, latency=1.0, rows=1, b=1, k=1, rss_peak=-1, cpu_p95=0)


def test_summarize_samples():
    assert summarize_samples([100e6, 200e6, 150e6], [0.5] * 10) == (200e6, 0.5)


def test_sim_oom_flagged_against_cap():
    sim = SimModel(sigma=0.0)
    be = SimBackend(sim, k=2, cpu_cap=4, mem_cap=sim.truth_rss(1000, 2) * 1.5)
    for bt in [ex.BatchDescriptor(i, i * 1000, (i + 1) * 1000, 1000) for i in range(2)]:
        be.submit(bt)
    done = [be.next_completion() for _ in range(2)]
    assert [c.metrics.oom for c in done].count(True) == 1
    assert be.oom_events == 1


@pytest.mark.parametrize("kind", [INMEM, TASKPOOL, SIMULATED])
def test_backends_match_reference(job, kind):
    expected = as_tuples(reference_diff(job))
    be = make_backend(kind, job, 2, 4, sim=SimModel(seed=1))
    try:
        out = list(submit_batches(be, partition_job(job, 40)))
    finally:
        be.close()
    assert len(out) == len(partition_job(job, 40))
    assert as_tuples(merge_results(r for r, _ in out)) == expected
    for _, m in out:
        d = m.to_dict()
        assert all(d[f.name] is not None for f in fields(BatchMetrics) if f.name != "true_mem_total")
        assert m.end >= m.start and m.rss_peak >= 0
        assert m.active_workers <= 2


def test_task_pool_in_processes(job):
    be = make_backend(TASKPOOL, job, 2, 2, isolation="process", task_overhead=0.0)
    try:
        out = list(submit_batches(be, partition_job(job, 100)))
    finally:
        be.close()
    assert as_tuples(merge_results(r for r, _ in out)) == as_tuples(reference_diff(job))
    assert all(m.rss_peak > 0 and not m.rss_attributed for _, m in out)


def test_serial_completion_order(job):
    be = make_backend(INMEM, job, 1, 4)
    try:
        ids = [m.batch_id for _, m in submit_batches(be, partition_job(job, 30))]
    finally:
        be.close()
    assert ids == sorted(ids)


def test_retry_then_succeed(job, monkeypatch):
    real = ex.diff_batch
    failures = {"left": 2}

    def flaky(j, batch):
        if batch.batch_id == 1 and failures["left"]:
            failures["left"] -= 1
            raise OSError("transient read failure")
        return real(j, batch)

    monkeypatch.setattr(ex, "diff_batch", flaky)
    be = make_backend(INMEM, job, 2, 4)
    try:
        out = list(submit_batches(be, partition_job(job, 50)))
    finally:
        be.close()
    assert as_tuples(merge_results(r for r, _ in out)) == as_tuples(reference_diff(job))
    assert max(m.attempt for _, m in out if m.batch_id == 1) == 2


def test_repeated_failure_is_job_error(job, monkeypatch):
    def broken(j, batch):
        raise OSError("disk gone")

    monkeypatch.setattr(ex, "diff_batch", broken)
    be = make_backend(INMEM, job, 1, 4)
    try:
        with pytest.raises(JobError, match="batch 0"):
            list(submit_batches(be, partition_job(job, 50)))
    finally:
        be.close()


def test_resize_applies_to_later_batches_only():
    sim = SimModel(sigma=0.0)
    be = SimBackend(sim, k=4, cpu_cap=8)
    for i in range(10):
        be.submit(ex.BatchDescriptor(i, i * 100, (i + 1) * 100, 100))
    assert be.active == 4
    be.resize(2)
    assert be.active == 4  # in-flight batches keep running
    seen = []
    while True:
        c = be.next_completion()
        if c is None:
            break
        seen.append(be.active)
    assert seen[:3] == [3, 2, 2]
    assert max(seen[2:]) <= 2


def test_resize_rejects_out_of_range():
    be = SimBackend(SimModel(), k=2, cpu_cap=4)
    with pytest.raises(ValueError):
        be.resize(5)
    with pytest.raises(ValueError):
        be.resize(0)
    be.resize(2)
    assert be.k == 2


def test_taskpool_mode_drops_shared_heap():
    sim = SimModel(shared_bytes=1e9, sigma=0.0)
    pool = SimBackend(sim, k=1, cpu_cap=1, mode=TASKPOOL)
    heap = SimBackend(sim, k=1, cpu_cap=1, mode=INMEM)
    assert pool.sim.shared_bytes == 0
    assert pool.sim.truth_latency(1000, 1) > heap.sim.truth_latency(1000, 1)


def test_cancel_drops_running_duplicate():
    be = SimBackend(SimModel(sigma=0.0), k=2, cpu_cap=2)
    bt = ex.BatchDescriptor(0, 0, 100, 100)
    be.submit(bt)
    be.submit(bt, attempt=1)
    be.cancel(0, attempt=1)
    first = be.next_completion()
    assert first.attempt == 0
    assert be.next_completion() is None
    assert math.isfinite(first.metrics.latency)
