import os

import pytest
from hypothesis import HealthCheck, settings

from adaptdiff.controller import AdaptiveController
from adaptdiff.exec import BatchMetrics
from adaptdiff.model import CostModel, MemModel, PolicyParams, PreflightProfile, ResourceCaps
from adaptdiff.workload import WorkloadSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

MB = 1_000_000


def make_profile(w=100.0, bw=1e8, delta=2e-6):
    return PreflightProfile(bytes_per_row=w, read_bandwidth=bw, delta_cost_per_type={"integer": delta})


def make_controller(mem_cap=4e9, cpu_cap=8, total_rows=None, beta0=16 * MB, beta1=2.0, **policy_kw):
    policy_kw.setdefault("delta_prior", 64 * MB)
    policy = PolicyParams(**policy_kw)
    caps = ResourceCaps(mem_cap, cpu_cap)
    profile = make_profile()
    cost = CostModel(profile).fit()
    mem = MemModel(profile, beta0=beta0, beta1=beta1).fit()
    return AdaptiveController(policy, caps, profile, cost, mem, total_rows=total_rows)


def metrics_at(b, k, *, latency=1.0, rss_total=0.0, cpu_total=0.0, batch_id=0, depth=0):
    """One completed batch at (b, k) with totals spread over k workers."""
    return BatchMetrics(batch_id=batch_id, start=0.0, end=latency, latency=latency, rows=b, b=b, k=k,
                        rss_peak=rss_total / k, cpu_p95=cpu_total / k, queue_depth_at_submit=depth,
                        active_workers=k)


@pytest.fixture
def small_spec():
    return WorkloadSpec(rows_per_side=300, seed=11, change_rate=0.05, add_rate=0.02, remove_rate=0.02)


# acceptance criteria register their outcome here; printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status}: {name}" + (f" ({detail})" if detail else ""))
