"""End-to-end job execution: profile, gate, then drive batches through a backend.

``AdaptiveScheduler`` follows the estimator conventions: constructor arguments
are hyperparameters, ``fit(job)`` profiles the job and chooses the backend,
``transform(job)`` runs it and returns the merged diff. Fixed and two-stage
baselines plug into the same loop through ``run_job``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .controller import (
    HOLD,
    NONE,
    SPLIT,
    AdaptiveController,
    ControlDecision,
    InfeasibleJob,
    mitigate_straggler,
)
from .diffcore import BatchDescriptor, DiffResult, JobSpec, merge_results, preflight_profile
from .exec import MAX_RETRIES, JobError, SimModel, make_backend
from .model import (
    GiB,
    INMEM,
    MiB,
    SIMULATED,
    TASKPOOL,
    CostModel,
    GateInputs,
    MemModel,
    PolicyParams,
    PreflightProfile,
    ResourceCaps,
    estimate_working_set,
    select_backend,
    windowed_percentile,
)
from .telemetry import TelemetryRecord, job_summary

log = logging.getLogger(__name__)

POLL_INTERVAL = 0.05


# ---------------------------------------------------------------- baselines


class FixedPolicy:
    """Constant (b, k); never reconfigures."""

    name = "fixed"

    def __init__(self, b, k):
        self.b, self.k = int(b), int(k)
        self.paused = False
        self.reconfig_count = 0

    @property
    def config(self):
        return self.b, self.k

    def on_submit(self, batch):
        pass

    def window_p50(self):
        return None

    def step(self, m):
        return ControlDecision(self.b, self.k, HOLD, "fixed")


class TwoStagePolicy:
    """Warm-up grid, then lock the best configuration for the rest of the job.

    The first ``warmup_fraction`` of rows is split evenly over the grid; each
    grid point runs its share in turn (at least one batch). Once every warm-up
    batch has finished, the configuration with the lowest projected job tail
    (p95 batch latency * remaining waves) is locked. Only the lock counts as a
    reconfiguration.
    """

    name = "two_stage"

    def __init__(self, grid, total_rows, warmup_fraction=0.1):
        if not grid:
            raise ValueError("two-stage heuristic needs a non-empty grid")
        self.grid = [tuple(map(int, g)) for g in grid]
        self.total_rows = total_rows
        self.warmup_rows = max(1, math.ceil(warmup_fraction * total_rows))
        self.share = max(1, self.warmup_rows // len(self.grid))
        self.phase = 0
        self.phase_rows = 0
        self.submitted_rows = 0
        self.outstanding = set()
        self.latencies = {g: [] for g in self.grid}
        self.locked = None
        self.reconfig_count = 0

    @property
    def config(self):
        if self.locked is not None:
            return self.locked
        return self.grid[min(self.phase, len(self.grid) - 1)]

    @property
    def warming(self):
        return self.locked is None and self.phase < len(self.grid)

    @property
    def paused(self):
        # the lock waits for every warm-up batch to report
        return self.locked is None and self.phase >= len(self.grid) and bool(self.outstanding)

    def on_submit(self, batch):
        self.submitted_rows += batch.rows
        if self.locked is not None:
            return
        self.outstanding.add(batch.batch_id)
        self.phase_rows += batch.rows
        if self.phase_rows >= self.share:
            self.phase += 1
            self.phase_rows = 0
        if self.phase >= len(self.grid) and not self.outstanding:
            self._lock()

    def window_p50(self):
        return None

    def _lock(self):
        remaining = max(self.total_rows - self.submitted_rows, 1)
        best, best_score = None, math.inf
        for (b, k), lats in self.latencies.items():
            if not lats:
                continue
            score = windowed_percentile(lats, 0.95) * math.ceil(remaining / (b * k))
            if score < best_score:
                best, best_score = (b, k), score
        # the sweep is a measurement schedule; the lock is the one reconfiguration
        self.locked = best or self.grid[-1]
        self.reconfig_count = 1

    def step(self, m):
        if self.locked is None:
            if m.config in self.latencies:
                self.latencies[m.config].append(m.latency)
            self.outstanding.discard(m.batch_id)
            if self.phase >= len(self.grid) and not self.outstanding:
                self._lock()
                return ControlDecision(*self.locked, "lock", f"locked {self.locked}")
        b, k = self.config
        return ControlDecision(b, k, HOLD, "two-stage")


class _AdaptivePolicy:
    name = "adaptive"

    def __init__(self, controller: AdaptiveController):
        self.controller = controller

    @property
    def config(self):
        return self.controller.config

    @property
    def paused(self):
        return self.controller.state.paused

    @property
    def reconfig_count(self):
        return self.controller.state.reconfig_count

    def on_submit(self, batch):
        pass

    def window_p50(self):
        return self.controller.window_p50()

    def step(self, m):
        return self.controller.step(m)

    def resume(self):
        self.controller.state.paused = False


# ---------------------------------------------------------------- run loop


@dataclass
class JobRun:
    result: DiffResult | None
    records: list
    summary: object
    backend: str
    failed: bool = False
    oom_events: int = 0
    decisions: list = field(default_factory=list)


def run_job(policy, backend, total_rows, *, tau=2.0, b_min=1, mitigate_stragglers=True,
            abort_on_oom=True, job_id="job", percentile_window=20, collect_results=True,
            sink=None):
    """Drive one job through ``backend`` under ``policy``.

    Keeps at most k batches queued beyond the k running, applies each
    decision to later submissions only, mitigates stragglers by splitting or
    speculative duplication, and retries failed batches.
    """
    straggler_policy = PolicyParams(tau=tau, b_min=max(1, b_min))
    cursor = 0
    next_id = 0
    outstanding = {}       # batch_id -> BatchDescriptor
    attempts = {}          # batch_id -> highest attempt submitted
    failures = {}
    mitigated = set()
    results = {}
    records = []
    decisions = []
    oom = 0
    failed = False

    def new_batch(lo, hi, budget):
        nonlocal next_id
        batch = BatchDescriptor(next_id, lo, hi, budget)
        next_id += 1
        return batch

    while True:
        b, k = policy.config
        if backend.k != k:
            backend.resize(k)
        while not policy.paused and cursor < total_rows and backend.queue_depth < k:
            b, _ = policy.config
            batch = new_batch(cursor, min(cursor + b, total_rows), b)
            cursor = batch.hi
            outstanding[batch.batch_id] = batch
            attempts[batch.batch_id] = 0
            backend.submit(batch)
            policy.on_submit(batch)
            if backend.k != policy.config[1]:
                backend.resize(policy.config[1])
        if cursor >= total_rows and not outstanding:
            break

        timeout = None
        p50 = policy.window_p50() if mitigate_stragglers else None
        if p50:
            now = backend.now()
            waits = [start + tau * p50 - now for bt, _, start in backend.running()
                     if bt.batch_id in outstanding and bt.batch_id not in mitigated]
            if waits:
                timeout = max(min(waits), 1e-9)
        if backend.kind != SIMULATED:
            timeout = POLL_INTERVAL if timeout is None else min(timeout, POLL_INTERVAL)

        c = backend.next_completion(timeout)
        if c is None:
            if backend.active == 0 and backend.queue_depth == 0:
                if policy.paused:
                    if isinstance(policy, _AdaptivePolicy):
                        if policy.controller.trace and "safe set empty" in policy.controller.trace[-1].reason:
                            raise InfeasibleJob("safe set empty with no batch in flight")
                        policy.resume()
                    continue
                if cursor >= total_rows and outstanding:
                    raise RuntimeError(f"lost batches: {sorted(outstanding)}")
                continue
            if p50:
                now = backend.now()
                for bt, att, start in backend.running():
                    if bt.batch_id not in outstanding or bt.batch_id in mitigated:
                        continue
                    action = mitigate_straggler(now - start, bt.rows, p50, straggler_policy)
                    if action == NONE:
                        continue
                    mitigated.add(bt.batch_id)
                    if action == SPLIT:
                        backend.cancel(bt.batch_id)
                        del outstanding[bt.batch_id]
                        halves = bt.split(next_id, next_id + 1)
                        next_id += 2
                        for h in reversed(halves):
                            outstanding[h.batch_id] = h
                            attempts[h.batch_id] = 0
                            mitigated.add(h.batch_id)
                            backend.submit(h, front=True)
                    else:
                        attempts[bt.batch_id] += 1
                        backend.submit(bt, attempt=attempts[bt.batch_id], front=True)
            continue

        bid = c.batch.batch_id
        if bid not in outstanding:
            continue
        if c.error is not None:
            failures[bid] = failures.get(bid, 0) + 1
            if failures[bid] > MAX_RETRIES:
                raise JobError(c.batch, c.error)
            attempts[bid] += 1
            backend.submit(c.batch, attempt=attempts[bid], front=True)
            continue
        # first completion wins; drop any duplicate still queued or running
        del outstanding[bid]
        if attempts.get(bid, 0) > 0:
            backend.cancel(bid)
        if collect_results and c.result is not None:
            results[bid] = c.result
        m = c.metrics
        if m.oom:
            oom += 1
        decision = policy.step(m)
        decisions.append(decision)
        rec = TelemetryRecord.from_cycle(m, decision, job_id=job_id, backend=backend.kind,
                                         reconfig_count=policy.reconfig_count, paused=policy.paused)
        records.append(rec)
        if sink is not None:
            sink.append(rec)
        if m.oom and abort_on_oom:
            failed = True
            break

    result = None
    if collect_results and results and not failed:
        result = merge_results(results.values())
    summary = job_summary(records, percentile_window=percentile_window) if records else None
    return JobRun(result, records, summary, backend.kind, failed, oom, decisions)


# ---------------------------------------------------------------- estimator


def simulated_profile(sim: SimModel, total_rows: int, seed: int = 0, error: float = 0.05) -> PreflightProfile:
    """Pre-flight estimates for a simulated job, off by up to ``error`` relative."""
    rng = np.random.default_rng([seed, 7919])
    jitter = 1.0 + error * (2 * rng.random(4) - 1)
    w = sim.bytes_per_row * jitter[0]
    return PreflightProfile(
        bytes_per_row=w,
        read_bandwidth=sim.read_bandwidth * jitter[1],
        delta_cost_per_type={"mixed": (sim.prep_per_row + sim.delta_per_row) * jitter[2]},
        sample_rows=min(1_000_000, math.ceil(0.01 * total_rows)),
        mem_per_row=(sim.beta1 * sim.bytes_per_row + sim.beta2) * jitter[3],
    )


def default_caps():
    import os

    import psutil

    return ResourceCaps(mem_cap=0.8 * psutil.virtual_memory().total, cpu_cap=os.cpu_count() or 1)


class AdaptiveScheduler(TransformerMixin, BaseEstimator):
    """Adaptive batch/worker scheduler for a differencing job.

    Parameters mirror ``PolicyParams`` plus the caps and the backend choice
    (``"auto"`` gates between in-memory and task-pool; ``"inmem"``,
    ``"taskpool"`` and ``"sim"`` force one). For ``"sim"`` the job may be a
    plain row count. ``policy`` selects ``"adaptive"``, ``"fixed"`` (uses
    ``fixed_b``/``fixed_k``) or ``"two_stage"``.

    Attributes set by ``fit``: ``profile_``, ``working_set_``, ``backend_``,
    ``caps_``, ``policy_``, ``cost_model_``, ``mem_model_``, ``start_config_``.
    ``transform`` sets ``run_`` (records, summary, decisions).
    """

    def __init__(self, kappa=0.7, eta=0.9, gamma=0.6, tau=2.0, hysteresis_m=2, rho_ewma=0.2,
                 rho_star=0.85, lambda_b=0.2, lambda_k=0.2, eps=0.05, alpha_cov=0.05, b_min=1000,
                 k_min=1, b_step_min=256, residual_window=20, percentile_window=20,
                 delta_prior=256 * MiB, min_residuals=5, growth_margin=0.05, mem_cap=None, cpu_cap=None, backend="auto",
                 policy="adaptive", fixed_b=None, fixed_k=None, grid=None, warmup_fraction=0.1,
                 alpha_rep=1.5, beta_fixed=64 * MiB, mem_beta0=64 * MiB, mem_beta1=None,
                 mitigate_stragglers=True, sim=None, task_overhead=0.005, isolation="thread",
                 abort_on_oom=True, profile=None, seed=0):
        self.kappa = kappa
        self.eta = eta
        self.gamma = gamma
        self.tau = tau
        self.hysteresis_m = hysteresis_m
        self.rho_ewma = rho_ewma
        self.rho_star = rho_star
        self.lambda_b = lambda_b
        self.lambda_k = lambda_k
        self.eps = eps
        self.alpha_cov = alpha_cov
        self.b_min = b_min
        self.k_min = k_min
        self.b_step_min = b_step_min
        self.residual_window = residual_window
        self.percentile_window = percentile_window
        self.delta_prior = delta_prior
        self.min_residuals = min_residuals
        self.growth_margin = growth_margin
        self.mem_cap = mem_cap
        self.cpu_cap = cpu_cap
        self.backend = backend
        self.policy = policy
        self.fixed_b = fixed_b
        self.fixed_k = fixed_k
        self.grid = grid
        self.warmup_fraction = warmup_fraction
        self.alpha_rep = alpha_rep
        self.beta_fixed = beta_fixed
        self.mem_beta0 = mem_beta0
        self.mem_beta1 = mem_beta1
        self.mitigate_stragglers = mitigate_stragglers
        self.sim = sim
        self.task_overhead = task_overhead
        self.isolation = isolation
        self.abort_on_oom = abort_on_oom
        self.profile = profile
        self.seed = seed

    def _policy_params(self):
        names = PolicyParams.__dataclass_fields__
        return PolicyParams(**{n: getattr(self, n) for n in names})

    def _caps(self):
        if self.mem_cap is None or self.cpu_cap is None:
            d = default_caps()
            return ResourceCaps(self.mem_cap or d.mem_cap, self.cpu_cap or d.cpu_cap)
        return ResourceCaps(self.mem_cap, self.cpu_cap)

    @staticmethod
    def _rows(job):
        if isinstance(job, JobSpec):
            return job.source.row_count, job.target.row_count
        n = int(job)
        return n, n

    def fit(self, job, y=None):
        if self.backend not in ("auto", INMEM, TASKPOOL, "sim", SIMULATED):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.policy not in ("adaptive", "fixed", "two_stage"):
            raise ValueError(f"unknown policy {self.policy!r}")
        self.policy_ = self._policy_params()
        self.caps_ = self._caps()
        simulated = self.backend in ("sim", SIMULATED)
        rows_a, rows_b = self._rows(job)
        if simulated and self.sim is None:
            raise ValueError("backend='sim' needs a SimModel")
        if not isinstance(job, JobSpec) and not simulated:
            raise ValueError("a row count is only accepted with backend='sim'")
        self.total_rows_ = job.total_rows if isinstance(job, JobSpec) else int(job)
        if self.profile is not None:
            self.profile_ = (self.profile if isinstance(self.profile, PreflightProfile)
                             else PreflightProfile.from_dict(self.profile))
        elif simulated:
            self.profile_ = simulated_profile(self.sim, rows_a + rows_b, self.seed)
        else:
            self.profile_ = preflight_profile(job)

        gate = GateInputs(self.alpha_rep, self.beta_fixed, rows_a, rows_b)
        self.working_set_ = estimate_working_set(gate, self.profile_)
        self.gated_backend_ = select_backend(self.working_set_, self.caps_, self.policy_)
        if self.backend == "auto":
            self.backend_ = self.gated_backend_
        elif simulated:
            self.backend_ = SIMULATED
        else:
            self.backend_ = self.backend

        w = self.profile_.bytes_per_row
        if self.mem_beta1 is not None:
            beta1 = self.mem_beta1
        elif self.profile_.mem_per_row:
            beta1 = self.profile_.mem_per_row / w
        else:
            beta1 = 1.0
        self.mem_model_ = MemModel(self.profile_, beta0=self.mem_beta0, beta1=beta1,
                                   residual_window=self.policy_.residual_window).fit()
        self.cost_model_ = CostModel(self.profile_, overhead_fixed=0.0,
                                     residual_window=self.policy_.residual_window).fit()
        if self.policy == "adaptive":
            self.controller_ = AdaptiveController(self.policy_, self.caps_, self.profile_, self.cost_model_,
                                                  self.mem_model_, backend=self.backend_,
                                                  total_rows=self.total_rows_)
            self.start_config_ = self.controller_.config
        elif self.policy == "fixed":
            if self.fixed_b is None or self.fixed_k is None:
                raise ValueError("policy='fixed' needs fixed_b and fixed_k")
            self.start_config_ = (int(self.fixed_b), int(self.fixed_k))
        else:
            if not self.grid:
                raise ValueError("policy='two_stage' needs a grid of (b, k) pairs")
            self.start_config_ = tuple(self.grid[0])
        log.info("working set %.4g B vs kappa*mem_cap %.4g B -> %s", self.working_set_,
                 self.policy_.kappa * self.caps_.mem_cap, self.gated_backend_)
        return self

    def _make_policy(self):
        if self.policy == "adaptive":
            return _AdaptivePolicy(self.controller_)
        if self.policy == "fixed":
            return FixedPolicy(*self.start_config_)
        return TwoStagePolicy(self.grid, self.total_rows_, self.warmup_fraction)

    def transform(self, job, sink=None):
        """Run the job; returns the merged DiffResult (None for row-count jobs)."""
        check_is_fitted(self, "profile_")
        policy = self._make_policy()
        b, k = policy.config
        job_spec = job if isinstance(job, JobSpec) else None
        simulated = self.backend_ == SIMULATED
        k = min(k, self.caps_.cpu_cap)
        backend = make_backend(
            SIMULATED if simulated else self.backend_, job_spec, k, self.caps_.cpu_cap,
            sim=self.sim, mem_cap=self.caps_.mem_cap, bytes_per_row=self.profile_.bytes_per_row,
            task_overhead=self.task_overhead, isolation=self.isolation,
            sim_mode=self.gated_backend_)
        try:
            self.run_ = run_job(policy, backend, self.total_rows_, tau=self.policy_.tau,
                                b_min=self.policy_.b_min,
                                mitigate_stragglers=self.mitigate_stragglers and self.policy == "adaptive",
                                abort_on_oom=self.abort_on_oom,
                                percentile_window=self.policy_.percentile_window,
                                collect_results=job_spec is not None, sink=sink)
        finally:
            backend.close()
        self.run_.backend = self.gated_backend_ if simulated else self.backend_
        return self.run_.result

    def fit_transform(self, job, y=None, **kwargs):
        return self.fit(job).transform(job, **kwargs)

    def predict(self, X):
        """Predicted (latency s, total memory B) for rows of (b, k)."""
        check_is_fitted(self, "profile_")
        X = np.asarray(X).reshape(-1, 2)
        return np.column_stack([self.cost_model_.predict(X), self.mem_model_.predict(X)])
