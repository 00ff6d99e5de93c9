"""Guarded hill-climb over (batch size, worker count).

Each completed batch drives exactly one control cycle: models and smoothed
statistics are updated, decrease triggers are checked first (with hysteresis),
then queue backpressure, then a proportional increase toward whichever
resource has more headroom. Every enacted (b, k) is re-checked against the
memory envelope and the CPU cap before it is returned.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

from .model import (
    B_CEILING,
    INMEM,
    CostModel,
    MemModel,
    PolicyParams,
    PreflightProfile,
    ResourceCaps,
    calibrate_delta_m,
    ewma_update,
    fit_models_online,
    is_safe,
    largest_safe_k,
    safe_limits,
    windowed_percentile,
)

INCREASE_B = "increase_b"
INCREASE_K = "increase_k"
DECREASE_B = "decrease_b"
DECREASE_K = "decrease_k"
HOLD = "hold"
PAUSE = "pause"
RESUME = "resume"

SPLIT = "split"
SPECULATE = "speculate"
NONE = "none"


class InfeasibleJob(Exception):
    """Even (b_min, k_min) violates the memory envelope."""


class Headrooms(NamedTuple):
    h_mem: float
    h_cpu: float


@dataclass
class ControlDecision:
    new_b: int
    new_k: int
    action: str
    reason: str = ""
    headrooms: Headrooms | None = None
    triggers: tuple = ()


@dataclass
class ControllerState:
    b: int
    k: int
    backend: str = INMEM
    smoothed_rss_p95: float | None = None
    smoothed_cpu_p95: float | None = None
    smoothed_p50: float | None = None
    smoothed_p95: float | None = None
    consecutive_tail_triggers: int = 0
    consecutive_mem_triggers: int = 0
    consecutive_cpu_triggers: int = 0
    reconfig_count: int = 0
    paused: bool = False
    decrease_streak: int = 0
    queue_growth: int = 0
    last_queue_depth: int = 0
    latencies: deque = field(default_factory=deque)
    rss_window: deque = field(default_factory=deque)
    cpu_window: deque = field(default_factory=deque)

    def reset_windows(self, size):
        self.latencies = deque(maxlen=size)
        self.rss_window = deque(maxlen=size)
        self.cpu_window = deque(maxlen=size)


def compute_headrooms(state: ControllerState, caps: ResourceCaps, policy: PolicyParams) -> Headrooms:
    mem_target = policy.eta * caps.mem_cap
    cpu_target = policy.rho_star * caps.cpu_cap
    rss = state.smoothed_rss_p95 or 0.0
    cpu = state.smoothed_cpu_p95 or 0.0
    return Headrooms((mem_target - rss) / mem_target, (cpu_target - cpu) / cpu_target)


def _grow_b(b, h_mem, b_max, policy):
    db = max(policy.b_step_min, math.floor(policy.lambda_b * h_mem * b))
    return min(b + db, b_max)


def _grow_k(k, h_cpu, k_max, policy):
    dk = max(1, math.ceil(policy.lambda_k * h_cpu * k))
    return min(k + dk, k_max)


def propose_step(state: ControllerState, headrooms: Headrooms, limits, policy: PolicyParams) -> ControlDecision:
    """Proportional increase of the resource with more normalized headroom.

    ``limits`` is any (b_max, k_max) pair; ties within ``eps`` prefer b. If the
    preferred resource is already at its limit, the other one is tried.
    """
    b, k = state.b, state.k
    b_max, k_max = limits[0], limits[1]
    h_mem, h_cpu = headrooms
    eps = policy.eps
    if not (h_mem > eps or h_cpu > eps):
        return ControlDecision(b, k, HOLD, "headroom within eps", headrooms)

    prefer_k = h_cpu >= h_mem + eps
    reason = f"h_mem={h_mem:.3f} h_cpu={h_cpu:.3f}"
    steps = (("k", True), ("b", h_mem > eps)) if prefer_k else (("b", True), ("k", h_cpu > eps))
    for which, allowed in steps:
        if not allowed:
            continue
        if which == "b":
            new_b = _grow_b(b, max(h_mem, 0.0), b_max, policy)
            if new_b > b:
                return ControlDecision(new_b, k, INCREASE_B, reason, headrooms)
        else:
            new_k = _grow_k(k, h_cpu, k_max, policy)
            if new_k > k:
                return ControlDecision(b, new_k, INCREASE_K, reason, headrooms)
    return ControlDecision(b, k, HOLD, "at safe limits", headrooms)


def apply_decrease(state: ControllerState, triggers, policy: PolicyParams) -> ControlDecision:
    """Count a decrease trigger and back off once it has persisted for m batches.

    ``triggers`` holds any of "memory", "tail", "cpu". Memory and tail triggers
    share one counter and cut b multiplicatively; a repeat right after a cut
    also drops one worker. A CPU-only trigger drops one worker and leaves b.
    Counters of triggers that did not fire are reset.
    """
    triggers = tuple(triggers)
    b, k = state.b, state.k
    mem_or_tail = "memory" in triggers or "tail" in triggers
    if mem_or_tail:
        if "memory" in triggers:
            state.consecutive_mem_triggers += 1
        else:
            state.consecutive_mem_triggers = 0
        if "tail" in triggers:
            state.consecutive_tail_triggers += 1
        else:
            state.consecutive_tail_triggers = 0
        count = max(state.consecutive_mem_triggers, state.consecutive_tail_triggers)
        state.consecutive_cpu_triggers = 0
        if count < policy.hysteresis_m:
            return ControlDecision(b, k, HOLD, f"hysteresis {count}/{policy.hysteresis_m}", triggers=triggers)
        new_b = max(math.floor(policy.gamma * b), policy.b_min)
        new_k = max(k - 1, policy.k_min) if state.decrease_streak >= 1 else k
        state.consecutive_mem_triggers = state.consecutive_tail_triggers = 0
        state.decrease_streak += 1
        if (new_b, new_k) == (b, k):
            return ControlDecision(b, k, HOLD, "at floor", triggers=triggers)
        action = DECREASE_B if new_b != b else DECREASE_K
        return ControlDecision(new_b, new_k, action, "+".join(triggers), triggers=triggers)

    state.consecutive_mem_triggers = state.consecutive_tail_triggers = 0
    if "cpu" in triggers:
        state.consecutive_cpu_triggers += 1
        if state.consecutive_cpu_triggers < policy.hysteresis_m:
            return ControlDecision(b, k, HOLD, f"hysteresis {state.consecutive_cpu_triggers}/{policy.hysteresis_m}",
                                   triggers=triggers)
        state.consecutive_cpu_triggers = 0
        new_k = max(k - 1, policy.k_min)
        if new_k == k:
            return ControlDecision(b, k, HOLD, "at floor", triggers=triggers)
        return ControlDecision(b, new_k, DECREASE_K, "cpu", triggers=triggers)
    state.consecutive_cpu_triggers = 0
    return ControlDecision(b, k, HOLD, "no trigger")


def apply_backpressure(state: ControllerState, queue_depth: int, policy: PolicyParams) -> ControlDecision:
    """Pause above 2k pending batches, resume at or below k; sustained growth drops a worker."""
    b, k = state.b, state.k
    if queue_depth > state.last_queue_depth and queue_depth > k:
        state.queue_growth += 1
    else:
        state.queue_growth = 0
    state.last_queue_depth = queue_depth

    if state.queue_growth >= policy.hysteresis_m and k > policy.k_min:
        state.queue_growth = 0
        return ControlDecision(b, k - 1, DECREASE_K, f"queue growing (depth {queue_depth})")
    if not state.paused and queue_depth > 2 * k:
        state.paused = True
        return ControlDecision(b, k, PAUSE, f"queue depth {queue_depth} > {2 * k}")
    if state.paused and queue_depth <= k:
        state.paused = False
        return ControlDecision(b, k, RESUME, f"queue depth {queue_depth} <= {k}")
    return ControlDecision(b, k, HOLD, "queue ok")


def mitigate_straggler(runtime: float, rows: int, window_p50: float | None, policy: PolicyParams,
                       already_mitigated: bool = False) -> str:
    """``split`` or ``speculate`` when a running batch exceeds tau * window p50."""
    if already_mitigated or not window_p50 or runtime <= policy.tau * window_p50:
        return NONE
    return SPLIT if rows > 2 * policy.b_min else SPECULATE


def safe_start(cost: CostModel, mem: MemModel, profile: PreflightProfile, caps: ResourceCaps,
               policy: PolicyParams, b_cap: int = B_CEILING):
    """Starting point on a geometric ladder using at most half the memory envelope.

    k is the largest of {1, 2, 4, ..., cpu_cap} whose (b_min, k) fits the half
    envelope; b is then the largest b_min * 2**i that still fits at that k.
    """
    delta_m = calibrate_delta_m(mem, policy)
    if not is_safe(policy.b_min, policy.k_min, mem, profile, caps, policy, delta_m):
        raise InfeasibleJob(
            f"(b_min={policy.b_min}, k_min={policy.k_min}) predicts "
            f"{mem.predict_one(policy.b_min, policy.k_min, profile) + delta_m:.4g} B "
            f"> eta*mem_cap = {policy.eta * caps.mem_cap:.4g} B")
    half = 0.5 * policy.eta * caps.mem_cap

    def fits(b, k):
        return mem.predict_one(b, k, profile) + delta_m <= half

    ks = sorted({min(2 ** i, caps.cpu_cap) for i in range(caps.cpu_cap.bit_length() + 1)} | {caps.cpu_cap})
    ks = [k for k in ks if k >= policy.k_min]
    k = next((k for k in reversed(ks) if fits(policy.b_min, k)), None)
    if k is None:
        return policy.b_min, policy.k_min
    b = policy.b_min
    top = max(policy.b_min, b_cap)
    while b * 2 <= top and fits(b * 2, k):
        b *= 2
    return b, k


class AdaptiveController:
    """Stateful decision loop around the functions above.

    ``b_cap`` bounds the batch size from above (typically the job's row count
    divided by k); it only matters when memory never binds.
    """

    def __init__(self, policy: PolicyParams, caps: ResourceCaps, profile: PreflightProfile,
                 cost: CostModel, mem: MemModel, backend: str = INMEM, total_rows: int | None = None):
        self.policy = policy
        self.caps = caps
        self.profile = profile
        self.cost = cost
        self.mem = mem
        self.total_rows = total_rows
        b, k = safe_start(cost, mem, profile, caps, policy, self.b_cap(policy.k_min))
        self.state = ControllerState(b=b, k=k, backend=backend)
        self.state.b = self.balanced(min(b, self.b_cap(k)), k)
        self.state.reset_windows(policy.percentile_window)
        self.trace = []
        self._growth_policy = policy.replace(eta=policy.eta * (1.0 - policy.growth_margin))

    def b_cap(self, k):
        if self.total_rows is None:
            return B_CEILING
        return max(self.policy.b_min, math.ceil(self.total_rows / max(k, 1)))

    def balanced(self, b, k):
        """Largest b' <= b that splits the job into equal waves of k batches."""
        if self.total_rows is None or b <= self.policy.b_min:
            return b
        waves = math.ceil(self.total_rows / (b * k))
        return max(self.policy.b_min, math.ceil(self.total_rows / (k * waves)))

    @property
    def config(self):
        return self.state.b, self.state.k

    def window_p50(self):
        lat = self.state.latencies
        return windowed_percentile(lat, 0.5) if lat else None

    def _smooth(self, m):
        st, rho = self.state, self.policy.rho_ewma
        st.latencies.append(m.latency)
        st.rss_window.append(m.rss_total)
        st.cpu_window.append(m.cpu_total)
        p50 = windowed_percentile(st.latencies, 0.5)
        p95 = windowed_percentile(st.latencies, 0.95)
        st.smoothed_p50 = ewma_update(st.smoothed_p50, p50, rho)
        st.smoothed_p95 = ewma_update(st.smoothed_p95, p95, rho)
        st.smoothed_rss_p95 = ewma_update(st.smoothed_rss_p95, windowed_percentile(st.rss_window, 0.95), rho)
        st.smoothed_cpu_p95 = ewma_update(st.smoothed_cpu_p95, windowed_percentile(st.cpu_window, 0.95), rho)
        return p50, p95

    def _triggers(self, p50, p95):
        st, pol, caps = self.state, self.policy, self.caps
        out = []
        if st.smoothed_rss_p95 >= pol.eta * caps.mem_cap:
            out.append("memory")
        if len(st.latencies) >= 2 and p50 > 0 and p95 / p50 > pol.tau:
            out.append("tail")
        if st.smoothed_cpu_p95 > pol.rho_star * caps.cpu_cap:
            out.append("cpu")
        return tuple(out)

    def _clamp(self, decision: ControlDecision) -> ControlDecision:
        """Prune a proposal into the envelope: shrink b first, then k."""
        pol, caps, mem, prof = self.policy, self.caps, self.mem, self.profile
        delta_m = calibrate_delta_m(mem, pol)
        k = max(pol.k_min, min(decision.new_k, caps.cpu_cap))
        b = max(pol.b_min, decision.new_b)
        if decision.action == INCREASE_B:
            b = min(b, self.b_cap(k))
        if not is_safe(b, k, mem, prof, caps, pol, delta_m):
            if not is_safe(pol.b_min, pol.k_min, mem, prof, caps, pol, delta_m):
                decision.new_b, decision.new_k = pol.b_min, pol.k_min
                decision.action = PAUSE
                decision.reason = "safe set empty; pausing until it expands"
                return decision
            if not is_safe(pol.b_min, k, mem, prof, caps, pol, delta_m):
                k = max(pol.k_min, largest_safe_k(pol.b_min, mem, prof, caps, pol, delta_m))
            b = min(b, safe_limits(mem, prof, caps, pol, k, delta_m).b_max)
            decision.reason = (decision.reason + "; clamped to envelope").lstrip("; ")
        decision.new_b, decision.new_k = b, k
        return decision

    def _enact(self, decision: ControlDecision) -> ControlDecision:
        st = self.state
        if decision.action == PAUSE:
            st.paused = True
        elif decision.action == RESUME:
            st.paused = False
        if (decision.new_b, decision.new_k) != (st.b, st.k):
            st.b, st.k = decision.new_b, decision.new_k
            st.reconfig_count += 1
            st.reset_windows(self.policy.percentile_window)
        self.trace.append(decision)
        return decision

    def step(self, m) -> ControlDecision:
        """One control cycle for one completed batch."""
        st, pol = self.state, self.policy
        fit_models_online(self.cost, self.mem, self.profile, m, m.rows, m.active_workers, pol.rho_ewma)
        # batches that ran at an older configuration feed the models only
        fresh = (m.b, m.k) == (st.b, st.k)

        if fresh:
            p50, p95 = self._smooth(m)
            triggers = self._triggers(p50, p95)
            if triggers:
                return self._enact(self._clamp(apply_decrease(st, triggers, pol)))
            apply_decrease(st, (), pol)
            st.decrease_streak = 0

        bp = apply_backpressure(st, m.queue_depth_at_submit, pol)
        if bp.action != HOLD:
            return self._enact(self._clamp(bp))
        if st.paused:
            return self._enact(self._clamp(ControlDecision(st.b, st.k, HOLD, "paused")))
        if not fresh:
            return self._enact(self._clamp(ControlDecision(st.b, st.k, HOLD, "stale configuration")))

        # growth needs m observations at the current configuration, mirroring the decrease rule
        if len(st.latencies) < pol.hysteresis_m:
            return self._enact(self._clamp(ControlDecision(
                st.b, st.k, HOLD, f"dwell {len(st.latencies)}/{pol.hysteresis_m}")))

        h = compute_headrooms(st, self.caps, pol)
        delta_m = calibrate_delta_m(self.mem, pol)
        # grow toward a slightly tighter envelope so model noise alone does not force a clamp
        grow = self._growth_policy
        b_max = safe_limits(self.mem, self.profile, self.caps, grow, st.k, delta_m,
                            b_cap=self.b_cap(st.k)).b_max
        b_max = self.balanced(b_max, st.k)
        k_max = max(pol.k_min, largest_safe_k(st.b, self.mem, self.profile, self.caps, grow, delta_m))
        decision = propose_step(st, h, (b_max, k_max), pol)
        return self._enact(self._clamp(decision))
