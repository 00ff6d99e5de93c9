"""Estimators behind the scheduler: working-set gate, latency and memory models,
the safety envelope, and the small statistics they share.

Units are bytes and seconds throughout; batch sizes and worker counts are ints.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_config, check_count, check_fraction, check_positive

MiB = 1 << 20
GiB = 1 << 30

INMEM = "inmem"
TASKPOOL = "taskpool"
SIMULATED = "simulated"

# 64-bit ceiling used when memory never binds the batch size.
B_CEILING = 1 << 62


@dataclass(frozen=True)
class ResourceCaps:
    mem_cap: float
    cpu_cap: int

    def __post_init__(self):
        check_positive("mem_cap", self.mem_cap)
        check_count("cpu_cap", self.cpu_cap, minimum=1)


@dataclass(frozen=True)
class PolicyParams:
    """Every gating and control constant, validated on construction."""

    kappa: float = 0.7
    eta: float = 0.9
    gamma: float = 0.6
    tau: float = 2.0
    hysteresis_m: int = 2
    rho_ewma: float = 0.2
    rho_star: float = 0.85
    lambda_b: float = 0.2
    lambda_k: float = 0.2
    eps: float = 0.05
    alpha_cov: float = 0.05
    b_min: int = 1000
    k_min: int = 1
    b_step_min: int = 256
    residual_window: int = 20
    percentile_window: int = 20
    delta_prior: float = 256 * MiB
    min_residuals: int = 5
    growth_margin: float = 0.05

    def __post_init__(self):
        for name in ("kappa", "eta", "gamma", "rho_ewma", "lambda_b", "lambda_k", "alpha_cov"):
            check_fraction(name, getattr(self, name))
        check_fraction("rho_star", self.rho_star, closed_high=True)
        check_fraction("growth_margin", self.growth_margin, closed_low=True)
        if not self.tau > 1:
            raise ValueError(f"tau must be > 1, got {self.tau!r}")
        check_positive("eps", self.eps, strict=False)
        check_positive("delta_prior", self.delta_prior, strict=False)
        check_count("hysteresis_m", self.hysteresis_m, minimum=1)
        check_count("b_min", self.b_min, minimum=1)
        check_count("k_min", self.k_min, minimum=1)
        check_count("b_step_min", self.b_step_min, minimum=1)
        check_count("residual_window", self.residual_window, minimum=1)
        check_count("percentile_window", self.percentile_window, minimum=1)
        check_count("min_residuals", self.min_residuals, minimum=0)

    def replace(self, **changes) -> "PolicyParams":
        d = asdict(self)
        d.update(changes)
        return PolicyParams(**d)

    @classmethod
    def from_mapping(cls, mapping) -> "PolicyParams":
        names = {f.name for f in fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ValueError(f"unknown policy parameters: {sorted(unknown)}")
        return cls(**dict(mapping))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreflightProfile:
    """Pre-flight estimates for one job.

    ``delta_cost_per_type`` maps a column type to the seconds spent per aligned
    row comparing all mapped columns of that type. ``mem_per_row`` is an
    optional measured slope (bytes of batch state per aligned row).
    """

    bytes_per_row: float
    read_bandwidth: float
    delta_cost_per_type: dict = field(default_factory=dict)
    sample_rows: int = 0
    mem_per_row: float | None = None

    def __post_init__(self):
        check_positive("bytes_per_row", self.bytes_per_row)
        check_positive("read_bandwidth", self.read_bandwidth, strict=False)

    @property
    def delta_per_row(self) -> float:
        return float(sum(self.delta_cost_per_type.values()))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PreflightProfile":
        return cls(**d)


@dataclass(frozen=True)
class GateInputs:
    alpha_rep: float
    beta_fixed: float
    rows_a: int
    rows_b: int

    def __post_init__(self):
        check_positive("alpha_rep", self.alpha_rep, strict=False)
        check_positive("beta_fixed", self.beta_fixed, strict=False)
        check_count("rows_a", self.rows_a)
        check_count("rows_b", self.rows_b)


class SafeLimits(NamedTuple):
    b_max: int
    k_max: int
    feasible: bool


# ---------------------------------------------------------------- statistics


def ewma_update(prev, observation, rho):
    """One exponential-smoothing step; ``prev=None`` starts from the observation."""
    if prev is None:
        return observation
    return rho * observation + (1.0 - rho) * prev


def _nearest_rank(n, q):
    # tolerance guards q*n landing a hair above an integer in binary floating point
    return min(n, max(1, math.ceil(q * n - 1e-9)))


def windowed_percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    if len(values) == 0:
        raise ValueError("percentile of an empty window")
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q!r}")
    ordered = sorted(values)
    return ordered[_nearest_rank(len(ordered), q) - 1]


# ---------------------------------------------------------------- gating


def estimate_working_set(gate: GateInputs, profile: PreflightProfile) -> float:
    return gate.alpha_rep * profile.bytes_per_row * (gate.rows_a + gate.rows_b) + gate.beta_fixed


def select_backend(ws: float, caps: ResourceCaps, policy: PolicyParams) -> str:
    return INMEM if ws <= policy.kappa * caps.mem_cap else TASKPOOL


# ---------------------------------------------------------------- models


class CostModel(RegressorMixin, BaseEstimator):
    """Per-batch latency: read + prep + diff + overhead(k) - overlap.

    The read term is ``b * bytes_per_row / read_bandwidth``; the diff term sums
    the profile's per-type costs unless ``delta_per_row`` is given. Online
    fitting moves only ``overlap_``, the additive bias.
    """

    def __init__(self, profile=None, prep_per_row=0.0, delta_per_row=None,
                 overhead_fixed=0.0, overhead_per_worker=0.0, overlap=0.0,
                 residual_window=20):
        self.profile = profile
        self.prep_per_row = prep_per_row
        self.delta_per_row = delta_per_row
        self.overhead_fixed = overhead_fixed
        self.overhead_per_worker = overhead_per_worker
        self.overlap = overlap
        self.residual_window = residual_window

    def _reset(self):
        for name in ("prep_per_row", "overhead_fixed", "overhead_per_worker"):
            check_positive(name, getattr(self, name), strict=False)
        self.overlap_ = float(self.overlap)
        self.residuals_ = deque(maxlen=self.residual_window)
        self.n_updates_ = 0

    def fit(self, X=None, y=None):
        self._reset()
        if X is not None and y is not None:
            self.partial_fit(X, y)
        return self

    def _profile(self, profile):
        profile = profile if profile is not None else self.profile
        if profile is None:
            raise ValueError("CostModel needs a PreflightProfile")
        return profile

    def predict_one(self, b, k, profile=None):
        profile = self._profile(profile)
        if profile.read_bandwidth <= 0:
            raise ValueError("read_bandwidth must be > 0 to predict latency")
        delta = profile.delta_per_row if self.delta_per_row is None else self.delta_per_row
        overlap = getattr(self, "overlap_", self.overlap)
        t = (b * profile.bytes_per_row / profile.read_bandwidth
             + self.prep_per_row * b
             + delta * b
             + self.overhead_fixed + self.overhead_per_worker * k
             - overlap)
        return max(t, 0.0)

    def predict(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        return np.array([self.predict_one(b, k) for b, k in X])

    def observe(self, b, k, observed, rho, profile=None):
        if not hasattr(self, "residuals_"):
            self._reset()
        residual = observed - self.predict_one(b, k, profile)
        self.residuals_.append(residual)
        # raising the bias term lowers the prediction, hence the sign
        self.overlap_ -= rho * residual
        self.n_updates_ += 1
        return residual

    def partial_fit(self, X, y, rho=0.2):
        X = np.asarray(X).reshape(-1, 2)
        for (b, k), obs in zip(X, np.asarray(y, dtype=float).ravel()):
            self.observe(int(b), int(k), float(obs), rho)
        return self


class MemModel(RegressorMixin, BaseEstimator):
    """Total memory of k workers: k * (beta0 + beta1*b*W + beta2*b).

    ``beta0_`` absorbs the EWMA-corrected residual bias; slopes stay fixed.
    """

    def __init__(self, profile=None, beta0=64 * MiB, beta1=1.0, beta2=0.0,
                 residual_window=20):
        self.profile = profile
        self.beta0 = beta0
        self.beta1 = beta1
        self.beta2 = beta2
        self.residual_window = residual_window

    def _reset(self):
        for name in ("beta0", "beta1", "beta2"):
            check_positive(name, getattr(self, name), strict=False)
        self.beta0_ = float(self.beta0)
        self.residuals_ = deque(maxlen=self.residual_window)
        self.n_updates_ = 0

    def fit(self, X=None, y=None):
        self._reset()
        if X is not None and y is not None:
            self.partial_fit(X, y)
        return self

    def _width(self, profile):
        profile = profile if profile is not None else self.profile
        if profile is None:
            raise ValueError("MemModel needs a PreflightProfile")
        return profile.bytes_per_row

    def per_worker(self, b, profile=None):
        beta0 = getattr(self, "beta0_", self.beta0)
        return beta0 + self.beta1 * b * self._width(profile) + self.beta2 * b

    def predict_one(self, b, k, profile=None):
        return k * self.per_worker(b, profile)

    def predict(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        return np.array([self.predict_one(b, k) for b, k in X])

    def observe(self, b, k, observed, rho, profile=None):
        if not hasattr(self, "residuals_"):
            self._reset()
        residual = observed - self.predict_one(b, k, profile)
        self.residuals_.append(residual)
        self.beta0_ = max(0.0, self.beta0_ + rho * residual / k)
        self.n_updates_ += 1
        return residual

    def partial_fit(self, X, y, rho=0.2):
        X = np.asarray(X).reshape(-1, 2)
        for (b, k), obs in zip(X, np.asarray(y, dtype=float).ravel()):
            self.observe(int(b), int(k), float(obs), rho)
        return self


def predict_latency(model: CostModel, profile: PreflightProfile, b: int, k: int) -> float:
    check_config(b, k)
    return model.predict_one(b, k, profile)


def predict_memory(model: MemModel, profile: PreflightProfile, b: int, k: int) -> float:
    check_config(b, k)
    return model.predict_one(b, k, profile)


def calibrate_delta_m(model: MemModel, policy: PolicyParams) -> float:
    """Half-width of the memory prediction interval.

    Nearest-rank (1 - alpha) quantile of the absolute residuals in the last
    ``residual_window`` batches; the configured prior until enough exist.
    """
    residuals = list(getattr(model, "residuals_", ()))[-policy.residual_window:]
    if not residuals or len(residuals) < policy.min_residuals:
        return float(policy.delta_prior)
    return float(windowed_percentile([abs(r) for r in residuals], 1.0 - policy.alpha_cov))


def is_safe(b, k, model, profile, caps, policy, delta_m=None) -> bool:
    if delta_m is None:
        delta_m = calibrate_delta_m(model, policy)
    if k > caps.cpu_cap:
        return False
    return model.predict_one(b, k, profile) + delta_m <= policy.eta * caps.mem_cap


def _largest_safe_b(k, model, profile, caps, policy, delta_m, b_cap):
    lo = policy.b_min
    if not is_safe(lo, k, model, profile, caps, policy, delta_m):
        return None
    if is_safe(b_cap, k, model, profile, caps, policy, delta_m):
        return b_cap
    # galloping search, then bisection; is_safe is monotone in b
    hi = lo * 2
    while hi < b_cap and is_safe(hi, k, model, profile, caps, policy, delta_m):
        lo, hi = hi, hi * 2
    hi = min(hi, b_cap)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if is_safe(mid, k, model, profile, caps, policy, delta_m):
            lo = mid
        else:
            hi = mid
    return lo


def largest_safe_k(b, model, profile, caps, policy, delta_m=None, k_cap=None) -> int:
    """Largest k <= min(cpu_cap, k_cap) that keeps (b, k) inside the envelope; 0 if none."""
    if delta_m is None:
        delta_m = calibrate_delta_m(model, policy)
    top = caps.cpu_cap if k_cap is None else min(caps.cpu_cap, k_cap)
    per_worker = model.per_worker(b, profile)
    budget = policy.eta * caps.mem_cap - delta_m
    if budget < 0:
        return 0
    if per_worker <= 0:
        return top
    ratio = budget // per_worker
    k = top if not math.isfinite(ratio) or ratio >= top else int(ratio)
    # floor division on floats can be off by one at the boundary
    while k < top and is_safe(b, k + 1, model, profile, caps, policy, delta_m):
        k += 1
    while k > 0 and not is_safe(b, k, model, profile, caps, policy, delta_m):
        k -= 1
    return k


def safe_limits(model, profile, caps, policy, k, delta_m=None, b_cap=B_CEILING) -> SafeLimits:
    """Largest safe b at the given k, and largest safe k at ``b_min``."""
    check_count("k", k, minimum=1)
    if delta_m is None:
        delta_m = calibrate_delta_m(model, policy)
    if not is_safe(policy.b_min, policy.k_min, model, profile, caps, policy, delta_m):
        return SafeLimits(policy.b_min, policy.k_min, False)
    b_max = _largest_safe_b(k, model, profile, caps, policy, delta_m, max(b_cap, policy.b_min))
    if b_max is None:
        b_max = policy.b_min
    k_max = max(policy.k_min, largest_safe_k(policy.b_min, model, profile, caps, policy, delta_m))
    return SafeLimits(int(b_max), int(k_max), True)


def fit_models_online(cost: CostModel, mem: MemModel, profile, metrics, b, k, rho=0.2):
    """Fold one completed batch into both models; returns the two residuals."""
    lat_res = cost.observe(b, k, metrics.latency, rho, profile)
    mem_res = mem.observe(b, k, metrics.rss_total, rho, profile)
    return lat_res, mem_res


def convergence_steps(rho, tolerance=0.01) -> int:
    """Updates for an EWMA to close all but ``tolerance`` of a step change."""
    return math.ceil(math.log(tolerance) / math.log(1.0 - rho))
