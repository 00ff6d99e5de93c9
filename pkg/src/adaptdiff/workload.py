"""Synthetic table pairs with exact, known differences, and the benchmark matrix."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone

import numpy as np

from ._validation import check_count, check_fraction
from .diffcore import (
    ADDED,
    CHANGED,
    EQUAL,
    REMOVED,
    Column,
    ColumnType,
    DiffResult,
    TableHandle,
    Verdict,
    write_table_csv,
)
from .model import PolicyParams

_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"))
_EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)
_DT_SPAN = 4 * 365 * 86400

# reference job sizes the desk sizes stand in for
REFERENCE_SIZES = (1_000_000, 5_000_000, 10_000_000, 20_000_000)
DESK_SIZES = (10_000, 50_000, 100_000, 200_000)
FIXED_B = (25_000, 50_000, 100_000, 250_000)
FIXED_K = (4, 8, 16)


@dataclass(frozen=True)
class ColumnProfile:
    name: str
    type: ColumnType
    mean_length: float = 24.0   # strings only: geometric length distribution

    def __post_init__(self):
        object.__setattr__(self, "type", ColumnType(self.type))


DEFAULT_COLUMNS = (
    ColumnProfile("i1", ColumnType.INTEGER),
    ColumnProfile("i2", ColumnType.INTEGER),
    ColumnProfile("f1", ColumnType.FLOAT),
    ColumnProfile("f2", ColumnType.FLOAT),
    ColumnProfile("s1", ColumnType.STRING),
    ColumnProfile("s2", ColumnType.STRING),
    ColumnProfile("s3", ColumnType.STRING),
    ColumnProfile("ts", ColumnType.DATETIME),
    ColumnProfile("flag", ColumnType.BOOLEAN),
)


@dataclass(frozen=True)
class WorkloadSpec:
    """A pair of tables: A is generated, B is A with exactly injected differences.

    ``change_rate * rows_per_side`` distinct cells of shared keys are edited,
    ``add_rate * rows_per_side`` keys are inserted and ``remove_rate *
    rows_per_side`` keys are deleted (all floored to integers).
    """

    rows_per_side: int = 10_000
    columns: tuple = DEFAULT_COLUMNS
    key_name: str = "id"
    change_rate: float = 0.05
    add_rate: float = 0.01
    remove_rate: float = 0.01
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        check_count("rows_per_side", self.rows_per_side, minimum=0)
        for r in ("change_rate", "add_rate", "remove_rate"):
            check_fraction(r, getattr(self, r), closed_low=True, closed_high=True)
        cols = tuple(c if isinstance(c, ColumnProfile) else ColumnProfile(**c) for c in self.columns)
        object.__setattr__(self, "columns", cols)
        names = [c.name for c in cols] + [self.key_name]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in workload profile")
        n_rem = self.n_removed
        if self.n_changed > (self.rows_per_side - n_rem) * len(cols):
            raise ValueError(
                f"{self.n_changed} cell edits do not fit in {self.rows_per_side - n_rem} shared rows "
                f"x {len(cols)} columns")

    @property
    def n_changed(self):
        return math.floor(self.change_rate * self.rows_per_side)

    @property
    def n_added(self):
        return math.floor(self.add_rate * self.rows_per_side)

    @property
    def n_removed(self):
        return math.floor(self.remove_rate * self.rows_per_side)

    @property
    def schema(self):
        return (Column(self.key_name, ColumnType.INTEGER),) + tuple(Column(c.name, c.type) for c in self.columns)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {"rows_per_side": self.rows_per_side, "key_name": self.key_name,
                "columns": [{"name": c.name, "type": c.type.value, "mean_length": c.mean_length}
                            for c in self.columns],
                "change_rate": self.change_rate, "add_rate": self.add_rate,
                "remove_rate": self.remove_rate, "seed": self.seed, "name": self.name}

    @classmethod
    def from_mapping(cls, d):
        d = dict(d)
        if "columns" in d:
            d["columns"] = tuple(ColumnProfile(**c) if isinstance(c, dict) else c for c in d["columns"])
        return cls(**d)


def _strings(rng, n, mean_length):
    lengths = rng.geometric(1.0 / mean_length, size=n)
    chars = _LETTERS[rng.integers(0, len(_LETTERS), size=int(lengths.sum()))]
    out, pos = [], 0
    for ln in lengths:
        out.append("".join(chars[pos:pos + ln]))
        pos += ln
    return out


def _column_values(rng, col: ColumnProfile, n):
    if col.type is ColumnType.INTEGER:
        return [int(v) for v in rng.integers(-10**9, 10**9, size=n)]
    if col.type is ColumnType.FLOAT:
        # 6 decimals keeps the CSV text round trip exact
        return [round(float(v), 6) for v in rng.normal(0.0, 1000.0, size=n)]
    if col.type is ColumnType.STRING:
        return _strings(rng, n, col.mean_length)
    if col.type is ColumnType.DATETIME:
        return [_EPOCH + timedelta(seconds=int(s)) for s in rng.integers(0, _DT_SPAN, size=n)]
    if col.type is ColumnType.BOOLEAN:
        return [bool(v) for v in rng.integers(0, 2, size=n)]
    raise ValueError(col.type)


def _edit(rng, col: ColumnProfile, old):
    """A new value that is guaranteed to compare unequal to ``old``."""
    if col.type is ColumnType.INTEGER:
        return old + int(rng.integers(1, 10**6)) * (1 if rng.random() < 0.5 else -1)
    if col.type is ColumnType.FLOAT:
        return round(old + float(1.0 + abs(rng.normal(0.0, 100.0))), 6)
    if col.type is ColumnType.STRING:
        while True:
            new = _strings(rng, 1, col.mean_length)[0]
            if new != old:
                return new
    if col.type is ColumnType.DATETIME:
        return old + timedelta(seconds=int(rng.integers(1, 86_400)))
    return not old


def generate_pair(spec: WorkloadSpec, out_dir=None):
    """Generate (A, B, ground_truth).

    With ``out_dir`` both tables are written as CSV plus schema sidecar
    (``a.csv``, ``b.csv``) and file-backed handles are returned; otherwise the
    handles hold their rows in memory. Ground truth is built from the
    injection log, not by diffing.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.rows_per_side
    n_add, n_rem, n_chg = spec.n_added, spec.n_removed, spec.n_changed
    pool = max(1, 4 * (n + n_add))
    ids = [int(v) for v in rng.choice(pool, size=n + n_add, replace=False)]
    keys_a, keys_added = ids[:n], ids[n:]

    columns = [_column_values(rng, c, n) for c in spec.columns]
    rows_a = [(k, *vals) for k, vals in zip(keys_a, zip(*columns))] if spec.columns else [(k,) for k in keys_a]

    removed_idx = set(int(i) for i in rng.choice(n, size=n_rem, replace=False)) if n_rem else set()
    shared_idx = [i for i in range(n) if i not in removed_idx]
    ncols = len(spec.columns)
    edits = {}
    if n_chg:
        cells = rng.choice(len(shared_idx) * ncols, size=n_chg, replace=False)
        for cell in sorted(int(c) for c in cells):
            row_i, col_i = shared_idx[cell // ncols], cell % ncols
            edits[(row_i, col_i)] = None

    rows_b = []
    for i in shared_idx:
        row = list(rows_a[i])
        for col_i in range(ncols):
            if (i, col_i) in edits:
                new = _edit(rng, spec.columns[col_i], row[col_i + 1])
                edits[(i, col_i)] = (row[col_i + 1], new)
                row[col_i + 1] = new
        rows_b.append(tuple(row))
    added_cols = [_column_values(rng, c, n_add) for c in spec.columns]
    rows_b.extend((k, *vals) for k, vals in zip(keys_added, zip(*added_cols)) if spec.columns)
    if not spec.columns:
        rows_b.extend((k,) for k in keys_added)

    schema = spec.schema
    a = TableHandle.from_rows(schema, (spec.key_name,), rows_a)
    b = TableHandle.from_rows(schema, (spec.key_name,), rows_b)

    by_key_edits = {}
    for (i, col_i), detail in edits.items():
        by_key_edits.setdefault(keys_a[i], {})[spec.columns[col_i].name] = detail
    removed_keys = {keys_a[i] for i in removed_idx}
    added_keys = set(keys_added)
    verdicts = []
    for key in sorted(set(keys_a) | added_keys):
        if key in removed_keys:
            verdicts.append(Verdict((key,), None, REMOVED))
        elif key in added_keys:
            verdicts.append(Verdict((key,), None, ADDED))
        else:
            row_edits = by_key_edits.get(key, {})
            for c in spec.columns:
                if c.name in row_edits:
                    verdicts.append(Verdict((key,), c.name, CHANGED, row_edits[c.name]))
                else:
                    verdicts.append(Verdict((key,), c.name, EQUAL))
    truth = DiffResult(verdicts)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        a = write_table_csv(a, os.path.join(out_dir, "a.csv"))
        b = write_table_csv(b, os.path.join(out_dir, "b.csv"))
    return a, b, truth


# ---------------------------------------------------------------- scenario matrix


def desk_policy(scale: float, base: PolicyParams | None = None) -> PolicyParams:
    """Row- and byte-denominated policy constants shrunk by ``scale``."""
    base = base or PolicyParams()
    return base.replace(b_min=max(1, round(base.b_min * scale)),
                        b_step_min=max(1, round(base.b_step_min * scale)),
                        delta_prior=base.delta_prior * scale)


def fixed_grid(scale: float, cores: int, b_values=FIXED_B, k_values=FIXED_K):
    """Fixed (b, k) baselines; b shrinks with the job scale, k is clipped to the cores."""
    bs = sorted({max(1, round(b * scale)) for b in b_values})
    ks = sorted({min(k, cores) for k in k_values})
    return [(b, k) for b in bs for k in ks]


@dataclass
class Scenario:
    workload: WorkloadSpec
    params: PolicyParams
    variant: str = "baseline"


@dataclass
class ScenarioMatrix:
    """Workloads x policy variants, plus the fixed grid and scale metadata."""

    workloads: list
    variants: dict
    grid: list
    scale: float
    reference_sizes: tuple = REFERENCE_SIZES
    cores: int = 32
    meta: dict = field(default_factory=dict)

    def pairs(self):
        return [Scenario(w, p, name) for w in self.workloads for name, p in self.variants.items()]

    def __len__(self):
        return len(self.workloads) * len(self.variants)


ABLATION_AXES = {
    "eta": (0.90, 0.99),
    "gamma": (0.6,),
    "kappa": (0.6, 0.7, 0.8),
    "hysteresis_m": (1, 2, 3),
}


def scenario_matrix(base: WorkloadSpec, *, sizes=DESK_SIZES, reference_sizes=REFERENCE_SIZES, cores=32,
                    policy: PolicyParams | None = None, ablations=None) -> ScenarioMatrix:
    """The benchmark cross product.

    ``ablations`` maps a PolicyParams field to the values to sweep one at a
    time (``None`` or ``{}`` means the baseline only; pass ``ABLATION_AXES``
    for the standard sweep). Row- and byte-denominated constants are scaled
    by ``sizes[0] / reference_sizes[0]``.
    """
    if len(sizes) != len(reference_sizes):
        raise ValueError("sizes and reference_sizes must pair up")
    scale = sizes[0] / reference_sizes[0]
    params = desk_policy(scale, policy)
    workloads = [base.replace(rows_per_side=n, name=f"{ref // 1_000_000}M" if ref >= 1_000_000 else str(ref))
                 for n, ref in zip(sizes, reference_sizes)]
    variants = {"baseline": params}
    for axis, values in (ablations or {}).items():
        for v in values:
            variants[f"{axis}={v}"] = params.replace(**{axis: v})
    return ScenarioMatrix(workloads, variants, fixed_grid(scale, cores), scale, tuple(reference_sizes), cores,
                          meta={"scale": scale, "sizes": list(sizes), "reference_sizes": list(reference_sizes)})

