"""Key-aligned cell-wise differencing of two tables.

A job is sorted once by key; batches are contiguous ranges of the sorted key
union, so every (b, k) and every backend yields the same verdict sequence.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
import time
import tracemalloc
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, NamedTuple, Sequence

from .model import PreflightProfile

PREFLIGHT_MAX_ROWS = 1_000_000
PREFLIGHT_FRACTION = 0.01
MICROBENCH_ROWS = 50_000
MEMBENCH_ROWS = 5_000


class DataError(Exception):
    """Unreadable or inconsistent input data."""


class ColumnType(str, enum.Enum):
    INTEGER = "integer"
    FLOAT = "float"
    STRING = "string"
    DATETIME = "datetime"
    BOOLEAN = "boolean"


# encoded widths used for the bytes/row estimate
_FIXED_WIDTH = {
    ColumnType.INTEGER: 8,
    ColumnType.FLOAT: 8,
    ColumnType.DATETIME: 8,
    ColumnType.BOOLEAN: 1,
}

_TRUE = {"true", "t", "1", "yes", "y"}
_FALSE = {"false", "f", "0", "no", "n"}


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType
    tolerance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "type", ColumnType(self.type))
        if self.tolerance < 0:
            raise ValueError(f"negative tolerance on column {self.name!r}")
        if self.tolerance and self.type is not ColumnType.FLOAT:
            raise ValueError(f"tolerance only applies to float columns ({self.name!r})")


def parse_value(raw, ctype: ColumnType, *, trim_strings=True):
    """Parse and normalize one CSV cell; empty cells become None."""
    if raw is None:
        return None
    if ctype is ColumnType.STRING:
        return raw.rstrip() if trim_strings else raw
    text = raw.strip()
    if text == "":
        return None
    if ctype is ColumnType.INTEGER:
        return int(text)
    if ctype is ColumnType.FLOAT:
        return float(text)
    if ctype is ColumnType.BOOLEAN:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ctype is ColumnType.DATETIME:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.astimezone(timezone.utc).replace(microsecond=0)
    raise ValueError(f"unknown column type {ctype!r}")


def format_value(value):
    if value is None:
        return ""
    if isinstance(value, datetime):
        return value.strftime("%Y-%m-%dT%H:%M:%SZ")
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def encoded_width(value, ctype: ColumnType) -> int:
    if value is None:
        return 0
    if ctype is ColumnType.STRING:
        return len(value.encode("utf-8"))
    return _FIXED_WIDTH[ctype]


@dataclass
class TableHandle:
    """A table on disk (CSV plus schema sidecar) or held in memory.

    ``rows`` maps key tuples to full row tuples in schema order; it is only set
    for in-memory tables and is filled lazily for CSV tables.
    """

    uri: str | None
    schema: tuple
    key_columns: tuple
    row_count: int = 0
    rows: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.schema = tuple(c if isinstance(c, Column) else Column(**c) for c in self.schema)
        self.key_columns = tuple(self.key_columns)
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")
        if not self.key_columns:
            raise DataError("at least one key column is required")
        missing = [k for k in self.key_columns if k not in names]
        if missing:
            raise DataError(f"key columns not in schema: {missing}")
        if self.rows is not None:
            self.row_count = len(self.rows)

    @property
    def column_names(self):
        return [c.name for c in self.schema]

    def column(self, name) -> Column:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def key_index(self):
        names = self.column_names
        return tuple(names.index(k) for k in self.key_columns)

    @classmethod
    def from_csv(cls, path, schema_path=None) -> "TableHandle":
        path = os.fspath(path)
        schema_path = schema_path or path + ".schema.json"
        try:
            with open(schema_path) as fh:
                meta = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read schema sidecar {schema_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed schema sidecar {schema_path}: {exc}") from exc
        try:
            with open(path, "rb") as fh:
                lines = sum(1 for _ in fh)
        except OSError as exc:
            raise DataError(f"cannot read table {path}: {exc}") from exc
        return cls(uri=path, schema=meta["columns"], key_columns=meta["key"],
                   row_count=max(0, lines - 1))

    @classmethod
    def from_rows(cls, schema, key_columns, rows: Iterable[Sequence]) -> "TableHandle":
        handle = cls(uri=None, schema=schema, key_columns=key_columns, rows={})
        kidx = handle.key_index
        data = {}
        for row in rows:
            row = tuple(row)
            key = tuple(row[i] for i in kidx)
            if key in data:
                raise DataError(f"duplicate key {key!r}")
            data[key] = row
        handle.rows = data
        handle.row_count = len(data)
        return handle

    def iter_csv(self, limit=None, trim_strings=True) -> Iterator[tuple]:
        """Yield (parsed row, raw byte length) pairs from the CSV file."""
        try:
            fh = open(self.uri, newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read table {self.uri}: {exc}") from exc
        with fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{self.uri}: missing header row") from None
            if header != self.column_names:
                raise DataError(f"{self.uri}: header {header} does not match schema {self.column_names}")
            types = [c.type for c in self.schema]
            for n, raw in enumerate(reader):
                if limit is not None and n >= limit:
                    break
                if len(raw) != len(types):
                    raise DataError(f"{self.uri}:{reader.line_num}: expected {len(types)} fields, got {len(raw)}")
                try:
                    row = tuple(parse_value(v, t, trim_strings=trim_strings) for v, t in zip(raw, types))
                except ValueError as exc:
                    raise DataError(f"{self.uri}:{reader.line_num}: {exc}") from exc
                # +1 per separator and the newline
                yield row, sum(len(v) for v in raw) + len(raw)

    def load(self, trim_strings=True) -> dict:
        if self.rows is not None:
            return self.rows
        kidx = self.key_index
        data = {}
        for row, _ in self.iter_csv(trim_strings=trim_strings):
            key = tuple(row[i] for i in kidx)
            if key in data:
                raise DataError(f"{self.uri}: duplicate key {key!r}")
            data[key] = row
        self.rows = data
        self.row_count = len(data)
        return data


def write_table_csv(handle: TableHandle, path) -> TableHandle:
    """Write an in-memory table to CSV plus schema sidecar; rows sorted by key."""
    path = os.fspath(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(handle.column_names)
        for key in sorted(handle.rows):
            writer.writerow([format_value(v) for v in handle.rows[key]])
    meta = {
        "columns": [{"name": c.name, "type": c.type.value, **({"tolerance": c.tolerance} if c.tolerance else {})}
                    for c in handle.schema],
        "key": list(handle.key_columns),
    }
    with open(path + ".schema.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return TableHandle(uri=path, schema=handle.schema, key_columns=handle.key_columns,
                       row_count=len(handle.rows))


class Verdict(NamedTuple):
    row_key: tuple
    column: str | None
    kind: str
    detail: tuple | None = None


EQUAL, CHANGED, ADDED, REMOVED = "equal", "changed", "added", "removed"
KINDS = (EQUAL, CHANGED, ADDED, REMOVED)


@dataclass
class DiffResult:
    verdicts: list = field(default_factory=list)
    batch: "BatchDescriptor | None" = None

    @property
    def counts(self) -> dict:
        out = dict.fromkeys(KINDS, 0)
        for v in self.verdicts:
            out[v.kind] += 1
        return out

    @property
    def changed_per_column(self) -> dict:
        out = {}
        for v in self.verdicts:
            if v.kind == CHANGED:
                out[v.column] = out.get(v.column, 0) + 1
        return out

    def aggregates(self) -> dict:
        return {"counts": self.counts, "changed_per_column": self.changed_per_column}

    def multiset(self):
        from collections import Counter
        return Counter(self.verdicts)


@dataclass(frozen=True)
class BatchDescriptor:
    """Contiguous slice [lo, hi) of the job's sorted key union."""

    batch_id: int
    lo: int
    hi: int
    row_budget: int

    @property
    def rows(self) -> int:
        return self.hi - self.lo

    def split(self, first_id, second_id):
        mid = self.lo + self.rows // 2
        half = max(1, self.row_budget // 2)
        return (BatchDescriptor(first_id, self.lo, mid, half),
                BatchDescriptor(second_id, mid, self.hi, half))


@dataclass
class CellPlan:
    name: str
    src_index: int
    tgt_index: int
    ctype: ColumnType
    tolerance: float


@dataclass
class JobSpec:
    """J = (A, B, alignment on declared keys, cell-wise comparison)."""

    source: TableHandle
    target: TableHandle
    column_mapping: tuple = ()
    tolerances: dict = field(default_factory=dict)
    trim_strings: bool = True
    _keys: list | None = field(default=None, init=False, repr=False, compare=False)
    _plan: list | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        src, tgt = self.source, self.target
        if len(src.key_columns) != len(tgt.key_columns):
            raise DataError("source and target declare different key arity")
        if not self.column_mapping:
            tgt_names = set(tgt.column_names)
            self.column_mapping = tuple(
                (c.name, c.name) for c in src.schema
                if c.name not in src.key_columns and c.name in tgt_names and c.name not in tgt.key_columns)
        self.column_mapping = tuple(tuple(p) for p in self.column_mapping)
        srcs = [s for s, _ in self.column_mapping]
        tgts = [t for _, t in self.column_mapping]
        if len(set(srcs)) != len(srcs) or len(set(tgts)) != len(tgts):
            raise DataError("column mapping must be one-to-one")
        for s, t in self.column_mapping:
            try:
                cs, ct = src.column(s), tgt.column(t)
            except KeyError as exc:
                raise DataError(f"mapped column {exc.args[0]!r} not in schema") from None
            if cs.type is not ct.type:
                raise DataError(f"type mismatch for {s!r}->{t!r}: {cs.type.value} vs {ct.type.value}")
        for ks, kt in zip(src.key_columns, tgt.key_columns):
            if src.column(ks).type is not tgt.column(kt).type:
                raise DataError(f"key type mismatch for {ks!r}->{kt!r}")

    @property
    def plan(self) -> list:
        if self._plan is None:
            src_names = self.source.column_names
            tgt_names = self.target.column_names
            plan = []
            for s, t in self.column_mapping:
                col = self.source.column(s)
                tol = self.tolerances.get(s, max(col.tolerance, self.target.column(t).tolerance))
                if tol and col.type is not ColumnType.FLOAT:
                    raise DataError(f"tolerance only applies to float columns ({s!r})")
                plan.append(CellPlan(s, src_names.index(s), tgt_names.index(t), col.type, float(tol)))
            self._plan = plan
        return self._plan

    def load(self):
        rows_a = self.source.load(self.trim_strings)
        rows_b = self.target.load(self.trim_strings)
        if self._keys is None:
            self._keys = sorted(set(rows_a) | set(rows_b))
        return rows_a, rows_b

    @property
    def keys(self) -> list:
        if self._keys is None:
            self.load()
        return self._keys

    @property
    def total_rows(self) -> int:
        return len(self.keys)


def partition_job(job: JobSpec, b: int) -> list:
    """Split the sorted key union into consecutive batches of at most b keys."""
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    n = job.total_rows
    return [BatchDescriptor(i, lo, min(lo + b, n), b) for i, lo in enumerate(range(0, n, b))]


def _cells_equal(a, b, plan: CellPlan) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if plan.ctype is ColumnType.FLOAT:
        if math.isnan(a) or math.isnan(b):
            return math.isnan(a) and math.isnan(b)
        return abs(a - b) <= plan.tolerance
    return a == b


def diff_shard(keys: Sequence[tuple], rows_a: dict, rows_b: dict, plan: Sequence[CellPlan]) -> list:
    """Verdicts for one shard; pure in its arguments."""
    out = []
    append = out.append
    make = tuple.__new__
    cols = [(p, p.src_index, p.tgt_index, p.name) for p in plan]
    for key in keys:
        ra = rows_a.get(key)
        rb = rows_b.get(key)
        if ra is None:
            append(make(Verdict, (key, None, ADDED, None)))
        elif rb is None:
            append(make(Verdict, (key, None, REMOVED, None)))
        else:
            for p, si, ti, name in cols:
                va, vb = ra[si], rb[ti]
                # exact equality settles most cells without the typed compare
                if (va == vb and va is not None) or _cells_equal(va, vb, p):
                    append(make(Verdict, (key, name, EQUAL, None)))
                else:
                    append(make(Verdict, (key, name, CHANGED, (va, vb))))
    return out


def extract_shard(job: JobSpec, batch: BatchDescriptor):
    """The self-contained payload a worker needs to diff one batch."""
    rows_a, rows_b = job.load()
    keys = job.keys[batch.lo:batch.hi]
    sub_a = {k: rows_a[k] for k in keys if k in rows_a}
    sub_b = {k: rows_b[k] for k in keys if k in rows_b}
    return keys, sub_a, sub_b, job.plan


def diff_batch(job: JobSpec, batch: BatchDescriptor) -> DiffResult:
    rows_a, rows_b = job.load()
    keys = job.keys[batch.lo:batch.hi]
    return DiffResult(diff_shard(keys, rows_a, rows_b, job.plan), batch)


def merge_results(parts: Iterable[DiffResult]) -> DiffResult:
    """Concatenate batch outputs in key order; duplicate batch ids are an error."""
    parts = list(parts)
    seen = set()
    for p in parts:
        if p.batch is None:
            continue
        if p.batch.batch_id in seen:
            raise ValueError(f"duplicate batch_id {p.batch.batch_id} in merge")
        seen.add(p.batch.batch_id)
    ordered = sorted(parts, key=lambda p: (p.batch.lo, p.batch.batch_id) if p.batch else (-1, -1))
    verdicts = []
    for p in ordered:
        verdicts.extend(p.verdicts)
    return DiffResult(verdicts)


def reference_diff(job: JobSpec) -> DiffResult:
    """Single pass over the key union with no batching at all."""
    rows_a, rows_b = job.load()
    return DiffResult(diff_shard(sorted(set(rows_a) | set(rows_b)), rows_a, rows_b, job.plan))


# ---------------------------------------------------------------- export


def _jsonable_key(key):
    return [format_value(v) if isinstance(v, datetime) else v for v in key]


def write_verdicts(result: DiffResult, path_or_file):
    """One JSON record per verdict, then one summary record."""
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w") if own else path_or_file
    try:
        for v in result.verdicts:
            rec = {"key": _jsonable_key(v.row_key), "column": v.column, "kind": v.kind}
            if v.detail is not None:
                rec["old"], rec["new"] = (format_value(x) for x in v.detail)
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"summary": result.aggregates()}) + "\n")
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------- preflight


def preflight_sample_size(total_rows: int) -> int:
    return min(PREFLIGHT_MAX_ROWS, math.ceil(PREFLIGHT_FRACTION * total_rows))


def _head(handle: TableHandle, n: int, trim: bool):
    """First n (row, raw_bytes) pairs of a table and the seconds spent reading."""
    t0 = time.perf_counter()
    if handle.uri is not None and handle.rows is None:
        out = list(handle.iter_csv(limit=n, trim_strings=trim))
    else:
        out = []
        types = [c.type for c in handle.schema]
        for key in sorted(handle.rows)[:n]:
            row = handle.rows[key]
            # no file to read: serialize to approximate the byte volume
            raw = sum(len(format_value(v)) for v in row) + len(row)
            out.append((row, raw))
    return out, time.perf_counter() - t0


def preflight_profile(job: JobSpec) -> PreflightProfile:
    """Sample both tables to estimate bytes/row, read bandwidth, and per-type Δ cost."""
    total = job.source.row_count + job.target.row_count
    if total <= 0:
        raise DataError("empty job: nothing to profile")
    n_sample = preflight_sample_size(total)
    n_a = min(job.source.row_count, math.ceil(n_sample * job.source.row_count / total))
    n_b = min(job.target.row_count, max(0, n_sample - n_a))
    head_a, t_a = _head(job.source, max(n_a, 1), job.trim_strings)
    head_b, t_b = _head(job.target, n_b, job.trim_strings) if n_b else ([], 0.0)

    plan = job.plan
    key_a = job.source.key_index
    key_b = job.target.key_index
    types_a = [c.type for c in job.source.schema]
    types_b = [c.type for c in job.target.schema]

    def width(row, kidx, types, idx_attr):
        w = sum(encoded_width(row[i], types[i]) for i in kidx)
        return w + sum(encoded_width(row[getattr(p, idx_attr)], p.ctype) for p in plan)

    widths = [width(r, key_a, types_a, "src_index") for r, _ in head_a]
    widths += [width(r, key_b, types_b, "tgt_index") for r, _ in head_b]
    sampled = len(widths)
    if sampled == 0:
        raise DataError("pre-flight sample is empty")
    bytes_per_row = max(1.0, sum(widths) / sampled)
    raw_bytes = sum(n for _, n in head_a) + sum(n for _, n in head_b)
    read_bandwidth = raw_bytes / max(t_a + t_b, 1e-9)

    # microbenchmark: per-type comparison cost on the first shard of each side
    bench_a, _ = _head(job.source, MICROBENCH_ROWS, job.trim_strings)
    bench_b, _ = _head(job.target, MICROBENCH_ROWS, job.trim_strings)
    rows_a = {tuple(r[i] for i in key_a): r for r, _ in bench_a}
    rows_b = {tuple(r[i] for i in key_b): r for r, _ in bench_b}
    shared = [k for k in rows_a if k in rows_b]
    if shared:
        pairs = [(rows_a[k], rows_b[k]) for k in shared]
        other = rows_b
    else:
        # no overlap in the head: compare the source against itself
        pairs = [(r, r) for r in rows_a.values()]
        other = rows_a
    same_side = not shared
    costs = {}
    for ctype in ColumnType:
        cols = [p for p in plan if p.ctype is ctype]
        if not cols or not pairs:
            continue
        t0 = time.perf_counter()
        for ra, rb in pairs:
            for p in cols:
                _cells_equal(ra[p.src_index], rb[p.src_index if same_side else p.tgt_index], p)
        costs[ctype.value] = (time.perf_counter() - t0) / len(pairs)

    # memory slope: peak allocation while diffing a small shard
    mem_keys = (shared or list(rows_a))[:MEMBENCH_ROWS]
    mem_per_row = None
    if mem_keys and not same_side:
        tracemalloc.start()
        try:
            diff_shard(mem_keys, rows_a, other, plan)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        mem_per_row = peak / len(mem_keys)

    return PreflightProfile(
        bytes_per_row=bytes_per_row,
        read_bandwidth=read_bandwidth,
        delta_cost_per_type=costs,
        sample_rows=sampled,
        mem_per_row=mem_per_row,
    )
