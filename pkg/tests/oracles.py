"""Independent reference implementations used as test oracles."""
import math
from collections import Counter

from scipy import stats


def naive_diff(table_a, table_b, tolerances=None):
    """Brute-force differ over two in-memory tables with the same schema.

    Walks the sorted key union one key at a time and compares columns by
    name; shares no code with the package's comparator.
    """
    tolerances = tolerances or {}
    names = [c.name for c in table_a.schema]
    keys = set(table_a.key_columns)
    compared = [n for n in names if n not in keys]
    out = []
    for key in sorted(set(table_a.rows) | set(table_b.rows)):
        ra, rb = table_a.rows.get(key), table_b.rows.get(key)
        if ra is None:
            out.append((key, None, "added", None))
            continue
        if rb is None:
            out.append((key, None, "removed", None))
            continue
        for name in compared:
            i = names.index(name)
            va, vb = ra[i], rb[i]
            tol = tolerances.get(name, 0.0)
            if isinstance(va, float) and isinstance(vb, float):
                same = (math.isnan(va) and math.isnan(vb)) or abs(va - vb) <= tol
            else:
                same = va == vb
            out.append((key, name, "equal", None) if same else (key, name, "changed", (va, vb)))
    return out


def as_tuples(result):
    return [tuple(v) for v in result.verdicts]


def multiset(result):
    return Counter(as_tuples(result))


def clopper_pearson_upper(successes, trials, level=0.95):
    """One-sided upper confidence bound on a binomial proportion."""
    if successes >= trials:
        return 1.0
    return float(stats.beta.ppf(level, successes + 1, trials - successes))
