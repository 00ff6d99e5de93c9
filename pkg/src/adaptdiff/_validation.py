"""Small argument checks shared by the estimators and dataclasses."""
import math
from numbers import Integral, Real


def check_fraction(name, value, *, low=0.0, high=1.0, closed_low=False, closed_high=False):
    if not isinstance(value, Real) or math.isnan(value):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    lo_ok = value >= low if closed_low else value > low
    hi_ok = value <= high if closed_high else value < high
    if not (lo_ok and hi_ok):
        lb = "[" if closed_low else "("
        rb = "]" if closed_high else ")"
        raise ValueError(f"{name}={value!r} outside {lb}{low}, {high}{rb}")
    return float(value)


def check_positive(name, value, *, strict=True):
    if not isinstance(value, Real) or math.isnan(value):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return value


def check_count(name, value, *, minimum=0, maximum=None):
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    if maximum is not None and value > maximum:
        raise ValueError(f"{name} must be <= {maximum}, got {value!r}")
    return int(value)


def check_config(b, k):
    """Validate a (batch size, worker count) pair."""
    check_count("b", b, minimum=1)
    check_count("k", k, minimum=1)
    return int(b), int(k)
