"""Packaged reference data."""
from importlib import resources

GOLDEN_FIXTURE = "golden_tables.jsonl"


def golden_fixture_path() -> str:
    return str(resources.files(__name__).joinpath(GOLDEN_FIXTURE))
