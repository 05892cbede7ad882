"""Outcome of each acceptance criterion, filled in by test_acceptance and printed at the end of the run."""

RESULTS = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    RESULTS[number] = (title, bool(ok), detail)
    return bool(ok)
