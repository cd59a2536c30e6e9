"""Collects one verdict per acceptance criterion for the end-of-run summary."""

VERDICTS = {}


def record(criterion, passed, detail):
    VERDICTS[criterion] = (bool(passed), detail)
