"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok
