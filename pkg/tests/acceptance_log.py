"""Collects one summary line per acceptance criterion for the terminal report."""

LINES: list[str] = []


def record(number: int, ok: bool, detail: str, seconds: float, limit: float) -> str:
    status = "PASS" if ok else "FAIL"
    line = (f"criterion {number}: {status} | {detail} | runtime {seconds:.1f}s "
            f"(limit {limit:g}s)")
    LINES.append(line)
    print(line)
    return line
