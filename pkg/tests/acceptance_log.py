"""Pass/fail lines collected by the acceptance tests and printed at session end."""

LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    LINES.append(line)
    print(line)
    assert ok, line
