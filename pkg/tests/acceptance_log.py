"""Shared record of acceptance verdicts, one line per criterion."""

VERDICTS: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line, flush=True)
