"""Collects one verdict per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    # parametrised criteria merge into one verdict
    if n in RESULTS:
        prev_ok, prev = RESULTS[n]
        RESULTS[n] = (prev_ok and bool(ok), f"{prev}; {detail}")
    else:
        RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)
