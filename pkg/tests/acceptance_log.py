"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: list[str] = []


def verdict(number: int, name: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line, flush=True)
    return ok
