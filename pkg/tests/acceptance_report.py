"""Collects acceptance sub-check outcomes and prints one line per criterion."""

CRITERIA = {
    1: "binding coefficient",
    2: "coupling constants",
    3: "dual-path VEVs",
    4: "order reproduction",
    5: "variational ordering",
    6: "lemma suite",
    7: "hydrogen reference",
    8: "determinism",
}

_results: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, check: str, ok: bool, detail: str = "") -> bool:
    """Store one sub-check and echo it immediately (visible with ``-s``)."""
    ok = bool(ok)
    _results.setdefault(criterion, []).append((check, ok, detail))
    print(f"  criterion {criterion} {'PASS' if ok else 'FAIL'} {check}: {detail}")
    return ok


def lines() -> list[str]:
    out = []
    for c, title in CRITERIA.items():
        checks = _results.get(c)
        if not checks:
            continue
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        failed = [name for name, ok, _ in checks if not ok]
        suffix = f" (failed: {', '.join(failed)})" if failed else ""
        out.append(f"{status} criterion {c}: {title}{suffix}")
        for name, ok, detail in checks:
            out.append(f"    {'ok  ' if ok else 'FAIL'} {name}: {detail}")
    return out
