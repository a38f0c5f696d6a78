"""Shared collector so acceptance results print in the terminal summary."""

from __future__ import annotations

RESULTS: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> None:
    verdict = "PASS" if ok else "FAIL"
    RESULTS.append(f"criterion {number:2d} {name}: {verdict} ({detail})")
