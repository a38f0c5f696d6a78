#!/usr/bin/env python3
"""Run every verification suite on the default problem and summarize.

Writes one output directory per suite under --out and prints a one-line
verdict per metric.  Exit code 0 iff every suite passes.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from hybridmp.harness import SUITES, ExperimentConfig, run_suite
from hybridmp.model import LQSpec

SCALES = {
    "filter-check": {"n_steps": 1000, "n_paths": 2000},
    "mp-check": {"n_steps": 200, "n_paths": 2048},
    "lq-solve": {"n_steps": 400, "n_paths": 4096},
    "convergence-sweep": {"n_steps": 2000, "n_paths": 2000},
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--spec", default=str(Path(__file__).resolve().parents[1]
                                              / "specs" / "default_lq.json"))
    parser.add_argument("--out", default="results")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--workers", type=int, default=0)
    args = parser.parse_args(argv)

    spec = LQSpec.from_json(json.loads(Path(args.spec).read_text()))
    worst = 0
    for suite in SUITES:
        cfg = ExperimentConfig(
            suite=suite, spec=spec, seed=args.seed, workers=args.workers,
            out_dir=str(Path(args.out) / suite), **SCALES[suite],
        )
        start = time.time()
        code = run_suite(cfg)
        worst = max(worst, code)
        results = Path(cfg.out_dir) / "results.json"
        if results.exists():
            doc = json.loads(results.read_text())
            for name, rec in sorted(doc["metrics"].items()):
                flag = "pass" if rec["pass"] else "FAIL"
                print(f"{suite:18s} {name:22s} {rec['value']:12.6g} "
                      f"{rec['comparator']:>2s} {rec['tolerance']:<10.6g} {flag}")
        print(f"{suite:18s} done in {time.time() - start:.1f}s (exit {code})")
    return worst


if __name__ == "__main__":
    sys.exit(main())
