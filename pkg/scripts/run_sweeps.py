"""Run the large random-class sweeps and write a combined summary.

Usage: python3 scripts/run_sweeps.py [alg1 alg3 alg4]
Set LMDP_LAB_WORKERS to fan seeds out over processes.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

from lmdp_lab import harness

HERE = Path(__file__).resolve().parent


def main(argv: list[str]) -> int:
    names = argv or ["alg1", "alg3", "alg4"]
    out_dir = HERE / "results"
    out_dir.mkdir(exist_ok=True)
    paths = []
    for name in names:
        cfg = harness.ExperimentConfig.load(HERE / "configs" / f"{name}.toml")
        cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), "output": str(out_dir / f"{name}.csv")})
        t0 = time.perf_counter()
        harness.execute(cfg)
        print(f"{name}: {time.perf_counter() - t0:.0f}s -> {cfg.output}", flush=True)
        paths.append(cfg.output)
    summary = harness.report(paths)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.csv").write_text(harness.plot_rows(summary))
    for pol, body in summary["policies"].items():
        print(pol, {k: body[k] for k in ("slope", "stderr", "flatness", "survival", "max_switches", "pass")})
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
