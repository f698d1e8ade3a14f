"""Command line entry point: ``lmdp-lab {gen,solve,run,sweep,analyze,report}``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import harness
from .analysis import build_function_class, covering_number_greedy, eluder_dimension_greedy
from .instances import FAMILIES, InstanceSpec
from .lmdp import LMDP_FORMAT, LatentMdp
from .mdp_core import (
    TabularMdp,
    UnboundedSpanError,
    ValidationError,
    backward_induction,
    relative_value_iteration,
)
from .policies import separation_delta

EXIT_OK, EXIT_INVALID, EXIT_ENFORCE = 0, 2, 3


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    raise TypeError(type(x))


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def cmd_gen(args) -> int:
    spec = InstanceSpec(family=args.family, M=args.m, S=args.s, A=args.a, H=args.horizon,
                        delta=args.delta, eps=args.eps, seed=args.seed)
    spec.build().save(args.out)
    print(args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    doc = json.loads(Path(args.path).read_text())
    mdps = LatentMdp.from_dict(doc).mdps if doc.get("format") == LMDP_FORMAT else (TabularMdp.from_dict(doc),)
    out = []
    for m in mdps:
        if args.avg:
            sol = relative_value_iteration(m)
            out.append({"gain": sol.gain, "bias": sol.bias.tolist(), "policy": sol.policy.tolist(),
                        "diameter": sol.diameter, "iterations": sol.iterations})
        else:
            sol = backward_induction(m)
            out.append({"value": float(sol.value[m.start_state]), "values": sol.value.tolist(),
                        "first_policy": sol.policy[0].tolist()})
    print(_dump(out[0] if len(out) == 1 else out))
    return EXIT_OK


def cmd_run(args) -> int:
    """Quick look: seed 0 of the config, one JSON line per row on stdout."""
    cfg = harness.ExperimentConfig.load(args.config)
    cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), "seeds": 1, "output": None})
    for row in harness.run_sweep(cfg, workers=1):
        print(json.dumps(row, sort_keys=True, default=_json_default))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    if args.out:
        cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), "output": args.out})
    if not cfg.output:
        raise ValidationError("sweep needs an output path (config 'output' or --out)")
    rows = harness.execute(cfg)
    print(f"{len(rows)} rows -> {cfg.output}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    lm = LatentMdp.load(args.path)
    eps = args.eps if args.eps is not None else 1.0 / lm.horizon
    f = build_function_class(lm.mdps)
    cover = covering_number_greedy(f, eps)
    doc = {
        "delta": separation_delta(lm.mdps) if len(lm) > 1 else None,
        "diameter_max": f.bound,
        "eluder_greedy": eluder_dimension_greedy(f, eps),
        "cover_size": cover,
        "log_cover": math.log(cover),
        "eps": eps,
    }
    print(_dump(doc))
    return EXIT_OK


def cmd_report(args) -> int:
    summary = harness.report(args.results)
    Path(args.out).write_text(_dump(summary) + "\n")
    if args.csv:
        Path(args.csv).write_text(harness.plot_rows(summary))
    for pol, body in summary["policies"].items():
        print(f"{pol}: slope={body['slope']} flatness={body['flatness']} pass={body['pass']}")
    if args.enforce and summary["pass"] is False:
        return EXIT_ENFORCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmdp-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an instance family as latent-MDP JSON")
    g.add_argument("--family", required=True, choices=FAMILIES)
    g.add_argument("--m", type=int, default=2)
    g.add_argument("--s", type=int, default=5)
    g.add_argument("--a", type=int, default=2)
    g.add_argument("--horizon", type=int, default=100)
    g.add_argument("--delta", type=float, default=0.1)
    g.add_argument("--eps", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="plan in an MDP (or each member of a latent MDP)")
    s.add_argument("path")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--avg", action="store_true", help="average-reward gain, bias and diameter")
    mode.add_argument("--finite", action="store_true", help="finite-horizon backward induction (default)")
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("run", help="run seed 0 of a config and print rows")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_run)

    w = sub.add_parser("sweep", help="run a full sweep and write CSV")
    w.add_argument("--config", required=True)
    w.add_argument("--out", help="override the config's output path")
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="separation, diameter and complexity of a class")
    a.add_argument("path")
    a.add_argument("--eps", type=float, help="tolerance for eluder and cover (default 1/H)")
    a.set_defaults(func=cmd_analyze)

    rep = sub.add_parser("report", help="summarize sweep CSVs")
    rep.add_argument("results", nargs="+")
    rep.add_argument("--out", required=True)
    rep.add_argument("--csv", help="also write a plot-ready CSV")
    rep.add_argument("--enforce", action="store_true", help="exit 3 when a threshold check fails")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, UnboundedSpanError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
