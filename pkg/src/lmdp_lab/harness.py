"""Seeded gap sweeps over horizons, CSV output, and summary reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .analysis import fit_loglog_slope
from .instances import InstanceSpec
from .lmdp import (
    LatentMdp,
    UniformRandomPolicy,
    child_seed,
    gap_monte_carlo,
    solve_dr_optimal,
)
from .mdp_core import (
    TabularMdp,
    UnboundedSpanError,
    ValidationError,
    backward_induction,
    evaluate_markov_policy,
    relative_value_iteration,
)
from .policies import (
    ClassInfo,
    GeneralOptimistic,
    OptimisticElimination,
    SeparatedElimination,
    SeparatedEliminationConfig,
    separation_delta,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SCHEMA = "v1"
POLICIES = ("alg1", "alg3", "alg4", "dr_exact", "markov_opt", "uniform_random")
COLUMNS = (
    "schema", "family", "M", "S", "A", "D", "delta", "H", "policy", "seed", "mstar",
    "gap_mean", "ci", "vstar", "episodes", "estimator", "eliminations", "switches", "mstar_survived",
)
WORKERS_ENV = "LMDP_LAB_WORKERS"
DEFAULT_THRESHOLDS = {
    "alg1": {"flatness_max": 1.5},
    "alg3": {"slope_max": 0.7, "survival_min": 0.95},
    "alg4": {"slope_max": 0.7, "switches_max": 50},
}


@dataclass(frozen=True)
class ExperimentConfig:
    policy: str
    horizons: tuple[int, ...]
    instance: InstanceSpec | None = None
    instance_path: str | None = None
    seeds: int = 1
    episodes: int = 1
    master_seed: int = 0
    c0: float = 1.0
    c: float = 1.0
    n0: int | None = None
    mstar: tuple[int, ...] | None = None  # None sweeps every member
    resample_instance: bool = True
    control_variate: bool = True
    output: str | None = None
    trace: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValidationError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if (self.instance is None) == (self.instance_path is None):
            raise ValidationError("give exactly one of instance or instance_path")
        hs = tuple(int(h) for h in self.horizons)
        if not hs or any(h < 1 for h in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
            raise ValidationError(f"horizons must be positive and strictly increasing, got {list(hs)}")
        object.__setattr__(self, "horizons", hs)
        if self.mstar is not None:
            object.__setattr__(self, "mstar", tuple(int(m) for m in self.mstar))
        if self.seeds < 1 or self.episodes < 1:
            raise ValidationError("seeds and episodes must be >= 1")
        if self.c0 <= 0 or self.c <= 0:
            raise ValidationError("c0 and c must be positive")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(doc.get("instance"), dict):
            doc["instance"] = InstanceSpec.from_dict(doc["instance"])
        if doc.get("instance_path") and base_dir is not None:
            p = Path(doc["instance_path"])
            doc["instance_path"] = str(p if p.is_absolute() else base_dir / p)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text()
        try:
            if path.suffix == ".toml":
                doc = tomllib.loads(text)
            else:
                doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        doc = asdict(self)
        if self.instance is not None:
            doc["instance"] = self.instance.to_dict()
        doc["horizons"] = list(self.horizons)
        if self.mstar is not None:
            doc["mstar"] = list(self.mstar)
        return doc


# ---------------------------------------------------------------------------
# sweep


def _class_for_seed(cfg: ExperimentConfig, i: int) -> tuple[LatentMdp, str]:
    if cfg.instance_path is not None:
        return LatentMdp.load(cfg.instance_path), "file"
    spec = cfg.instance
    if cfg.resample_instance and spec.family == "random_comm":
        seed = child_seed(np.random.SeedSequence([spec.seed, i])) % 2**63
        spec = InstanceSpec(**{**spec.to_dict(), "seed": seed})
    return spec.build(), spec.family


def _solutions(lm: LatentMdp):
    try:
        return [relative_value_iteration(m) for m in lm.mdps]
    except UnboundedSpanError:
        return None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _averaged_mdp(lm: LatentMdp) -> TabularMdp:
    P = np.einsum("m,msan->san", lm.weights, lm.kernels)
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(P, lm.rewards, lm.horizon, lm.start_state)


def _make_policy(cfg: ExperimentConfig, info: ClassInfo | None, seed: int):
    if cfg.policy in ("alg1", "alg3", "alg4") and info is None:
        raise ValidationError(f"{cfg.policy} needs every member communicating")
    if cfg.policy == "alg1":
        return SeparatedElimination(SeparatedEliminationConfig(info, c0=cfg.c0, n0=cfg.n0), seed)
    if cfg.policy == "alg3":
        return OptimisticElimination(info, seed)
    if cfg.policy == "alg4":
        return GeneralOptimistic(info, c=cfg.c, seed=seed)
    raise AssertionError(cfg.policy)


def _seed_cell(cfg: ExperimentConfig, i: int) -> tuple[list[dict], list[dict]]:
    """All rows (and trace records) for seed index i across every horizon."""
    base, family = _class_for_seed(cfg, i)
    sols = _solutions(base)
    M = len(base)
    delta = separation_delta(base.mdps) if M > 1 else None
    D = max(s.diameter for s in sols) if sols is not None else math.inf
    targets = cfg.mstar if cfg.mstar is not None else tuple(range(M))
    if any(not 0 <= j < M for j in targets):
        raise ValidationError(f"mstar {list(targets)} out of range for {M} members")
    rows, traces = [], []
    for H in cfg.horizons:
        lm = base.with_horizon(H)
        info = ClassInfo(lm.mdps, sols) if sols is not None else None
        exact = None
        if cfg.policy == "dr_exact":
            exact = solve_dr_optimal(lm).member_values
        elif cfg.policy == "markov_opt":
            table = backward_induction(_averaged_mdp(lm)).policy
            exact = np.array([evaluate_markov_policy(m, table) for m in lm.mdps])
        for j in targets:
            mstar = lm.mdps[j]
            vstar = float(backward_induction(mstar).value[mstar.start_state])
            common = {
                "schema": SCHEMA, "family": family, "M": M, "S": lm.num_states, "A": lm.num_actions,
                "D": D, "delta": delta, "H": H, "policy": cfg.policy, "seed": i, "mstar": j, "vstar": vstar,
            }
            if exact is not None:
                rows.append({**common, "gap_mean": vstar - float(exact[j]), "ci": 0.0, "episodes": 0,
                             "estimator": "exact", "eliminations": None, "switches": None,
                             "mstar_survived": None})
                continue
            run = np.random.SeedSequence([cfg.master_seed, H, i, j])
            pol_ss, env_ss = run.spawn(2)
            pol_seed = child_seed(pol_ss)
            if cfg.policy == "uniform_random":
                policy = UniformRandomPolicy(lm.num_actions, pol_seed)
            else:
                policy = _make_policy(cfg, info, pol_seed)
            if cfg.trace:
                policy.trace = []
            cv = cfg.control_variate and sols is not None
            est = gap_monte_carlo(mstar, policy, cfg.episodes, env_ss, control_variate=cv,
                                  bias=sols[j].bias if cv else None, vstar=vstar)
            diag = est.diagnostics
            elim = switches = survived = None
            if diag and "survivors" in diag[0]:
                elim = float(np.mean([d["eliminations"] for d in diag]))
                switches = float(np.mean([d["switches"] for d in diag]))
                survived = float(np.mean([j in d["survivors"] for d in diag]))
            rows.append({**common, "gap_mean": est.gap_mean, "ci": est.ci_halfwidth,
                         "episodes": est.episodes, "estimator": est.estimator,
                         "eliminations": elim, "switches": switches, "mstar_survived": survived})
            if cfg.trace and policy.trace is not None:
                for rec in policy.trace:
                    traces.append({"H": H, "seed": i, "mstar": j, **rec})
    return rows, traces


def _sort_key(row: dict) -> tuple:
    return (row["H"], row["seed"], row["policy"], row["mstar"])


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_sweep(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Rows for every (H, seed, M*) cell; identical for any worker count."""
    rows, _ = run_sweep_traced(cfg, workers)
    return rows


def run_sweep_traced(cfg: ExperimentConfig, workers: int | None = None) -> tuple[list[dict], list[dict]]:
    workers = worker_count() if workers is None else workers
    seeds = range(cfg.seeds)
    if workers <= 1:
        cells = [_seed_cell(cfg, i) for i in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_seed_cell, [cfg] * cfg.seeds, seeds))
    rows = sorted((r for cell, _ in cells for r in cell), key=_sort_key)
    traces = [t for _, cell in cells for t in cell]
    traces.sort(key=lambda t: (t["H"], t["seed"], t["mstar"], t["step"]))
    return rows, traces


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def write_rows(rows: list[dict], path: str | Path) -> None:
    Path(path).write_text(rows_to_csv(rows))


def write_trace(records: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def execute(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Run a sweep and write the CSV (and trace) named in the config."""
    rows, traces = run_sweep_traced(cfg, workers)
    if cfg.output:
        write_rows(rows, cfg.output)
        if cfg.trace:
            write_trace(traces, str(cfg.output) + ".trace.jsonl")
    return rows


# ---------------------------------------------------------------------------
# reporting

_INT_COLS = {"M", "S", "A", "H", "seed", "mstar", "episodes"}
_FLOAT_COLS = {"D", "delta", "gap_mean", "ci", "vstar", "eliminations", "switches", "mstar_survived"}


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != COLUMNS:
            raise ValidationError(f"{path}: header does not match schema {SCHEMA}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            row = dict(zip(COLUMNS, raw))
            if row["schema"] != SCHEMA:
                raise ValidationError(f"{path}:{lineno}: schema {row['schema']!r}, expected {SCHEMA!r}")
            for c in _INT_COLS:
                row[c] = int(row[c])
            for c in _FLOAT_COLS:
                row[c] = float(row[c]) if row[c] != "" else None
            rows.append(row)
    return rows


@dataclass
class HorizonSummary:
    H: int
    seeds: int
    worst_case: float  # max over M* of the mean gap over seeds
    worst_mstar: int
    worst_ci: float
    average: float  # mean over M* and seeds
    mean_worst_case: float  # mean over seeds of the per-seed worst case
    survival: float | None
    max_switches: float | None


def summarize_horizon(rows: list[dict]) -> HorizonSummary:
    by_m: dict[int, list[float]] = {}
    by_seed: dict[int, list[float]] = {}
    for r in rows:
        by_m.setdefault(r["mstar"], []).append(r["gap_mean"])
        by_seed.setdefault(r["seed"], []).append(r["gap_mean"])
    means = {m: float(np.mean(v)) for m, v in sorted(by_m.items())}
    worst = max(means, key=lambda m: (means[m], -m))
    vals = np.array(by_m[worst])
    ci = 1.959963984540054 * float(vals.std(ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else math.inf
    surv = [r["mstar_survived"] for r in rows if r["mstar_survived"] is not None]
    sw = [r["switches"] for r in rows if r["switches"] is not None]
    return HorizonSummary(
        H=rows[0]["H"], seeds=len(by_seed), worst_case=means[worst], worst_mstar=worst, worst_ci=ci,
        average=float(np.mean([r["gap_mean"] for r in rows])),
        mean_worst_case=float(np.mean([max(v) for v in by_seed.values()])),
        survival=float(np.mean(surv)) if surv else None,
        max_switches=float(max(sw)) if sw else None,
    )


def summarize_policy(rows: list[dict], thresholds: dict | None = None) -> dict:
    hs = sorted({r["H"] for r in rows})
    per_h = [summarize_horizon([r for r in rows if r["H"] == H]) for H in hs]
    out: dict = {"horizons": [asdict(s) for s in per_h]}
    points = [(s.H, s.worst_case) for s in per_h]
    if len(points) >= 3 and all(g > 0 for _, g in points):
        fit = fit_loglog_slope(points)
        out["slope"], out["stderr"] = fit.slope, fit.stderr
    else:
        out["slope"] = out["stderr"] = None
    hmax = hs[-1]
    ref = [s for s in per_h if s.H * 8 == hmax]
    out["flatness"] = per_h[-1].worst_case / ref[0].worst_case if ref and ref[0].worst_case > 0 else None
    surv = [s.survival for s in per_h if s.survival is not None]
    out["survival"] = float(min(surv)) if surv else None
    sw = [s.max_switches for s in per_h if s.max_switches is not None]
    out["max_switches"] = float(max(sw)) if sw else None
    checks = {}
    for key, limit in (thresholds or {}).items():
        metric, kind = key.rsplit("_", 1)
        value = {"slope": out["slope"], "flatness": out["flatness"], "survival": out["survival"],
                 "switches": out["max_switches"]}[metric]
        ok = value is not None and (value <= limit if kind == "max" else value >= limit)
        checks[key] = {"value": value, "limit": limit, "pass": bool(ok)}
    out["checks"] = checks
    out["pass"] = all(c["pass"] for c in checks.values()) if checks else None
    return out


def report(paths, thresholds: dict | None = None) -> dict:
    """Aggregate sweep CSVs into per-policy summaries with threshold checks."""
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else thresholds
    rows = [r for p in paths for r in read_rows(p)]
    if not rows:
        raise ValidationError("no result rows to report")
    policies = sorted({r["policy"] for r in rows})
    summary = {"schema": SCHEMA, "policies": {}}
    for pol in policies:
        summary["policies"][pol] = summarize_policy([r for r in rows if r["policy"] == pol],
                                                    thresholds.get(pol))
    verdicts = [p["pass"] for p in summary["policies"].values() if p["pass"] is not None]
    summary["pass"] = all(verdicts) if verdicts else None
    return summary


def plot_rows(summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["policy", "H", "worst_case", "worst_ci", "average", "mean_worst_case", "seeds"])
    for pol, body in summary["policies"].items():
        for h in body["horizons"]:
            writer.writerow([pol, h["H"], repr(h["worst_case"]), repr(h["worst_ci"]), repr(h["average"]),
                             repr(h["mean_worst_case"]), h["seeds"]])
    return buf.getvalue()
