"""Suite configuration, trial grids and result files."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from statsmodels.stats.proportion import proportion_confint

from .. import __version__
from ..anchors import DEFAULT_PATTERNS, PatternSet
from ..errors import ConfigError, SponsorKVError, TrialError
from ..policies import POLICY_NAMES, BaselineConfig, PolicySpec, TAConfig, make_policy
from ..core_scoring import UtilityWeights, weights_from_mapping
from .attention import AttentionModel
from .engine import TrialResult, run_batch
from .workload import WorkloadConfig, build_workload, trial_seed

CSV_COLUMNS = ("policy", "K", "depth", "trials", "retained", "pct", "ci_lo", "ci_hi",
               "n", "needle_len", "span", "window", "sinks", "decoys", "injections",
               "sponsor_budget", "partition", "tie_break", "allowlist")

ABLATE_PARAMETERS = ("alpha", "beta", "gamma", "delta", "lambda", "budget")


@dataclass(frozen=True)
class AblateConfig:
    parameters: tuple[str, ...] = ABLATE_PARAMETERS
    factors: tuple[float, ...] = (0.5, 0.75, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class SuiteConfig:
    name: str = "suite"
    policies: tuple[str, ...] = ("ta-fast-regex",)
    budgets: tuple[int, ...] = (16,)
    depths: tuple[float, ...] = (0.5,)
    trials: int = 10
    seed: int = 0
    batch_size: int = 256
    workload: WorkloadConfig = WorkloadConfig()
    ta: TAConfig = TAConfig()
    weights: UtilityWeights | None = None
    tova: BaselineConfig = BaselineConfig(4, 12)
    streaming: BaselineConfig = BaselineConfig(4, None)
    allowlist: tuple[str, ...] | None = None
    ablate: AblateConfig = AblateConfig()

    def __post_init__(self) -> None:
        if not self.policies or not self.budgets or not self.depths:
            raise ConfigError("suite grid is empty: policies, budgets and depths all need values")
        for p in self.policies:
            if p not in POLICY_NAMES:
                raise ConfigError(f"[suite] policies: unknown policy {p!r}")
        if any(k < 3 for k in self.budgets):
            raise ConfigError("[suite] budgets: every K must be >= 3")
        if self.trials < 1 or self.batch_size < 1:
            raise ConfigError("[suite] trials and batch_size must be >= 1")

    def policy(self, name: str) -> PolicySpec:
        if name == "tova":
            return make_policy(name, baseline=self.tova)
        if name == "streaming":
            return make_policy(name, baseline=self.streaming)
        return make_policy(name, self.ta, weights=self.weights)

    def patterns(self) -> PatternSet | None:
        if self.allowlist is None:
            return None
        return PatternSet(DEFAULT_PATTERNS, frozenset(self.allowlist))

    def canonical(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(f"{__version__}\n{blob}".encode()).hexdigest()[:16]


# ---------------------------------------------------------------- config files

def _split(raw: str) -> list[str]:
    return [x.strip() for x in raw.replace("\n", ",").split(",") if x.strip()]


def _typed(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            v = raw.strip().lower()
            if v not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return v in ("true", "yes", "1", "on")
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def _list(section: str, key: str, raw: str, kind) -> tuple:
    vals = tuple(_typed(section, key, x, kind) for x in _split(raw))
    if not vals:
        raise ConfigError(f"[{section}] {key}: empty list")
    return vals


_SCHEMA = {
    "suite": {"name": str, "policies": [str], "budgets": [int], "depths": [float], "trials": int,
              "seed": int, "batch_size": int},
    "workload": {"n": int, "needle_len": int, "decoys": int, "injections": int, "query_offset": int,
                 "zipf": float},
    "attention": {"epsilon": float, "salience": float, "noise": float, "recency": float, "sink_boost": float, "suppress": float},
    "ta": {"span": int, "sponsor_budget": float, "sinks": int, "window": int, "partition": str,
           "tie_break": str, "ema": float},
    "baselines": {"tova_sinks": int, "tova_window": int, "streaming_sinks": int},
    "patterns": {"allowlist": [str]},
    "ablate": {"parameters": [str], "factors": [float]},
}


def parse_config(text: str, source: str = "<config>") -> dict[str, dict]:
    """INI text to a nested dict of typed values; unknown sections and keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section == "weights":
            out["weights"] = dict(parser.items(section))
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        vals = {}
        for key, raw in parser.items(section):
            kind = _SCHEMA[section].get(key)
            if kind is None:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            if section == "patterns" and key == "allowlist":
                vals[key] = tuple(ln.strip() for ln in raw.splitlines() if ln.strip())
            elif isinstance(kind, list):
                vals[key] = _list(section, key, raw, kind[0])
            else:
                vals[key] = _typed(section, key, raw, kind)
        out[section] = vals
    return out


def build_config(values: Mapping[str, Mapping], overrides: Mapping[str, object] | None = None) -> SuiteConfig:
    """SuiteConfig from parsed sections; ``overrides`` are ``suite``-level keys that win."""
    suite = dict(values.get("suite", {}))
    for k, v in (overrides or {}).items():
        if v is not None:
            suite[k] = v
    att = AttentionModel(**values.get("attention", {}))
    workload = WorkloadConfig(attention=att, **values.get("workload", {}))
    ta_vals = dict(values.get("ta", {}))
    if "sponsor_budget" in ta_vals:
        ta_vals["budget"] = ta_vals.pop("sponsor_budget")
    ta = TAConfig(**ta_vals)
    weights = weights_from_mapping(values["weights"]) if "weights" in values else None
    base = values.get("baselines", {})
    tova = BaselineConfig(base.get("tova_sinks", 4), base.get("tova_window", 12))
    streaming = BaselineConfig(base.get("streaming_sinks", 4), None)
    allow = values.get("patterns", {}).get("allowlist")
    if allow is not None:
        PatternSet(DEFAULT_PATTERNS, frozenset(allow))  # validates subset
    abl = values.get("ablate", {})
    ablate = AblateConfig(tuple(abl.get("parameters", ABLATE_PARAMETERS)),
                          tuple(abl.get("factors", AblateConfig.factors)))
    for p in ablate.parameters:
        if p not in ABLATE_PARAMETERS:
            raise ConfigError(f"[ablate] parameters: unknown parameter {p!r}")
    try:
        return SuiteConfig(workload=workload, ta=ta, weights=weights, tova=tova, streaming=streaming,
                           allowlist=allow, ablate=ablate, **suite)
    except TypeError as exc:
        raise ConfigError(f"bad suite settings: {exc}") from None


def load_config(path: str | Path, overrides: Mapping[str, object] | None = None) -> SuiteConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(parse_config(text, str(path)), overrides)


# ---------------------------------------------------------------- running

@dataclass(frozen=True)
class CellResult:
    policy: str
    K: int
    depth: float
    results: tuple[TrialResult, ...] = field(repr=False)

    @property
    def trials(self) -> int:
        return len(self.results)

    @property
    def retained(self) -> int:
        return sum(r.needle_retained for r in self.results)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.results]


def wilson(count: int, nobs: int) -> tuple[float, float]:
    lo, hi = proportion_confint(count, nobs, alpha=0.05, method="wilson")
    return float(lo), float(hi)


def _run_task(task) -> tuple[tuple, list[tuple[float, TrialResult]]]:
    cfg, policy, K, items = task
    workloads = [build_workload(replace(cfg.workload, needle_depth=d, seed=trial_seed(cfg.seed, i)))
                 for d, i in items]
    results = run_batch(cfg.policy(policy), workloads, K, cfg.patterns())
    return (policy, K), [(d, r) for (d, _), r in zip(items, results)]


def _tasks(cfg: SuiteConfig) -> list[tuple]:
    # depths share a batch: trials only need a common length and query position
    items = [(d, i) for d in cfg.depths for i in range(cfg.trials)]
    out = []
    for policy in cfg.policies:
        for K in cfg.budgets:
            for lo in range(0, len(items), cfg.batch_size):
                out.append((cfg, policy, K, tuple(items[lo:lo + cfg.batch_size])))
    return out


def run_suite(cfg: SuiteConfig, workers: int = 1) -> list[CellResult]:
    """Every (policy, K, depth) cell over ``cfg.trials`` seeded trials.

    Trial ``i`` uses the same seed in every cell, so cells differ only by
    policy, budget and depth. Output does not depend on ``workers``.
    """
    tasks = _tasks(cfg)
    try:
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(_run_task, tasks))
        else:
            done = [_run_task(t) for t in tasks]
    except SponsorKVError:
        raise
    except Exception as exc:  # a crashed trial must never pass silently
        raise TrialError(f"trial failed: {exc!r}") from exc
    grouped: dict[tuple, list[TrialResult]] = {}
    for (policy, K), res in done:
        for depth, r in res:
            grouped.setdefault((policy, K, depth), []).append(r)
    return [CellResult(p, K, d, tuple(grouped[(p, K, d)]))
            for p in cfg.policies for K in cfg.budgets for d in cfg.depths]


def cell_row(cfg: SuiteConfig, cell: CellResult) -> dict[str, object]:
    lo, hi = wilson(cell.retained, cell.trials)
    ta = cfg.ta
    spec = cfg.policy(cell.policy)
    if spec.kind == "ta":
        sinks, window = ta.mandatory_layout(cell.K)
    elif spec.baseline is not None:
        sinks, window = spec.baseline.resolve(cell.K)
    else:
        sinks, window = 0, 0
    return {
        "policy": cell.policy, "K": cell.K, "depth": f"{cell.depth:g}", "trials": cell.trials,
        "retained": cell.retained, "pct": f"{100.0 * cell.retained / cell.trials:.1f}",
        "ci_lo": f"{100.0 * lo:.1f}", "ci_hi": f"{100.0 * hi:.1f}",
        "n": cfg.workload.n, "needle_len": cfg.workload.needle_len,
        "span": ta.span if spec.kind == "ta" else "", "window": window, "sinks": sinks,
        "decoys": cfg.workload.decoys, "injections": cfg.workload.injections,
        "sponsor_budget": f"{ta.budget:g}" if spec.kind == "ta" else "",
        "partition": ta.partition if spec.kind == "ta" else "",
        "tie_break": ta.tie_break if spec.kind == "ta" else "",
        "allowlist": "yes" if cfg.allowlist is not None else "no",
    }


# ---------------------------------------------------------------- output

def csv_text(rows: Sequence[Mapping[str, object]], manifest_hash: str,
             columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    buf.write(f"# sponsorkv results manifest={manifest_hash}\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read results {path}: {exc}") from None
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    return list(csv.DictReader(body))


def json_text(cfg: SuiteConfig, cells: Iterable[CellResult], manifest_hash: str) -> str:
    out = {"manifest": manifest_hash, "config": cfg.canonical(), "cells": []}
    for cell in cells:
        row = cell_row(cfg, cell)
        row["seeds"] = cell.seeds
        row["needle_ranks"] = [r.needle_rank for r in cell.results]
        row["digests"] = [r.retained_history_digest for r in cell.results]
        out["cells"].append(row)
    return json.dumps(out, indent=1, sort_keys=True, default=str) + "\n"


def table_text(cfg: SuiteConfig, cells: Sequence[CellResult]) -> str:
    """Retention grid, one block per depth: policies down, budgets across."""
    by = {(c.policy, c.K, c.depth): c for c in cells}
    width = max(len(p) for p in cfg.policies) + 2
    lines = []
    for depth in cfg.depths:
        lines.append(f"retention % at depth {depth:g} ({cfg.trials} trials per cell)")
        lines.append("policy".ljust(width) + "".join(f"K={k}".rjust(9) for k in cfg.budgets))
        for p in cfg.policies:
            vals = []
            for k in cfg.budgets:
                c = by[(p, k, depth)]
                vals.append(f"{100.0 * c.retained / c.trials:.1f}".rjust(9))
            lines.append(p.ljust(width) + "".join(vals))
        lines.append("")
    return "\n".join(lines)


def retention_rate(cells: Iterable[CellResult]) -> tuple[int, int]:
    cells = list(cells)
    return sum(c.retained for c in cells), sum(c.trials for c in cells)


def spread(pcts: Sequence[float]) -> float:
    return (max(pcts) - min(pcts)) if pcts else math.nan


# ---------------------------------------------------------------- sensitivity sweeps

@dataclass(frozen=True)
class AblationPoint:
    parameter: str
    factor: float
    retained: int
    trials: int

    @property
    def pct(self) -> float:
        return 100.0 * self.retained / self.trials


def ablation_grid(cfg: SuiteConfig) -> list[tuple[str, float, SuiteConfig]]:
    """One suite per (parameter, factor); the rest of the config stays at its defaults."""
    if not cfg.ablate.parameters or not cfg.ablate.factors:
        raise ConfigError("[ablate] grid is empty")
    if any(f <= 0 for f in cfg.ablate.factors):
        raise ConfigError("[ablate] factors must be positive")
    if len(cfg.policies) != 1:
        raise ConfigError("[suite] policies: an ablation sweeps exactly one policy")
    base = cfg.policy(cfg.policies[0])
    if base.kind != "ta":
        raise ConfigError("[suite] policies: only sponsored policies have utility weights to sweep")
    out = []
    for param in cfg.ablate.parameters:
        for f in cfg.ablate.factors:
            if param == "budget":
                sub = replace(cfg, ta=replace(cfg.ta, budget=cfg.ta.budget * f))
            else:
                sub = replace(cfg, weights=base.ta.weights.scaled(param, f))
            out.append((param, f, sub))
    return out


def run_ablation(cfg: SuiteConfig, workers: int = 1) -> list[AblationPoint]:
    points = []
    for param, f, sub in ablation_grid(cfg):
        kept, total = retention_rate(run_suite(sub, workers))
        points.append(AblationPoint(param, f, kept, total))
    return points


def ablation_spreads(points: Sequence[AblationPoint]) -> dict[str, float]:
    """Retention spread (percentage points) per parameter, in sweep order."""
    by: dict[str, list[float]] = {}
    for p in points:
        by.setdefault(p.parameter, []).append(p.pct)
    return {k: spread(v) for k, v in by.items()}
