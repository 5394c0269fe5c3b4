"""Command-line front end: ``run``, ``ablate`` and ``verify``.

Exit status: 0 success, 2 configuration error, 3 trial error,
4 a bound was violated, 5 results do not cover a bound.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import __version__
from .errors import CheckError, ConfigError, TrialError
from .simulator import suite as S
from .theory import VIOLATED, check_bounds

EXIT_OK, EXIT_CONFIG, EXIT_TRIAL, EXIT_BOUND, EXIT_CHECK = 0, 2, 3, 4, 5
OUT_ENV = "SPONSORKV_OUT"

log = logging.getLogger("sponsorkv")


def bundled_configs() -> list[str]:
    root = resources.files("sponsorkv") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def resolve_config(name_or_path: str) -> Path:
    """A path to a config file, or the name of a bundled one (with or without ``.cfg``)."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    stem = p.name[:-4] if p.name.endswith(".cfg") else p.name
    bundled = resources.files("sponsorkv") / "configs" / f"{stem}.cfg"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {name_or_path!r} not found; bundled configs: {', '.join(bundled_configs())}")


def _csv_list(kind):
    def parse(raw: str):
        try:
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot read {raw!r} as a comma-separated {kind.__name__} list")
    return parse


def _overrides(args) -> dict:
    return {"policies": args.policy, "budgets": args.budget, "depths": args.depth,
            "trials": args.trials, "seed": args.seed}


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _manifest(cfg: S.SuiteConfig, outputs: list[Path]) -> dict:
    return {"config": cfg.name, "config_hash": cfg.digest(), "seed": cfg.seed, "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "outputs": [str(p) for p in outputs]}


def cmd_run(args) -> int:
    cfg = S.load_config(resolve_config(args.config), _overrides(args))
    cells = S.run_suite(cfg, args.workers)
    digest = cfg.digest()
    rows = [S.cell_row(cfg, c) for c in cells]
    out = _out_dir(args)
    written = []
    if args.format in ("csv", "all"):
        written.append(out / f"{cfg.name}.csv")
        _write(written[-1], S.csv_text(rows, digest))
    if args.format in ("json", "all"):
        written.append(out / f"{cfg.name}.json")
        _write(written[-1], S.json_text(cfg, cells, digest))
    if written:
        _write(out / f"{cfg.name}.manifest.json", json.dumps(_manifest(cfg, written), indent=1) + "\n")
    print(S.table_text(cfg, cells))
    return EXIT_OK


ABLATE_COLUMNS = ("parameter", "factor", "trials", "retained", "pct", "ci_lo", "ci_hi")


def cmd_ablate(args) -> int:
    cfg = S.load_config(resolve_config(args.config), _overrides(args))
    if args.params:
        cfg = replace(cfg, ablate=S.AblateConfig(args.params, cfg.ablate.factors))
    if args.factors:
        cfg = replace(cfg, ablate=S.AblateConfig(cfg.ablate.parameters, args.factors))
    points = S.run_ablation(cfg, args.workers)
    rows = []
    for p in points:
        lo, hi = S.wilson(p.retained, p.trials)
        rows.append({"parameter": p.parameter, "factor": f"{p.factor:g}", "trials": p.trials,
                     "retained": p.retained, "pct": f"{p.pct:.1f}", "ci_lo": f"{100 * lo:.1f}",
                     "ci_hi": f"{100 * hi:.1f}"})
    spreads = S.ablation_spreads(points)
    out = _out_dir(args)
    path = out / f"{cfg.name}.ablate.csv"
    _write(path, S.csv_text(rows, cfg.digest(), ABLATE_COLUMNS))
    _write(out / f"{cfg.name}.ablate.manifest.json", json.dumps(_manifest(cfg, [path]), indent=1) + "\n")
    print(f"retention spread over factors {', '.join(f'{f:g}' for f in cfg.ablate.factors)}")
    print(f"{'parameter':<12}{'min %':>8}{'max %':>8}{'spread':>8}  sensitive")
    for param, sp in spreads.items():
        pcts = [p.pct for p in points if p.parameter == param]
        print(f"{param:<12}{min(pcts):>8.1f}{max(pcts):>8.1f}{sp:>8.1f}  {'yes' if sp > 0 else 'no'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    path = Path(args.results)
    rows = S.read_csv(path)
    reports = check_bounds(rows, args.bounds)
    print(f"{'bound':<16}{'predicted':>11}{'measured':>10}  verdict     cell")
    for r in reports:
        cell = r.inputs.get("cell") or f"policy={r.inputs.get('policy')} depth={r.inputs.get('depth')}"
        print(f"{r.bound_name:<16}{r.predicted:>11.4g}{r.measured:>10.4g}  {r.verdict:<11} {cell}")
    report_path = path.with_suffix(".bounds.json")
    _write(report_path, json.dumps([r.as_dict() for r in reports], indent=1, default=str) + "\n")
    bad = [r for r in reports if r.verdict == VIOLATED]
    if bad:
        print(f"{len(bad)} of {len(reports)} bound checks violated", file=sys.stderr)
        return EXIT_BOUND
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sponsorkv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log written files")
    sub = parser.add_subparsers(dest="command", required=True)

    def grid_flags(p, default_config):
        p.add_argument("--config", default=default_config,
                       help=f"config path or bundled name (default: {default_config})")
        p.add_argument("--policy", type=_csv_list(str), help="comma-separated policies")
        p.add_argument("--budget", type=_csv_list(int), help="comma-separated cache budgets K")
        p.add_argument("--depth", type=_csv_list(float), help="comma-separated needle depths")
        p.add_argument("--trials", type=int, help="trials per cell")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./results)")

    run = sub.add_parser("run", help="run a suite and write its result table")
    grid_flags(run, "table1")
    run.add_argument("--format", choices=("csv", "json", "table", "all"), default="all",
                     help="files to write; the table is always printed")
    run.set_defaults(func=cmd_run)

    abl = sub.add_parser("ablate", help="sweep utility weights and sponsor budget")
    grid_flags(abl, "ablate")
    abl.add_argument("--params", type=_csv_list(str), help="parameters to sweep")
    abl.add_argument("--factors", type=_csv_list(float), help="multipliers of the defaults")
    abl.set_defaults(func=cmd_ablate)

    ver = sub.add_parser("verify", help="check a result CSV against the closed-form bounds")
    ver.add_argument("results", help="CSV written by 'run'")
    ver.add_argument("--bounds", type=_csv_list(str), help="bounds to require (default: all that apply)")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrialError as exc:
        print(f"trial error: {exc}", file=sys.stderr)
        return EXIT_TRIAL
    except CheckError as exc:
        print(f"check error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
