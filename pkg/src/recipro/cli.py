"""Command-line entry point: ``recipro {movielens,health,prop1,flowvar}``.

Settings are resolved in three layers: built-in defaults, then an optional
JSON config file (``--config``, a flat object of setting names), then flags
given on the command line. Every subcommand writes ``report.json`` plus
plot-ready CSV tables into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .ingest import DataFormatError
from .influence import DiscrepancySeries
from .reciprocity import (
    SCORE_BIN_EDGES,
    SNR_BIN_EDGES,
    aggregate_ledgers,
    reciprocity_report,
    snr,
)
from .reports import report_dict, write_histogram, write_json, write_ledger, write_rows
from .training import DivergenceError

log = logging.getLogger("recipro")

EXIT_INPUT = 1
EXIT_DIVERGENCE = 2


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, data_required: bool = True, method: bool = True) -> None:
    S = argparse.SUPPRESS
    if data_required:
        p.add_argument("--data", default=S, help="input data file")
    p.add_argument("--out-dir", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=S, help="root seed (default 0)")
    p.add_argument("--workers", type=int, default=S, help="parallel worker processes (default 1)")
    if method:
        p.add_argument("--method", choices=["tracin", "marginal"], default=S)
    p.add_argument("--config", help="JSON file of settings; flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")


def _movielens_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--splits", type=int, default=S, help="random splits (default 10)")
    p.add_argument("--repeats", type=int, default=S, help="initializations per split (default 10)")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=S)
    p.add_argument("--dim", type=int, default=S, help="embedding dimension (default 16)")
    p.add_argument("--lambda", dest="reg", type=float, default=S, help="regularization (default 1)")
    p.add_argument("--steps", type=int, default=S, help="gradient steps (default 1000)")
    p.add_argument("--lr", type=float, default=S, help="learning rate (default 0.0002)")
    p.add_argument("--init-scale", dest="init_scale", type=float, default=S,
                   help="std of the embedding initialization (default 0.01)")
    p.add_argument("--clip-norm", dest="clip_norm", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recipro", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("movielens", help="matrix factorization on MovieLens 100K")
    _common(p)
    _movielens_flags(p)
    p.add_argument("--force", action="store_true", default=S,
                   help="allow the very expensive Marginal study")

    p = sub.add_parser("health", help="diabetes / breast-cancer experiments")
    _common(p)
    p.add_argument("--task", choices=sorted(ex.TASKS), default=S)
    p.add_argument("--label-column", dest="label_column", default=S)
    p.add_argument("--splits", type=int, default=S, help="random splits (default 100)")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=S,
                   help="training share of each split (default 0.5)")
    p.add_argument("--steps", type=int, default=S, help="override the task's step count")
    p.add_argument("--lr", type=float, default=S, help="override the task's learning rate")
    p.add_argument("--clip-norm", dest="clip_norm", type=float, default=S)
    p.add_argument("--marginal-step", dest="marginal_step", choices=["held", "literal"], default=S,
                   help="per-example step of leave-one-out retrainings (default held)")

    p = sub.add_parser("prop1", help="Monte-Carlo check of expected reciprocity")
    _common(p, data_required=False, method=False)
    p.add_argument("--trials", type=int, default=S)
    p.add_argument("--individuals", type=int, default=S)
    p.add_argument("--points-per-batch", dest="points_per_batch", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--deploy-size", dest="deploy_size", type=int, default=S)
    p.add_argument("--model", choices=["linear", "mf"], default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--clip-norm", dest="clip_norm", type=float, default=S)

    p = sub.add_parser("flowvar", help="run-to-run variability of MovieLens flows")
    _common(p, method=False)
    _movielens_flags(p)
    p.add_argument("--individuals", type=int, default=S, help="individuals to follow (default 5)")
    p.add_argument("--runs", type=int, default=S, help="training runs (default 10)")
    p.add_argument("--split-index", dest="split_index", type=int, default=S)
    return parser


_CONFIG_CLASSES = {
    "movielens": ex.MovielensConfig,
    "health": ex.HealthConfig,
    "prop1": ex.Prop1Config,
    "flowvar": ex.FlowVarConfig,
}
_NOT_SETTINGS = {"command", "out_dir", "config", "verbose"}


def resolve_config(args: argparse.Namespace):
    """Merge defaults, the optional config file and explicit flags."""
    cls = _CONFIG_CLASSES[args.command]
    fields = {f.name for f in dataclasses.fields(cls)}
    settings = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ValueError(f"{args.config}: invalid JSON ({e})") from None
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: expected a JSON object of settings")
        unknown = sorted(set(loaded) - fields)
        if unknown:
            raise ValueError(f"{args.config}: unknown settings {unknown}")
        settings.update(loaded)
    settings.update({k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS})
    if "data" in fields and "data" not in settings:
        raise ValueError("--data is required")
    if "data" in settings:
        ex.existing_file(settings["data"])
    return cls(**settings)


# ---------------------------------------------------------------------------
# commands


def _pooled_discrepancy(series: list[DiscrepancySeries]):
    series = [s for s in series if s is not None]
    if not series:
        return None
    pooled = DiscrepancySeries(np.concatenate([s.predicted for s in series]),
                               np.concatenate([s.actual for s in series]))
    out = {str(q): v for q, v in pooled.percentiles().items()}
    out["undefined_steps"] = float(pooled.n_undefined)
    return out


def _write_discrepancy(path: Path, series: DiscrepancySeries | None) -> None:
    if series is None:
        return
    rel = series.relative
    write_rows(path, ["step", "predicted_change", "actual_change", "relative_discrepancy"],
               zip(range(len(rel)), series.predicted, series.actual, rel))


def _write_reciprocity(out: Path, name: str, report) -> None:
    write_histogram(out / "histograms" / f"score_{name}.csv", report.scores, SCORE_BIN_EDGES,
                    f"reciprocity scores ({name}, {report.method})")


def _write_snr(out: Path, snr_report) -> None:
    if snr_report is None:
        return
    for side in ("outflow", "inflow"):
        values = getattr(snr_report, f"{side}_snr")
        write_histogram(out / "histograms" / f"snr_{side}.csv", values, SNR_BIN_EDGES,
                        f"{side} signal-to-noise ratio across splits")
    write_rows(out / "snr.csv", ["individual_id", "outflow_snr", "inflow_snr"],
               zip(snr_report.individuals, snr_report.outflow_snr, snr_report.inflow_snr))


def cmd_movielens(cfg: ex.MovielensConfig, out: Path) -> dict:
    runs = ex.run_movielens(cfg)
    for run in runs:
        write_ledger(out / "ledgers" / f"split{run.split:03d}_repeat{run.repeat:03d}.csv", run.ledger)
    all_ledger = aggregate_ledgers([run.ledger for run in runs])
    split_ledgers = ex.per_split_ledgers(runs)
    snr_report = snr(split_ledgers) if len(split_ledgers) >= 2 else None
    report = reciprocity_report(all_ledger, snr_report)
    single = reciprocity_report(split_ledgers[0])
    write_ledger(out / "ledger.csv", all_ledger)
    write_ledger(out / "ledger_single_split.csv", split_ledgers[0])
    _write_reciprocity(out, "all_splits", report)
    _write_reciprocity(out, "single_split", single)
    _write_snr(out, snr_report)
    rmse = np.array([run.rmse for run in runs])
    write_rows(out / "rmse.csv", ["split", "repeat", "rmse", "deploy_loss"],
               [(r.split, r.repeat, r.rmse, r.deploy_loss) for r in runs])
    _write_discrepancy(out / "discrepancy.csv", runs[0].discrepancy)
    doc = report_dict(report)
    doc["single_split"] = report_dict(single)
    doc["discrepancy_percentiles"] = _pooled_discrepancy([r.discrepancy for r in runs])
    doc["rmse"] = {"mean": float(rmse.mean()),
                   "std": float(rmse.std(ddof=1)) if len(rmse) > 1 else 0.0,
                   "n_runs": len(rmse)}
    doc["deploy_loss"] = float(np.mean([r.deploy_loss for r in runs]))
    doc["config"] = ex.config_dict(cfg)
    log.info("RMSE %.4f; alpha(0.75) %.3f over all splits", doc["rmse"]["mean"], report.alpha(0.75))
    return doc


def cmd_health(cfg: ex.HealthConfig, out: Path) -> dict:
    results = ex.run_health(cfg)
    for r in results:
        write_ledger(out / "ledgers" / f"split{r.split:03d}.csv", r.ledger)
    ledgers = [r.ledger for r in results]
    agg = aggregate_ledgers(ledgers)
    snr_report = snr(ledgers) if len(ledgers) >= 2 else None
    report = reciprocity_report(agg, snr_report)
    write_ledger(out / "ledger.csv", agg)
    _write_reciprocity(out, "aggregate", report)
    _write_snr(out, snr_report)
    write_rows(out / "deploy_loss.csv", ["split", "mean_deploy_loss"],
               [(r.split, r.deploy_loss) for r in results])
    _write_discrepancy(out / "discrepancy.csv", results[0].discrepancy)
    doc = report_dict(report)
    doc["discrepancy_percentiles"] = _pooled_discrepancy([r.discrepancy for r in results])
    doc["deploy_loss"] = float(np.mean([r.deploy_loss for r in results]))
    doc["config"] = ex.config_dict(cfg)
    log.info("%s %s: alpha(0.75) %.3f, deploy loss %.4g", cfg.task, cfg.method,
             report.alpha(0.75), doc["deploy_loss"])
    return doc


def cmd_prop1(cfg: ex.Prop1Config, out: Path) -> dict:
    if cfg.trials < 2:
        raise ValueError("--trials must be at least 2 for a standard error")
    res = ex.run_prop1(cfg)
    k = res.inflow.shape[1]
    rows = [(u, res.inflow[:, u].mean(), res.outflow[:, u].mean(), res.mean_difference[u],
             res.standard_error[u], res.z_scores[u]) for u in range(k)]
    header = ["individual", "mean_inflow", "mean_outflow", "mean_difference", "standard_error", "z"]
    write_rows(out / "prop1.csv", header, rows)
    write_rows(out / "trials.csv", ["trial", "individual", "inflow", "outflow"],
               [(t, u, res.inflow[t, u], res.outflow[t, u])
                for t in range(res.inflow.shape[0]) for u in range(k)])
    verdict = "PASS" if res.passed else "FAIL"
    print(f"{verdict}: max |mean I - mean O| / SE = {res.z_scores.max():.3f} over {cfg.trials} trials")
    return {
        "verdict": verdict,
        "trials": cfg.trials,
        "max_z": float(res.z_scores.max()),
        "individuals": [dict(zip(header, row)) for row in rows],
        "symmetry_gap": res.symmetry_gap,
        "symmetry_scale": res.symmetry_scale,
        "clipped_symmetry_gap": res.clipped_symmetry_gap,
        "config": ex.config_dict(cfg),
    }


def _summary(values: np.ndarray) -> dict:
    q = np.percentile(values, [5, 25, 50, 75, 95])
    return {"mean": float(values.mean()), "p5": q[0], "p25": q[1], "p50": q[2], "p75": q[3], "p95": q[4]}


def cmd_flowvar(cfg: ex.FlowVarConfig, out: Path) -> dict:
    res = ex.run_flow_variability(cfg)
    for r, lg in enumerate(res.ledgers):
        write_ledger(out / "ledgers" / f"run{r:03d}.csv", lg)
    write_rows(out / "flowvar.csv", ["run", "individual_id", "normalized_inflow", "normalized_outflow"],
               [(r, u, res.normalized_inflow[r, j], res.normalized_outflow[r, j])
                for r in range(len(res.run_totals)) for j, u in enumerate(res.selected)])
    return {
        "runs": len(res.run_totals),
        "individuals": [{"individual": int(u),
                         "inflow": _summary(res.normalized_inflow[:, j]),
                         "outflow": _summary(res.normalized_outflow[:, j])}
                        for j, u in enumerate(res.selected)],
        "run_total_inflow": res.run_totals,
        "config": ex.config_dict(cfg),
    }


_COMMANDS = {
    "movielens": cmd_movielens,
    "health": cmd_health,
    "prop1": cmd_prop1,
    "flowvar": cmd_flowvar,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        cfg = resolve_config(args)
    except (FileNotFoundError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    try:
        doc = _COMMANDS[args.command](cfg, out)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FileNotFoundError, DataFormatError, ValueError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    path = write_json(out / "report.json", doc)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
