"""Command-line surface.

Subcommands: ``fit`` (one model on one dataset), ``threshold-scan``
(stability table plus automated selection), ``predict`` (bundle-maximum and
deep-pit-count extrapolation from a stored fit), and ``simulate`` (the
mixture simulation study).  Every command is deterministic given its inputs,
config and seed, writes only under ``--out``, and leaves a run manifest
alongside its outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, analysis, simstudy
from .analysis import derive_lambda_prior
from .model import MODEL_CENSORED, MODEL_STANDARD, Dataset, DatasetError, PriorConfig
from .sampler import SamplerConfig

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

CONFIG_DEFAULTS = {
    # priors; alpha_lambda/beta_lambda null means "derive the exceedance-rate
    # prior mean from the data split at the threshold, with this variance"
    "psi": 1.4,
    "alpha_sigma": 0.04,
    "beta_sigma": 0.4,
    "alpha_lambda": None,
    "beta_lambda": None,
    "lambda_prior_variance": 1.0,
    "mu_prior_mean": 0.1,
    "mu_prior_sd": 2.0,
    # sampler
    "n_chains": 4,
    "n_warmup": 1000,
    "n_draws": 2000,
    "target_accept": 0.3,
    "rhat_threshold": 1.05,
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _timestamp() -> str:
    # honor SOURCE_DATE_EPOCH so seeded runs are byte-for-byte reproducible
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if epoch
        else datetime.now(tz=timezone.utc)
    )
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("BMOT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"BMOT_SEED must be an integer, got {env!r}") from exc
    return 0


def read_input_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``wall_loss[,rounding_halfwidth]``; errors carry line numbers."""
    p = Path(path)
    if not p.exists():
        raise CliError(f"input file not found: {path}")
    with open(p, newline="") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CliError(f"{path}: empty input file")
    header = [c.strip() for c in lines[0].split(",")]
    if header == ["wall_loss"]:
        has_hw = False
    elif header == ["wall_loss", "rounding_halfwidth"]:
        has_hw = True
    else:
        raise CliError(
            f"{path}: line 1: expected header 'wall_loss' or "
            f"'wall_loss,rounding_halfwidth', got {lines[0]!r}"
        )
    values, half_widths = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [c.strip() for c in line.split(",")]
        if len(parts) != (2 if has_hw else 1):
            raise CliError(f"{path}: line {lineno}: expected {2 if has_hw else 1} columns")
        try:
            values.append(float(parts[0]))
            half_widths.append(float(parts[1]) if has_hw else 0.0)
        except ValueError as exc:
            raise CliError(f"{path}: line {lineno}: {exc}") from exc
    if not values:
        raise CliError(f"{path}: no data rows")
    return np.asarray(values), np.asarray(half_widths)


def load_config(path: str | None) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text()) if p.read_text().strip() else {}
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid config: {exc}") from exc
    unknown = set(user) - set(cfg)
    if unknown:
        raise CliError(f"{path}: unknown config keys: {sorted(unknown)}")
    cfg.update(user)
    return cfg


def _priors_from_config(cfg: dict, n: int | None = None, n_minus: int | None = None) -> PriorConfig:
    base = PriorConfig(
        psi=cfg["psi"],
        alpha_sigma=cfg["alpha_sigma"],
        beta_sigma=cfg["beta_sigma"],
        alpha_lambda=1.0,  # placeholder when deriving from data
        beta_lambda=1.0,
        mu_prior_mean=cfg["mu_prior_mean"],
        mu_prior_sd=cfg["mu_prior_sd"],
    )
    if cfg["alpha_lambda"] is not None and cfg["beta_lambda"] is not None:
        return replace(
            base, alpha_lambda=float(cfg["alpha_lambda"]), beta_lambda=float(cfg["beta_lambda"])
        )
    if (cfg["alpha_lambda"] is None) != (cfg["beta_lambda"] is None):
        raise CliError("set both alpha_lambda and beta_lambda, or neither")
    if n is None:
        return base
    v = float(cfg["lambda_prior_variance"])
    template = replace(base, alpha_lambda=1.0 / v, beta_lambda=1.0 / v)  # variance carrier
    return derive_lambda_prior(template, n, n_minus)


def _sampler_from_config(cfg: dict, seed: int) -> SamplerConfig:
    return SamplerConfig(
        n_chains=int(cfg["n_chains"]),
        n_warmup=int(cfg["n_warmup"]),
        n_draws=int(cfg["n_draws"]),
        seed=seed,
        target_accept=float(cfg["target_accept"]),
        rhat_threshold=float(cfg["rhat_threshold"]),
    )


def _write_manifest(out: Path, command: str, args: dict, seed: int, extras: dict | None = None) -> None:
    manifest = {
        "command": command,
        "inputs": args,
        "seed": seed,
        "tool_version": __version__,
        "timestamp": _timestamp(),
        "output_dir": str(out),
    }
    if extras:
        manifest.update(extras)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args) -> int:
    seed = _resolve_seed(args.seed)
    out = _prepare_out(args.out)
    values, half_widths = read_input_csv(args.input)
    cfg = load_config(args.config)
    model_kind = args.model
    if model_kind == MODEL_CENSORED and args.threshold is None:
        raise CliError("the censored model requires --threshold")
    u = args.threshold

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if model_kind == MODEL_CENSORED:
            n_minus = int(np.sum(values <= u))
            priors = _priors_from_config(cfg, values.size, n_minus)
            data = Dataset(values=values, half_widths=half_widths, u=float(u))
        else:
            priors = _priors_from_config(cfg)
            data = Dataset(values=values, half_widths=half_widths, u=-np.inf)
        sampler_cfg = _sampler_from_config(cfg, seed)
        report, samples = analysis.fit(
            values, half_widths, model_kind, u, priors, sampler_cfg, jobs=args.jobs
        )
        rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
        predictive = analysis.posterior_predictive(samples, data, rng)
        qq_rows = analysis.qq_data(samples, data)

    analysis.write_report_json(report, out / "report.json", __version__)
    analysis.write_chains_csv(samples, out / "chains.csv")
    analysis.write_predictive_csv(predictive, out / "predictive.csv")
    analysis.write_qq_csv(qq_rows, out / "qq.csv")
    analysis.write_histogram_csv(values, out / "histogram.csv")
    analysis.write_ecdf_csv(values, out / "ecdf.csv")
    _write_manifest(
        out,
        "fit",
        {"input": args.input, "config": args.config, "model": model_kind, "threshold": u},
        seed,
    )
    for message in dict.fromkeys(str(w.message) for w in caught):
        print(f"warning: {message}", file=sys.stderr)
    print(f"fit written to {out}")
    if not report.converged:
        worst = max(report.rhat.values())
        print(
            f"WARNING: chains not converged (max R-hat {worst:.3f} > "
            f"{sampler_cfg.rhat_threshold}); treat estimates with caution",
            file=sys.stderr,
        )
        if args.strict:
            return EXIT_NUMERICAL
    return EXIT_OK


def _rounding_boundaries(values: np.ndarray, half_widths: np.ndarray) -> list[float]:
    rounded = half_widths > 0
    if not np.any(rounded):
        raise CliError(
            "--auto-from-rounding needs a rounding_halfwidth column with nonzero widths"
        )
    bounds = np.unique(
        np.concatenate(
            [values[rounded] - half_widths[rounded], values[rounded] + half_widths[rounded]]
        )
    )
    # merge boundaries that differ only by accumulated rounding noise
    tol = 1e-9 * max(1.0, float(np.max(np.abs(bounds))))
    merged = [float(bounds[0])]
    for b in bounds[1:]:
        if b - merged[-1] > tol:
            merged.append(float(b))
    keep = [
        b for b in merged if np.sum(values > b) >= 10 and np.sum(values <= b) >= 1
    ]
    if not keep:
        raise CliError("no usable candidate thresholds among the rounding boundaries")
    return keep


def cmd_threshold_scan(args) -> int:
    seed = _resolve_seed(args.seed)
    out = _prepare_out(args.out)
    values, half_widths = read_input_csv(args.input)
    cfg = load_config(args.config)
    if args.candidates:
        try:
            candidates = [float(c) for c in args.candidates.split(",")]
        except ValueError as exc:
            raise CliError(f"--candidates must be a comma-separated list of reals: {exc}")
    else:
        candidates = _rounding_boundaries(values, half_widths)
    base = _priors_from_config(cfg)
    if cfg["alpha_lambda"] is not None:
        v = base.alpha_lambda / base.beta_lambda**2  # keep the configured variance
    else:
        v = float(cfg["lambda_prior_variance"])
    template = replace(base, alpha_lambda=1.0 / v, beta_lambda=1.0 / v)
    sampler_cfg = _sampler_from_config(cfg, seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = analysis.threshold_scan(
            values, half_widths, candidates, template, sampler_cfg, jobs=args.jobs
        )
        selected = analysis.select_threshold(rows)
    analysis.write_scan_csv(rows, out / "scan.csv")
    _write_manifest(
        out,
        "threshold-scan",
        {"input": args.input, "config": args.config, "candidates": candidates},
        seed,
        extras={"selected_threshold": selected},
    )
    for message in dict.fromkeys(str(w.message) for w in caught):
        print(f"warning: {message}", file=sys.stderr)
    print(f"selected threshold: {analysis._float_str(selected)}")
    print(f"scan written to {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    seed = _resolve_seed(args.seed)
    out = _prepare_out(args.out)
    fit_dir = Path(args.fit_dir)
    report_path = fit_dir / "report.json"
    chains_path = fit_dir / "chains.csv"
    for required in (report_path, chains_path):
        if not required.exists():
            raise CliError(f"missing fit output: expected {required}")
    report = json.loads(report_path.read_text())
    model_kind = report["model_kind"]
    u = report["u"] if report["u"] is not None else -np.inf
    samples = analysis.load_chains_csv(chains_path, model_kind, u, seed=report.get("seed", 0))

    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    prediction = analysis.predict_max_wall_loss(samples, args.n_star, rng)
    analysis.write_max_prediction_csv(prediction, out / "max_wall_loss.csv")
    summary = {
        "schema_version": analysis.REPORT_SCHEMA_VERSION,
        "n_star": args.n_star,
        "max_wall_loss": {
            "mean": float(np.mean(prediction.draws)),
            "hdi_lo": prediction.hdi_95[0],
            "hdi_hi": prediction.hdi_95[1],
            "upper_hdi_95": prediction.upper_hdi_95,
        },
    }
    if args.depth is not None:
        if model_kind != MODEL_CENSORED:
            raise CliError("--depth requires a censored-model fit")
        if args.depth < u:
            raise CliError(f"--depth {args.depth} lies below the fit threshold u={u}")
        counts = analysis.expected_exceedance_count(
            samples, args.depth, args.n_star, np.random.default_rng(np.random.SeedSequence((seed, 3)))
        )
        analysis.write_exceedance_csv(counts, out / "exceedance_counts.csv")
        summary["exceedance_count"] = {
            "depth": args.depth,
            "mean": counts.mean,
            "hdi_lo": counts.hdi_95[0],
            "hdi_hi": counts.hdi_95[1],
        }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(
        out,
        "predict",
        {"fit_dir": str(fit_dir), "n_star": args.n_star, "depth": args.depth},
        seed,
    )
    print(f"prediction written to {out}")
    return EXIT_OK


def _scenarios_from_args(args) -> list[simstudy.Scenario]:
    if args.study:
        p = Path(args.study)
        if not p.exists():
            raise CliError(f"study manifest not found: {args.study}")
        try:
            manifest = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.study}: invalid manifest: {exc}") from exc
        try:
            return [simstudy.Scenario(**scn) for scn in manifest["scenarios"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{args.study}: bad scenario definition: {exc}") from exc
    if args.full:
        return simstudy.full_grid()
    xis = [float(x) for x in args.xi.split(",")] if args.xi else list(simstudy.DESK_XI_GRID)
    mgs = (
        [float(x) for x in args.mu_gamma.split(",")]
        if args.mu_gamma
        else list(simstudy.DESK_MU_GAMMA_GRID)
    )
    if not args.unrestricted:
        bad_xi = [x for x in xis if x not in simstudy.XI_GRID]
        bad_mg = [m for m in mgs if m not in simstudy.MU_GAMMA_GRID]
        if bad_xi or bad_mg:
            raise CliError(
                f"grid values outside the study domains (xi {simstudy.XI_GRID}, "
                f"mu_gamma {simstudy.MU_GAMMA_GRID}): xi={bad_xi} mu_gamma={bad_mg}; "
                "pass --unrestricted to allow them"
            )
    return [
        simstudy.Scenario(xi_true=x, mu_gamma=m, replications=args.replications)
        for x in xis
        for m in mgs
    ]


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args.seed)
    out = _prepare_out(args.out)
    scenarios = _scenarios_from_args(args)
    if args.config:
        sampler_cfg = _sampler_from_config(load_config(args.config), seed)
    else:
        sampler_cfg = replace(simstudy.DESK_SAMPLER, seed=seed)
    chains_dir = None
    if args.keep_chains:
        chains_dir = out / "chains"
        chains_dir.mkdir(exist_ok=True)
    results = simstudy.run_study(
        scenarios, seed, sampler_cfg, jobs=args.jobs, keep_chains_dir=chains_dir
    )
    simstudy.write_study_csv(results, out / "study_results.csv")
    total_excluded = sum(r.n_excluded for r in results)
    _write_manifest(
        out,
        "simulate",
        {
            "study": args.study,
            "full": args.full,
            "n_scenarios": len(scenarios),
            "n_datasets": sum(s.replications for s in scenarios),
        },
        seed,
        extras={"excluded_replications": total_excluded},
    )
    if total_excluded:
        print(
            f"warning: {total_excluded} replications excluded (unconverged)",
            file=sys.stderr,
        )
    print(f"study results written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bmot", description=__doc__)
    parser.add_argument("--version", action="version", version=f"bmot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to BMOT_SEED, then 0)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", default=None, help="flat JSON config file")
    common.add_argument(
        "--jobs", type=int, default=os.cpu_count() or 1, help="worker count for chains/replications"
    )

    p = sub.add_parser("fit", parents=[common], help="fit one model to a wall-loss CSV")
    p.add_argument("input", help="CSV with header wall_loss[,rounding_halfwidth]")
    p.add_argument("--model", choices=[MODEL_CENSORED, MODEL_STANDARD], required=True)
    p.add_argument("--threshold", type=float, default=None, help="censoring threshold u")
    p.add_argument("--strict", action="store_true", help="exit 2 on convergence failure")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("threshold-scan", parents=[common], help="threshold stability table")
    p.add_argument("input")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--candidates", help="comma-separated candidate thresholds")
    group.add_argument(
        "--auto-from-rounding",
        action="store_true",
        help="derive candidates from observed rounding-interval boundaries",
    )
    p.set_defaults(func=cmd_threshold_scan)

    p = sub.add_parser("predict", parents=[common], help="extrapolate from a stored fit")
    p.add_argument("fit_dir", help="directory produced by `bmot fit`")
    p.add_argument("--n-star", type=int, required=True, help="number of unobserved tubes")
    p.add_argument("--depth", type=float, default=None, help="pit depth for exceedance counts")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", parents=[common], help="run the mixture simulation study")
    p.add_argument("--study", default=None, help="JSON study manifest defining the grid")
    p.add_argument("--full", action="store_true", help="run the complete 1500-dataset grid")
    p.add_argument("--xi", default=None, help="comma-separated true shape values")
    p.add_argument("--mu-gamma", default=None, help="comma-separated gamma means")
    p.add_argument("--replications", type=int, default=20)
    p.add_argument("--unrestricted", action="store_true", help="allow grid values outside the study domains")
    p.add_argument("--keep-chains", action="store_true", help="retain per-replication chain CSVs")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
