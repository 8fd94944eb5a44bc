"""Command-line front end: ``divehmm <subcommand> [options]``.

Settings come from a YAML config (the bundled default when ``--config`` is
omitted) and are overridden by flags. Exit codes: 0 success, 1 usage or
config error, 2 data validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .ctmc_kernel import (STATE_NAMES, KernelCache, KernelError, SharedMovementParams, build_rate_matrix,
                          expand_states, simulate_endpoints, transition_kernel)
from .data_model import CelestialLabel, DataError, GridConfig, load_config, load_dataset, write_dataset
from .predictive import DEFAULT_HORIZON, QUANTILES, counterfactual_assessment, predictive_hitting_distribution, template_starts
from .sampler import (PriorConfig, MCMCConfig, convergence_report, pool_chains, read_samples, run_chains,
                      summarize, write_samples)

log = logging.getLogger("divehmm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("simulate-data", "fit", "predict", "assess", "kernel-check")


class ConfigError(ValueError):
    pass


class CheckFailure(ArithmeticError):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one command."""

    grid: GridConfig = field(default_factory=GridConfig)
    seed: int = 0
    out: Path = Path("divehmm-out")
    data: Path | None = None
    posterior: Path | None = None
    n_tags: int = 4
    n_steps: int = 2000
    exposure_index: int | None = 1400
    truth: dict = field(default_factory=dict)
    chains: int = 2
    iterations: int = 2000
    burn_in: int | None = None
    thin: int = 10
    sims: int = 50
    horizon: int = DEFAULT_HORIZON
    max_samples: int = 100
    mc_paths: int = 100_000
    tolerance: float = 1e-9
    mc_tolerance: float = 1e-2

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.chains < 1:
            raise ConfigError("chains must be at least 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if self.burn_in is not None and not 0 <= self.burn_in < self.iterations:
            raise ConfigError("iterations must exceed burn-in")
        if self.thin < 1 or self.sims < 1 or self.horizon < 1 or self.max_samples < 1:
            raise ConfigError("thin, sims, horizon-steps and max_samples must be positive")
        if self.n_tags < 1:
            raise ConfigError("simulate.n_tags must be at least 1")
        if self.mc_paths < 1:
            raise ConfigError("kernel_check.mc_paths must be positive")

    @property
    def data_path(self) -> Path:
        return self.data if self.data is not None else self.out / "data.csv"

    @property
    def posterior_path(self) -> Path:
        return self.posterior if self.posterior is not None else self.out / "posterior.jsonl"

    def mcmc(self) -> MCMCConfig:
        return MCMCConfig(self.iterations, self.burn_in, self.thin, self.seed)


def default_config_text() -> str:
    return resources.files("divehmm").joinpath("data/default.yaml").read_text()


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return sec


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the YAML config and command-line flags (flags win)."""
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        else:
            cfg = yaml.safe_load(default_config_text()) or {}
    except (OSError, yaml.YAMLError, ValueError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    paths, sim, mcmc = _section(cfg, "paths"), _section(cfg, "simulate"), _section(cfg, "mcmc")
    pred, kc = _section(cfg, "predict"), _section(cfg, "kernel_check")

    def pick(flag, value):
        return flag if flag is not None else value

    try:
        grid = GridConfig.from_mapping(_section(cfg, "grid"))
        base = Path(args.config).parent if args.config is not None else Path.cwd()

        def path(value):
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        out = Path(args.out) if args.out is not None else path(paths.get("out", "divehmm-out"))
        burn = pick(args.burnin, mcmc.get("burn_in"))
        exposure = sim.get("exposure_index", 1400)
        return RunConfig(
            grid=grid,
            seed=int(pick(args.seed, cfg.get("seed", 0))),
            out=out,
            data=Path(args.data) if args.data is not None else path(paths.get("data")),
            posterior=Path(args.posterior) if args.posterior is not None else path(paths.get("posterior")),
            n_tags=int(sim.get("n_tags", 4)),
            n_steps=int(sim.get("n_steps", 2000)),
            exposure_index=None if exposure is None else int(exposure),
            truth=dict(sim.get("truth") or {}),
            chains=int(pick(args.chains, mcmc.get("chains", 2))),
            iterations=int(pick(args.iters, mcmc.get("iterations", 2000))),
            burn_in=None if burn is None else int(burn),
            thin=int(pick(args.thin, mcmc.get("thin", 10))),
            sims=int(pick(args.sims, pred.get("sims", 50))),
            horizon=int(pick(args.horizon_steps, pred.get("horizon_steps", DEFAULT_HORIZON))),
            max_samples=int(pred.get("max_samples", 100)),
            mc_paths=int(kc.get("mc_paths", 100_000)),
            tolerance=float(kc.get("tolerance", 1e-9)),
            mc_tolerance=float(kc.get("mc_tolerance", 1e-2)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# --- output helpers ---------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, rows: list[dict], header=None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _load_dataset(cfg: RunConfig):
    path = cfg.data_path
    if not path.is_file():
        raise ConfigError(f"data file {path} not found")
    return load_dataset(path, cfg.grid)


def _load_posterior(cfg: RunConfig):
    path = cfg.posterior_path
    if not path.is_file():
        raise ConfigError(f"posterior file {path} not found; run `divehmm fit` first")
    samples = read_samples(path)
    if not samples:
        raise ConfigError(f"posterior file {path} is empty")
    if len(samples) > cfg.max_samples:
        # evenly spaced subset, always including the last draw
        idx = np.linspace(0, len(samples) - 1, cfg.max_samples).round().astype(int)
        samples = [samples[i] for i in np.unique(idx)]
    return samples


# --- commands ---------------------------------------------------------------

def cmd_simulate_data(cfg: RunConfig) -> list[Path]:
    from .synthetic import TRUTH_SHARED, simulate_dataset

    shared = TRUTH_SHARED
    if cfg.truth:
        t = cfg.truth
        shared = SharedMovementParams.from_deeper_ascent(
            float(t.get("lambda1", shared.lambda_slow)), float(t.get("lambda2", shared.lambda_fast)),
            float(t.get("pi1", shared.pi_descent)), float(t.get("ascent_deeper", shared.ascent_deeper)))
    if cfg.exposure_index is not None and not 12 <= cfg.exposure_index < cfg.n_steps - 1:
        raise ConfigError("simulate.exposure_index must lie in [12, n_steps - 1)")
    dataset, coefs = simulate_dataset(cfg.n_tags, cfg.n_steps, cfg.seed, cfg.grid.grid, shared,
                                      cfg.exposure_index, cfg.grid.delta)
    cfg.out.mkdir(parents=True, exist_ok=True)
    data_path = cfg.out / "data.csv"
    write_dataset(dataset, data_path)
    truth = {
        "seed": cfg.seed,
        "lambda1": shared.lambda_slow,
        "lambda2": shared.lambda_fast,
        "pi1": shared.pi_descent,
        "pi2": shared.pi_ascent,
        "ascent_deeper": shared.ascent_deeper,
        "tag_ids": dataset.tag_ids,
        "intercepts": coefs.intercepts.tolist(),
        "fixed": coefs.fixed.tolist(),
        "exposure_index": cfg.exposure_index,
        "grid": cfg.grid.to_mapping(),
    }
    truth_path = cfg.out / "truth.json"
    write_json(truth_path, truth)
    return [data_path, truth_path]


def cmd_fit(cfg: RunConfig) -> list[Path]:
    dataset = _load_dataset(cfg).baseline()
    chains = run_chains(dataset, PriorConfig(), cfg.mcmc(), cfg.chains)
    pooled = pool_chains(chains)
    cfg.out.mkdir(parents=True, exist_ok=True)
    post = cfg.out / "posterior.jsonl"
    write_samples(post, pooled)
    summary = cfg.out / "summary.csv"
    write_csv(summary, summarize(pooled))
    conv = cfg.out / "convergence.csv"
    report = convergence_report(chains)
    write_csv(conv, [{"parameter": k, "rhat": v} for k, v in report.items()])
    return [post, summary, conv]


def _predictive_rows(cfg: RunConfig, samples, stats_: tuple[str, ...]) -> dict[str, list[dict]]:
    grid = cfg.grid
    cache = KernelCache(grid.grid, grid.delta)
    out = {s: [] for s in stats_}
    cell = 0
    for template in template_starts():
        for k, state in enumerate(STATE_NAMES):
            for label in CelestialLabel:
                start = replace(template, state=k, celestial=int(label))
                dist = predictive_hitting_distribution(
                    start, samples, cfg.sims, cfg.horizon, grid.grid, grid.deep_threshold,
                    grid.shallow_threshold, grid.delta, seed=cfg.seed + cell, cache=cache)
                cell += 1
                for stat in stats_:
                    row = {"statistic": stat, "start_template": template.name, "initial_state": state,
                           "celestial": label.code}
                    row.update(dist.summary(stat))
                    out[stat].append(row)
    return out


def cmd_predict(cfg: RunConfig) -> list[Path]:
    samples = _load_posterior(cfg)
    tables = _predictive_rows(cfg, samples, ("h1", "h2", "gap"))
    cfg.out.mkdir(parents=True, exist_ok=True)
    header = ["statistic", "start_template", "initial_state", "celestial", "mean_min", "sd_min",
              *[f"q{int(round(q * 100)):02d}_min" for q in QUANTILES], "censor_rate"]
    h1 = cfg.out / "predictive.csv"
    write_csv(h1, tables["h1"], header)
    later = cfg.out / "predictive_h2.csv"
    write_csv(later, tables["h2"] + tables["gap"], header)
    return [h1, later]


def cmd_assess(cfg: RunConfig) -> list[Path]:
    dataset = _load_dataset(cfg)
    if not dataset.exposed():
        raise DataError("no exposed tags in the dataset")
    samples = _load_posterior(cfg)
    result = counterfactual_assessment(dataset, samples, cfg.sims, cfg.horizon, seed=cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    table = cfg.out / "assessment.csv"
    write_csv(table, result.rows(), ["tag_id", "h1_obs_steps", "h2_obs_steps", "h1_censored", "h2_censored",
                                     "tail_p_h1", "tail_p_gap", "pit_h1", "pit_gap"])
    uni = cfg.out / "uniformity.json"
    write_json(uni, result.summary)
    return [table, uni]


def kernel_diagnostics(cfg: RunConfig, params: SharedMovementParams | None = None) -> list[dict]:
    """Row-sum, Chapman-Kolmogorov and Monte-Carlo checks of every movement type's kernel."""
    from .synthetic import TRUTH_SHARED

    params = params or TRUTH_SHARED
    grid, delta = cfg.grid.grid, cfg.grid.delta
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    m = grid.n_bins
    starts = sorted({0, m // 2, m - 1})
    rows = []
    for name, theta in zip(STATE_NAMES, expand_states(params)):
        A = build_rate_matrix(grid, theta)
        P = transition_kernel(A, delta)
        row_sum = float(np.abs(P.sum(axis=1) - 1.0).max())
        ck = float(np.abs(transition_kernel(A, 2 * delta) - P @ P).max())
        tv = 0.0
        for s in starts:
            ends = simulate_endpoints(A, s, delta, cfg.mc_paths, rng)
            freq = np.bincount(ends, minlength=m) / cfg.mc_paths
            tv = max(tv, 0.5 * float(np.abs(freq - P[s]).sum()))
        for check, value, tol in (("row_sum", row_sum, cfg.tolerance),
                                  ("chapman_kolmogorov", ck, cfg.tolerance),
                                  ("monte_carlo_tv", tv, cfg.mc_tolerance)):
            rows.append({"movement_type": name, "check": check, "max_deviation": value,
                         "tolerance": tol, "passed": bool(value <= tol)})
    return rows


def cmd_kernel_check(cfg: RunConfig) -> list[Path]:
    rows = kernel_diagnostics(cfg)
    for r in rows:
        print(f"{r['movement_type']:<17} {r['check']:<19} max deviation {r['max_deviation']:.3e}"
              f"  tolerance {r['tolerance']:.1e}  {'ok' if r['passed'] else 'FAIL'}")
    failed = [r for r in rows if not r["passed"]]
    if failed:
        raise CheckFailure(f"{len(failed)} kernel check(s) failed")
    return []


HANDLERS = {
    "simulate-data": cmd_simulate_data,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "assess": cmd_assess,
    "kernel-check": cmd_kernel_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config (default: the bundled config)")
    common.add_argument("--seed", type=_u64, metavar="U64")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--data", metavar="PATH", help="tag CSV (default: OUT/data.csv)")
    common.add_argument("--posterior", metavar="PATH", help="posterior JSONL (default: OUT/posterior.jsonl)")
    common.add_argument("--chains", type=int, metavar="N")
    common.add_argument("--iters", type=int, metavar="N", help="MCMC sweeps per chain, including burn-in")
    common.add_argument("--burnin", type=int, metavar="N")
    common.add_argument("--thin", type=int, metavar="N")
    common.add_argument("--sims", type=int, metavar="N", help="simulations per posterior draw")
    common.add_argument("--horizon-steps", type=int, metavar="N", dest="horizon_steps")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="divehmm", description="Nonstationary HMM for dive-depth records.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate-data": "write a synthetic multi-tag dataset and its generating parameters",
        "fit": "run MCMC chains and write posterior samples and summaries",
        "predict": "write predictive hitting-time tables for the start-template grid",
        "assess": "counterfactual tail probabilities for exposed tags",
        "kernel-check": "numerical checks of the depth-bin transition kernels",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        written = HANDLERS[args.command](cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"divehmm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"divehmm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckFailure, KernelError, FloatingPointError) as exc:
        print(f"divehmm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation errors come from inputs (dataset or posterior contents)
        print(f"divehmm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for p in written:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
