"""Command-line entry point: ``rafda <subcommand> [--config c.json] [--seed n] [--out dir]``.

Exit status is 0 on success, 1 on domain errors (filter divergence, failed
embedding, surrogate blow-up) and 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dynamics import IntegrationDiverged, load_series, write_csv
from .embedding import EmbeddingError, build_delay_vectors, estimate_embedding
from .enkf import FilterConfig, FilterDivergence, run_rafda
from .evaluation import free_run_stats, score_model
from .experiments import (
    ConfigError,
    ExperimentConfig,
    observed_series,
    run_ensemble_study,
    run_noise_sweep,
    stream_rng,
)
from .features import SurrogateBlowUp, free_run, load_model, sample_feature_params, save_model
from .regression import RidgeSolveError, build_training_matrices, ridge_regression

log = logging.getLogger("rafda")

# Extra samples simulated when the embedding is left to auto-selection.
AUTO_PAD = 500
DOMAIN_ERRORS = (FilterDivergence, EmbeddingError, SurrogateBlowUp, IntegrationDiverged, RidgeSolveError)


class UsageError(Exception):
    pass


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; absent keys take the defaults of :class:`ExperimentConfig`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(path)!r}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    return ExperimentConfig.from_json(doc)


def write_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _embedding(cfg: ExperimentConfig, series: np.ndarray) -> tuple[int, int]:
    if cfg.m is not None:
        return int(cfg.m), int(cfg.tau)
    report = estimate_embedding(series)
    log.info("estimated embedding m=%d tau=%d", report.chosen_m, report.chosen_tau)
    return report.chosen_m, report.chosen_tau


def _series(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input file {str(path)!r} does not exist")
    ts = load_series(path)
    return ts.values[:, 0], ts.dt


def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> None:
    span = (cfg.m - 1) * cfg.tau if cfg.m is not None else AUTO_PAD
    truth_train, train = observed_series(cfg, stream_rng(cfg.seed, 0, "train"), cfg.N + 1 + span)
    truth_valid, valid = observed_series(cfg, stream_rng(cfg.seed, 0, "valid"), cfg.horizon_steps + 1 + span)
    write_csv(out / "train.csv", train.values, cfg.dt, ["x"])
    write_csv(out / "validation.csv", valid.values, cfg.dt, ["x"])
    write_csv(out / "truth_train.csv", truth_train, cfg.dt)
    write_csv(out / "truth_validation.csv", truth_valid, cfg.dt)


def cmd_embed(args, cfg: ExperimentConfig, out: Path) -> None:
    y, _ = _series(args.input)
    report = estimate_embedding(y, max_lag=args.max_lag, m_max=args.m_max, tau=args.tau)
    doc = report.to_json()
    report.dump(out / "embedding.json")
    print(json.dumps({"m": doc["m"], "tau": doc["tau"]}))


def _train_lr(args, cfg: ExperimentConfig):
    y, dt = _series(args.input)
    m, tau = _embedding(cfg, y)
    Z = build_delay_vectors(y, m, tau)
    if Z.N < 2:
        raise UsageError("training series too short")
    params = sample_feature_params(cfg.D_r, m, cfg.w, cfg.b, stream_rng(cfg.seed, 0, "features"))
    w_lr = ridge_regression(build_training_matrices(Z, params), cfg.beta)
    return Z, params, w_lr, m, tau, dt


def cmd_train_lr(args, cfg: ExperimentConfig, out: Path) -> None:
    _, params, w_lr, m, tau, dt = _train_lr(args, cfg)
    save_model(out / "model_lr.json", params, w_lr, m, tau, dt)


def cmd_train_rafda(args, cfg: ExperimentConfig, out: Path) -> None:
    Z, params, w_lr, m, tau, dt = _train_lr(args, cfg)
    fcfg = FilterConfig.for_delay_vectors([[cfg.eta]], m, alpha=cfg.alpha, gamma_init=cfg.gamma, M=cfg.M)
    try:
        w, diagnostics = run_rafda(Z, params, fcfg, cfg.beta, stream_rng(cfg.seed, 0, "filter"), w_lr=w_lr)
    except FilterDivergence as exc:
        exc.diagnostics.write_csv(out / "diagnostics.csv")
        raise
    diagnostics.write_csv(out / "diagnostics.csv")
    save_model(out / "model_rafda.json", params, w, m, tau, dt)


def _model_and_validation(args):
    if not Path(args.model).exists():
        raise UsageError(f"model file {args.model!r} does not exist")
    params, W, emb = load_model(args.model)
    y, _ = _series(args.input)
    Zv = build_delay_vectors(y, emb["m"], emb["tau"]).vectors.T
    return params, W, emb, Zv


def cmd_forecast(args, cfg: ExperimentConfig, out: Path) -> None:
    params, W, emb, Zv = _model_and_validation(args)
    steps = args.steps if args.steps is not None else len(Zv) - 1
    run = free_run(W, params, Zv[0], steps)
    names = [f"zeta{k}" for k in range(run.shape[1])]
    write_csv(out / "forecast.csv", run, emb["dt"], names)


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> None:
    params, W, emb, Zv = _model_and_validation(args)
    Zv = Zv[: cfg.horizon_steps + 1]
    score = score_model(W, params, Zv, cfg.theta, emb["dt"], cfg.lyapunov_max)
    doc = {"forecast": score.to_json()}
    if args.reference is not None:
        ref, _ = _series(args.reference)
        ref_vectors = build_delay_vectors(ref, emb["m"], emb["tau"]).vectors.T
        n = int(np.ceil(args.attractor_time / (cfg.lyapunov_max * emb["dt"])))
        doc["attractor"] = free_run_stats(W, params, ref_vectors[0], n, ref_vectors).to_json()
    with open(out / "evaluation.json", "w") as fh:
        json.dump(doc, fh, indent=2)
    print(json.dumps({"tau_f": score.tau_f, "raw_steps": score.raw_steps}))


def cmd_study(args, cfg: ExperimentConfig, out: Path) -> None:
    study = run_ensemble_study(cfg, out)
    print(json.dumps({k: study.summary[k] for k in ("n", "lr", "rafda")}))


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> None:
    try:
        etas = sorted(float(e) for e in args.eta.split(","))
    except ValueError:
        raise UsageError(f"--eta must be a comma-separated list of numbers, got {args.eta!r}") from None
    sweep = run_noise_sweep(cfg, etas, out)
    for row in sweep.rows():
        print(" ".join(f"{v:.6g}" for v in row))


COMMANDS = {
    "simulate": cmd_simulate,
    "embed": cmd_embed,
    "train-lr": cmd_train_lr,
    "train-rafda": cmd_train_rafda,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "study": cmd_study,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; absent keys take the default values")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="rafda", description="Random feature maps with ensemble Kalman filtering.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate noisy training and validation series")
    p = sub.add_parser("embed", parents=[common], help="estimate delay and embedding dimension")
    p.add_argument("--input", required=True)
    p.add_argument("--max-lag", type=int, default=50)
    p.add_argument("--m-max", type=int, default=8)
    p.add_argument("--tau", type=int, help="fix the delay and only search the dimension")
    for name in ("train-lr", "train-rafda"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--input", required=True, help="observed series CSV")
    p = sub.add_parser("forecast", parents=[common], help="free-run a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="series supplying the initial delay vector")
    p.add_argument("--steps", type=int)
    p = sub.add_parser("evaluate", parents=[common], help="forecast time and attractor statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="clean validation series")
    p.add_argument("--reference", help="long clean series for attractor statistics")
    p.add_argument("--attractor-time", type=float, default=25.0, help="free-run length in Lyapunov times")
    sub.add_parser("study", parents=[common], help="many-realization forecast-time study")
    p = sub.add_parser("sweep", parents=[common], help="forecast time against noise strength")
    p.add_argument("--eta", required=True, help="comma-separated noise strengths")
    return parser


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(out / "config.resolved.json", cfg)
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, UsageError) as exc:
        print(f"rafda: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"rafda: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"rafda: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
