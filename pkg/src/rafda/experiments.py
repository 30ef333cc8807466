"""Many-realization studies: forecast-time statistics and the noise sweep.

Every realization draws its training data, validation data, feature
parameters and filter noise from separate streams derived from
(master seed, realization index, stream label), so adding realizations or
changing the order they run in never changes an existing result.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy.stats

from .dynamics import DatasetConfig, ObservationModel, observe, simulate
from .embedding import build_delay_vectors, estimate_embedding
from .enkf import FilterConfig, FilterDivergence, run_rafda
from .evaluation import AttractorStats, free_run_stats, histogram, score_model
from .features import FeatureParams, SurrogateBlowUp, WeightMatrix, free_run, sample_feature_params
from .regression import build_training_matrices, ridge_regression

log = logging.getLogger(__name__)

STREAMS = {"train": 0, "valid": 1, "features": 2, "filter": 3}
REALIZATION_FIELDS = ["seed", "eta", "tau_f_lr", "tau_f_rafda", "diverged", "wall_ms"]
SWEEP_FIELDS = ["eta", "mean_lr", "std_lr", "mean_rafda", "std_rafda", "n"]
HISTOGRAM_WIDTH = 0.25
INTEGER_KEYS = frozenset({"N", "D_r", "M", "m", "tau", "n_realizations", "seed", "substeps"})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dt: float = 0.02
    eta: float = 0.2
    transient: float = 40.0
    N: int = 4000
    D_r: int = 300
    w: float = 0.005
    b: float = 4.0
    M: int = 300
    beta: float = 2e-5
    alpha: float = 1.0002
    gamma: float = 0.01
    theta: float = 40.0
    lyapunov_max: float = 0.91
    m: int | None = 3
    tau: int | None = 10
    n_realizations: int = 50
    seed: int = 0
    horizon: float = 10.0  # Lyapunov times
    substeps: int = 10

    def __post_init__(self):
        positive = ["dt", "N", "D_r", "M", "theta", "lyapunov_max", "n_realizations", "horizon", "substeps"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("eta", "transient", "w", "b", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if not self.alpha >= 1.0:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha!r}")
        if self.M < 2:
            raise ConfigError(f"M must be at least 2, got {self.M}")
        if (self.m is None) != (self.tau is None):
            raise ConfigError("m and tau must be pinned together or both left to auto-selection (null)")
        for name in ("m", "tau"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or int(v) != v or v < 1):
                raise ConfigError(f"{name} must be a positive integer or null, got {v!r}")
        for name in ("N", "D_r", "M", "n_realizations", "substeps", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite, got {v!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def horizon_steps(self) -> int:
        return int(math.ceil(self.horizon / (self.lyapunov_max * self.dt)))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if value is None and key in ("m", "tau"):
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number, got {value!r}")
            if key in INTEGER_KEYS and not isinstance(value, int):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_json({**self.to_json(), **changes})


@dataclass
class RealizationResult:
    seed: int
    eta: float
    tau_f_lr: float
    tau_f_rafda: float
    diverged: bool
    wall_ms: float

    def __post_init__(self):
        if self.tau_f_lr < 0 or self.tau_f_rafda < 0:
            raise ValueError("forecast times are non-negative")

    def row(self) -> list[str]:
        return [
            str(self.seed),
            f"{self.eta:.17g}",
            f"{self.tau_f_lr:.17g}",
            f"{self.tau_f_rafda:.17g}",
            str(int(self.diverged)),
            f"{self.wall_ms:.3f}",
        ]

    @classmethod
    def from_row(cls, row: dict) -> "RealizationResult":
        return cls(
            int(row["seed"]),
            float(row["eta"]),
            float(row["tau_f_lr"]),
            float(row["tau_f_rafda"]),
            bool(int(row["diverged"])),
            float(row["wall_ms"]),
        )


@dataclass
class SweepResult:
    eta: list[float]
    mean_lr: list[float]
    std_lr: list[float]
    mean_rafda: list[float]
    std_rafda: list[float]
    n: list[int]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.eta, self.eta[1:])):
            raise ValueError("sweep eta values must be strictly increasing")

    def rows(self):
        return zip(self.eta, self.mean_lr, self.std_lr, self.mean_rafda, self.std_rafda, self.n)


def stream_rng(master: int, index: int, label: str) -> np.random.Generator:
    """Generator for one (realization, purpose) pair."""
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(index, STREAMS[label])))


def realization_seed(master: int, index: int) -> int:
    """Identifier recorded in results; a pure function of (master, index)."""
    return int(np.random.SeedSequence(master, spawn_key=(index,)).generate_state(1, np.uint32)[0])


def resolve_embedding(cfg: ExperimentConfig) -> tuple[int, int]:
    """Pinned (m, tau), or an estimate from a pilot training series at the configured noise."""
    if cfg.m is not None:
        return int(cfg.m), int(cfg.tau)
    rng = stream_rng(cfg.seed, 2**31 - 1, "train")
    dcfg = DatasetConfig(dt=cfg.dt, transient=cfg.transient, eta=cfg.eta, substeps=cfg.substeps)
    truth = simulate(dcfg, rng.uniform(-10, 10, 3), max(cfg.N, 4000))
    series = observe(truth, ObservationModel.scalar(cfg.eta), rng, cfg.dt)
    report = estimate_embedding(series.values[:, 0])
    log.info("embedding estimated from pilot series: m=%d tau=%d", report.chosen_m, report.chosen_tau)
    return report.chosen_m, report.chosen_tau


def observed_series(cfg: ExperimentConfig, rng: np.random.Generator, n_samples: int):
    dcfg = DatasetConfig(dt=cfg.dt, transient=cfg.transient, eta=cfg.eta, substeps=cfg.substeps)
    truth = simulate(dcfg, rng.uniform(-dcfg.ic_box, dcfg.ic_box, 3), n_samples)
    return truth, observe(truth, ObservationModel.scalar(cfg.eta), rng, cfg.dt)


@dataclass
class TrainedModels:
    params: FeatureParams
    w_lr: WeightMatrix
    w_rafda: WeightMatrix | None  # None when the filter diverged
    m: int
    tau: int
    truth_validation: np.ndarray  # (n, 3) clean validation trajectory
    validation_vectors: np.ndarray  # delay vectors of its x component, one per row

    @property
    def diverged(self) -> bool:
        return self.w_rafda is None


def train_models(
    cfg: ExperimentConfig,
    index: int,
    embedding: tuple[int, int] | None = None,
    n_valid: int | None = None,
) -> TrainedModels:
    """Ridge and RAFDA weights for realization ``index``, sharing one feature draw.

    ``n_valid`` is the number of validation delay vectors (default: the
    forecast horizon plus the initial vector).
    """
    m, tau = embedding if embedding is not None else resolve_embedding(cfg)
    span = (m - 1) * tau
    n_valid = cfg.horizon_steps + 1 if n_valid is None else n_valid
    _, train = observed_series(cfg, stream_rng(cfg.seed, index, "train"), cfg.N + 1 + span)
    truth_valid, _ = observed_series(cfg, stream_rng(cfg.seed, index, "valid"), n_valid + span)
    Z = build_delay_vectors(train, m, tau)
    Zv = build_delay_vectors(truth_valid[:, 0], m, tau).vectors.T
    params = sample_feature_params(cfg.D_r, m, cfg.w, cfg.b, stream_rng(cfg.seed, index, "features"))

    w_lr = ridge_regression(build_training_matrices(Z, params), cfg.beta)
    fcfg = FilterConfig.for_delay_vectors([[cfg.eta]], m, alpha=cfg.alpha, gamma_init=cfg.gamma, M=cfg.M)
    try:
        w_rafda, _ = run_rafda(Z, params, fcfg, cfg.beta, stream_rng(cfg.seed, index, "filter"), w_lr=w_lr)
    except FilterDivergence as exc:
        log.info("realization %d: %s", index, exc)
        w_rafda = None
    return TrainedModels(params, w_lr, w_rafda, m, tau, truth_valid, Zv)


def run_realization(cfg: ExperimentConfig, index: int, embedding: tuple[int, int] | None = None) -> RealizationResult:
    """Train LR and RAFDA on one noisy series and score both on clean validation data.

    A filter divergence scores RAFDA as zero and sets ``diverged``.
    """
    start = time.perf_counter()
    models = train_models(cfg, index, embedding)
    score = dict(theta=cfg.theta, dt=cfg.dt, lyapunov_max=cfg.lyapunov_max)
    Zv = models.validation_vectors
    tau_lr = score_model(models.w_lr, models.params, Zv, **score).tau_f
    tau_rafda = 0.0 if models.diverged else score_model(models.w_rafda, models.params, Zv, **score).tau_f
    wall = 1000.0 * (time.perf_counter() - start)
    return RealizationResult(realization_seed(cfg.seed, index), cfg.eta, tau_lr, tau_rafda, models.diverged, wall)


def forecast_comparison(cfg: ExperimentConfig, index: int, embedding: tuple[int, int] | None = None) -> dict:
    """Validation delay vectors next to LR and RAFDA free runs from the same start.

    Runs stop early where a surrogate blows up; a diverged filter gives no RAFDA run.
    """
    models = train_models(cfg, index, embedding)
    Zv = models.validation_vectors
    out = {"validation": Zv, "lr": None, "rafda": None}
    for key, W in (("lr", models.w_lr), ("rafda", models.w_rafda)):
        if W is None:
            continue
        try:
            out[key] = free_run(W, models.params, Zv[0], len(Zv) - 1)
        except SurrogateBlowUp as exc:
            out[key] = exc.trajectory
    return out


@dataclass
class AttractorTrial:
    index: int
    lr: AttractorStats
    rafda: AttractorStats | None

    def consistent(self, label: str, min_occupancy: float = 0.99, var_tol: float = 0.25) -> bool:
        stats = getattr(self, label)
        return stats is not None and stats.consistent(min_occupancy, var_tol)


def attractor_trial(
    cfg: ExperimentConfig,
    index: int,
    lyapunov_times: float = 25.0,
    reference_length: int = 10000,
    embedding: tuple[int, int] | None = None,
) -> AttractorTrial:
    """Free-run both surrogates from the first validation vector and compare with the truth delay attractor.

    The reference attractor is the clean validation trajectory of
    ``reference_length`` delay vectors.
    """
    n_steps = int(math.ceil(lyapunov_times / (cfg.lyapunov_max * cfg.dt)))
    models = train_models(cfg, index, embedding, n_valid=max(reference_length, n_steps + 1))
    ref = models.validation_vectors
    lr = free_run_stats(models.w_lr, models.params, ref[0], n_steps, ref)
    rafda = None if models.diverged else free_run_stats(models.w_rafda, models.params, ref[0], n_steps, ref)
    return AttractorTrial(index, lr, rafda)


def summarize(results: list[RealizationResult]) -> dict:
    if not results:
        raise ValueError("no realizations to summarize")
    out = {"n": len(results), "diverged": int(sum(r.diverged for r in results))}
    for label in ("lr", "rafda"):
        x = np.array([getattr(r, f"tau_f_{label}") for r in results])
        out[label] = {
            "mean": float(x.mean()),
            "median": float(np.median(x)),
            "std": float(x.std(ddof=1)) if len(x) > 1 else 0.0,
            "skewness": float(scipy.stats.skew(x)) if len(x) > 2 and np.ptp(x) > 0 else 0.0,
        }
    return out


def worker_count() -> int:
    raw = os.environ.get("RAFDA_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"RAFDA_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("RAFDA_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _run_indexed(args) -> tuple[int, RealizationResult]:
    cfg, index, embedding = args
    return index, run_realization(cfg, index, embedding)


def _cache_key(cfg: ExperimentConfig) -> dict:
    # A realization does not depend on how many others run alongside it.
    key = cfg.to_json()
    del key["n_realizations"]
    return key


def _part_path(out_dir: Path, index: int) -> Path:
    return out_dir / "parts" / f"{index:06d}.json"


def _run_all(cfg: ExperimentConfig, embedding, out_dir: Path | None, workers: int | None) -> list[RealizationResult]:
    results: dict[int, RealizationResult] = {}
    todo = []
    for i in range(cfg.n_realizations):
        part = _part_path(out_dir, i) if out_dir is not None else None
        if part is not None and part.exists():
            with open(part) as fh:
                doc = json.load(fh)
            if doc.get("config") == _cache_key(cfg):
                results[i] = RealizationResult(**doc["result"])
                continue
        todo.append(i)

    def store(i: int, r: RealizationResult):
        results[i] = r
        if out_dir is not None:
            path = _part_path(out_dir, i)
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w") as fh:
                json.dump({"config": _cache_key(cfg), "result": asdict(r)}, fh)
            os.replace(tmp, path)
        log.info("realization %d: LR %.3f RAFDA %.3f", i, r.tau_f_lr, r.tau_f_rafda)

    if out_dir is not None:
        (out_dir / "parts").mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(todo) <= 1:
        for i in todo:
            store(i, run_realization(cfg, i, embedding))
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(todo))) as pool:
            for i, r in pool.map(_run_indexed, [(cfg, i, embedding) for i in todo]):
                store(i, r)
    return [results[i] for i in range(cfg.n_realizations)]


def write_realizations_csv(path, results: list[RealizationResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REALIZATION_FIELDS)
        for r in results:
            writer.writerow(r.row())


def read_realizations_csv(path) -> list[RealizationResult]:
    with open(path, newline="") as fh:
        return [RealizationResult.from_row(row) for row in csv.DictReader(fh)]


@dataclass
class StudyResult:
    config: ExperimentConfig
    embedding: tuple[int, int]
    realizations: list[RealizationResult]
    summary: dict
    histogram_edges: np.ndarray
    histogram_lr: np.ndarray
    histogram_rafda: np.ndarray


def run_ensemble_study(
    cfg: ExperimentConfig, out_dir=None, workers: int | None = None
) -> StudyResult:
    """Run ``cfg.n_realizations`` realizations, then summarize and histogram them.

    With ``out_dir`` every finished realization is stored on its own, so an
    interrupted study resumes where it stopped.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    embedding = resolve_embedding(cfg)
    results = _run_all(cfg, embedding, out, workers)
    summary = summarize(results)
    summary["m"], summary["tau"] = embedding
    lr = np.array([r.tau_f_lr for r in results])
    rafda = np.array([r.tau_f_rafda for r in results])
    top = max(lr.max(), rafda.max())
    edges, _ = histogram(np.array([top]), HISTOGRAM_WIDTH)
    h_lr, _ = np.histogram(lr, bins=edges)
    h_rafda, _ = np.histogram(rafda, bins=edges)
    study = StudyResult(cfg, embedding, results, summary, edges, h_lr, h_rafda)
    if out is not None:
        _write_study(out, study)
    return study


def _write_study(out: Path, study: StudyResult) -> None:
    with open(out / "config.json", "w") as fh:
        json.dump(study.config.to_json(), fh, indent=2)
    write_realizations_csv(out / "realizations.csv", study.realizations)
    with open(out / "summary.json", "w") as fh:
        json.dump(study.summary, fh, indent=2)
    with open(out / "histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count_lr", "count_rafda"])
        e = study.histogram_edges
        for left, right, a, b in zip(e[:-1], e[1:], study.histogram_lr, study.histogram_rafda):
            writer.writerow([f"{left:.17g}", f"{right:.17g}", int(a), int(b)])


def run_noise_sweep(cfg: ExperimentConfig, eta_values, out_dir=None, workers: int | None = None) -> SweepResult:
    """One ensemble study per noise strength; the spread reported is one standard deviation."""
    etas = [float(e) for e in eta_values]
    if not etas:
        raise ValueError("need at least one eta value")
    if any(b <= a for a, b in zip(etas, etas[1:])):
        raise ValueError("eta values must be strictly increasing")
    out = Path(out_dir) if out_dir is not None else None
    cols: dict[str, list] = {k: [] for k in SWEEP_FIELDS}
    for eta in etas:
        sub = out / f"eta_{eta:.6g}" if out is not None else None
        study = run_ensemble_study(cfg.replace(eta=eta), sub, workers)
        s = study.summary
        for key, value in zip(SWEEP_FIELDS, (eta, s["lr"]["mean"], s["lr"]["std"], s["rafda"]["mean"], s["rafda"]["std"], s["n"])):
            cols[key].append(value)
    sweep = SweepResult(**cols)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump({**cfg.to_json(), "eta_values": etas}, fh, indent=2)
        write_sweep_csv(out / "sweep.csv", sweep)
    return sweep


def write_sweep_csv(path, sweep: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        for eta, ml, sl, mr, sr, n in sweep.rows():
            writer.writerow([f"{eta:.17g}", f"{ml:.17g}", f"{sl:.17g}", f"{mr:.17g}", f"{sr:.17g}", int(n)])
