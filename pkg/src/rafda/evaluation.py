"""Forecast-time scoring and long-run attractor statistics in delay coordinates."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .features import FeatureParams, SurrogateBlowUp, free_run

LYAPUNOV_MAX = 0.91
THETA = 40.0
MIN_NORM = 1e-12


@dataclass
class ForecastScore:
    tau_f: float
    raw_steps: int
    theta: float
    lyapunov_max: float
    dt: float
    blew_up: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def squared_error(surrogate_run, validation_run, normalize: str = "relative") -> np.ndarray:
    """Per-step squared error; ``relative`` divides by |zeta_valid|^2.

    Steps where the validation vector is (numerically) zero come back as NaN
    in relative mode.
    """
    s = np.atleast_2d(np.asarray(surrogate_run, dtype=float))
    v = np.atleast_2d(np.asarray(validation_run, dtype=float))[: len(s)]
    err = np.sum((v - s) ** 2, axis=1)
    if normalize == "absolute":
        return err
    if normalize != "relative":
        raise ValueError(f"unknown normalisation {normalize!r}")
    norm2 = np.sum(v * v, axis=1)
    out = np.full_like(err, np.nan)
    ok = np.sqrt(norm2) >= MIN_NORM
    out[ok] = err[ok] / norm2[ok]
    return out


def forecast_time(
    surrogate_run,
    validation_run,
    theta: float = THETA,
    dt: float = 0.02,
    lyapunov_max: float = LYAPUNOV_MAX,
    normalize: str = "relative",
) -> ForecastScore:
    """Number of steps before the error first exceeds ``theta``, in Lyapunov times.

    Both runs start at the same delay vector. A surrogate run shorter than the
    validation run is treated as having blown up after its last entry, and
    non-finite surrogate entries count as a crossing.
    """
    s = np.atleast_2d(np.asarray(surrogate_run, dtype=float))
    v = np.atleast_2d(np.asarray(validation_run, dtype=float))
    if s.size == 0 or v.size == 0:
        raise ValueError("forecast_time needs non-empty runs")
    if len(s) > len(v):
        raise ValueError("surrogate run is longer than the validation run")
    E = squared_error(s, v, normalize)
    finite_rows = np.all(np.isfinite(s), axis=1)
    crossed = (E > theta) | ~finite_rows
    # NaN entries (zero validation vector) are skipped; they are never a crossing.
    crossed &= ~(np.isnan(E) & finite_rows)
    hits = np.flatnonzero(crossed)
    if hits.size:
        raw = max(int(hits[0]) - 1, 0)
    else:
        raw = len(s) - 1
    blew_up = len(s) < len(v) or not np.all(finite_rows)
    return ForecastScore(raw * dt * lyapunov_max, raw, theta, lyapunov_max, dt, blew_up)


def score_model(
    W,
    params: FeatureParams,
    validation_vectors: np.ndarray,
    theta: float = THETA,
    dt: float = 0.02,
    lyapunov_max: float = LYAPUNOV_MAX,
    normalize: str = "relative",
) -> ForecastScore:
    """Free-run the surrogate from the first validation vector and score it.

    ``validation_vectors`` has one delay vector per row.
    """
    v = np.asarray(validation_vectors, dtype=float)
    try:
        run = free_run(W, params, v[0], len(v) - 1)
    except SurrogateBlowUp as exc:
        run = exc.trajectory
    return forecast_time(run, v, theta, dt, lyapunov_max, normalize)


@dataclass
class AttractorStats:
    mean: np.ndarray
    variance: np.ndarray
    reference_mean: np.ndarray
    reference_variance: np.ndarray
    box_low: np.ndarray
    box_high: np.ndarray
    occupancy: float
    valid: bool = True

    @property
    def mean_rel_diff(self) -> np.ndarray:
        scale = np.sqrt(self.reference_variance)
        return np.abs(self.mean - self.reference_mean) / scale

    @property
    def variance_ratio(self) -> np.ndarray:
        return self.variance / self.reference_variance

    @property
    def variance_rel_diff(self) -> np.ndarray:
        return np.abs(self.variance_ratio - 1.0)

    def consistent(self, min_occupancy: float = 0.99, var_tol: float = 0.25) -> bool:
        return bool(self.valid and self.occupancy >= min_occupancy and np.all(self.variance_rel_diff <= var_tol))

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
            "reference_mean": self.reference_mean.tolist(),
            "reference_variance": self.reference_variance.tolist(),
            "box_low": self.box_low.tolist(),
            "box_high": self.box_high.tolist(),
            "occupancy": self.occupancy,
            "variance_ratio": self.variance_ratio.tolist(),
            "valid": self.valid,
        }


def bounding_box(reference, inflation: float = 0.10) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise box of ``reference`` with each width grown by ``inflation`` about its centre."""
    ref = np.asarray(reference, dtype=float)
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    pad = 0.5 * inflation * (hi - lo)
    return lo - pad, hi + pad


def attractor_stats(run, reference, box_inflation: float = 0.10, min_points: int = 1000) -> AttractorStats:
    """Compare a long free run with a reference run, both shaped (n, D_zeta)."""
    run = np.atleast_2d(np.asarray(run, dtype=float))
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    if len(ref) < min_points:
        raise ValueError(f"reference run needs >= {min_points} points, got {len(ref)}")
    lo, hi = bounding_box(ref, box_inflation)
    valid = len(run) >= min_points and bool(np.all(np.isfinite(run)))
    finite = run[np.all(np.isfinite(run), axis=1)]
    if len(finite) == 0:
        nan = np.full(ref.shape[1], np.nan)
        return AttractorStats(nan, nan, ref.mean(axis=0), ref.var(axis=0), lo, hi, 0.0, False)
    inside = np.all((finite >= lo) & (finite <= hi), axis=1)
    occupancy = float(np.sum(inside)) / len(run)
    return AttractorStats(
        finite.mean(axis=0), finite.var(axis=0), ref.mean(axis=0), ref.var(axis=0), lo, hi, occupancy, valid
    )


def free_run_stats(W, params: FeatureParams, zeta0, n_steps: int, reference) -> AttractorStats:
    """attractor_stats for a surrogate free run; a blow-up yields an invalid result."""
    try:
        run = free_run(W, params, zeta0, n_steps)
    except SurrogateBlowUp as exc:
        stats = attractor_stats(exc.trajectory, reference, min_points=0)
        stats.valid = False
        return stats
    return attractor_stats(run, reference)


def histogram(values, width: float = 0.25, start: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-width histogram; returns (edges, counts)."""
    values = np.asarray(values, dtype=float)
    top = max(float(values.max()) if values.size else start, start)
    n_bins = int(np.floor((top - start) / width)) + 1
    edges = start + width * np.arange(n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{left:.17g}", f"{right:.17g}", int(c)])


def dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj.to_json() if hasattr(obj, "to_json") else obj, fh, indent=2)
