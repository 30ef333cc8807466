"""Delay-coordinate embedding and selection of the delay and embedding dimension.

The delay comes from the first minimum of the average mutual information;
the dimension is the smallest one whose false-nearest-neighbour fraction
drops below a threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import TimeSeries


class EmbeddingError(ValueError):
    pass


class DimensionNotFound(EmbeddingError):
    def __init__(self, fractions: list[tuple[int, float]], threshold: float):
        curve = ", ".join(f"m={m}: {f:.3f}" for m, f in fractions)
        super().__init__(f"no embedding dimension reached FNN fraction < {threshold} ({curve})")
        self.fractions = fractions


@dataclass
class DelayVectorSet:
    """Delay vectors stored column-wise, shape (d*m, N)."""

    vectors: np.ndarray
    m: int
    tau: int
    d: int = 1

    @property
    def D_zeta(self) -> int:
        return self.d * self.m

    @property
    def N(self) -> int:
        return self.vectors.shape[1]

    def truncate(self, n_columns: int) -> "DelayVectorSet":
        if n_columns > self.N:
            raise EmbeddingError(f"only {self.N} delay vectors available, {n_columns} requested")
        return DelayVectorSet(self.vectors[:, :n_columns], self.m, self.tau, self.d)


def _as_array(series) -> np.ndarray:
    if isinstance(series, TimeSeries):
        return series.values
    return np.asarray(series, dtype=float)


def build_delay_vectors(series, m: int, tau: int) -> DelayVectorSet:
    """Column n is (y_n, y_{n+tau}, ..., y_{n+(m-1)tau}).

    Multivariate series are stacked lag-major, so rows ``k*d:(k+1)*d`` hold
    the d components at lag ``k*tau``.
    """
    if m < 1 or tau < 1:
        raise EmbeddingError(f"need m >= 1 and tau >= 1, got m={m}, tau={tau}")
    y = _as_array(series)
    if y.ndim == 1:
        y = y[:, None]
    length, d = y.shape
    span = (m - 1) * tau
    if length < span + 1:
        raise EmbeddingError(f"series of length {length} too short for m={m}, tau={tau}")
    n = length - span
    Z = np.empty((m * d, n))
    for k in range(m):
        Z[k * d:(k + 1) * d] = y[k * tau:k * tau + n].T
    return DelayVectorSet(Z, m, tau, d)


def average_mutual_information(series, max_lag: int, bins: int = 16) -> np.ndarray:
    """Histogram AMI in nats for lags 0..max_lag; entry ``l`` is the value at lag l.

    Cells are ``bins`` equal-width intervals spanning the full series range,
    shared by every lag.
    """
    y = _as_array(series)
    if y.ndim == 2:
        if y.shape[1] != 1:
            raise EmbeddingError("average mutual information needs a scalar series")
        y = y[:, 0]
    if max_lag < 0 or max_lag >= len(y):
        raise EmbeddingError(f"max_lag must be in [0, {len(y) - 1}], got {max_lag}")
    lo, hi = y.min(), y.max()
    if hi <= lo:
        raise EmbeddingError("constant series has zero entropy; mutual information undefined")
    idx = np.minimum(((y - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)

    ami = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        a = idx[: len(y) - lag]
        b = idx[lag:]
        joint = np.bincount(a * bins + b, minlength=bins * bins).reshape(bins, bins)
        p = joint / joint.sum()
        pa = p.sum(axis=1)
        pb = p.sum(axis=0)
        nz = p > 0
        ami[lag] = np.sum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz]))
    return ami


def select_delay(ami) -> int:
    """First strict local minimum; otherwise first lag below AMI(1)/e."""
    curve = np.asarray(ami, dtype=float)
    if curve.size < 3:
        raise EmbeddingError("AMI curve needs at least 3 lags")
    for lag in range(1, curve.size - 1):
        if curve[lag] < curve[lag - 1] and curve[lag] < curve[lag + 1]:
            return lag
    below = np.nonzero(curve[1:] < curve[1] / np.e)[0]
    if below.size:
        return int(below[0]) + 1
    raise EmbeddingError("no delay found: AMI curve has no local minimum and never drops below 1/e")


def _nearest_neighbours(X: np.ndarray, exclude: int, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest neighbour of each row of X, ignoring |i - j| <= exclude.

    Ties resolve to the smallest index. Returns (index, distance); index is -1
    when a point has no admissible neighbour.
    """
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    nn = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.inf)
    offsets = np.arange(-exclude, exclude + 1)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        rows = np.arange(start, stop)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        np.maximum(d2, 0.0, out=d2)
        band = rows[:, None] + offsets[None, :]
        inside = (band >= 0) & (band < n)
        d2[np.broadcast_to(rows[:, None] - start, band.shape)[inside], band[inside]] = np.inf
        j = np.argmin(d2, axis=1)
        ok = np.isfinite(d2[np.arange(stop - start), j])
        nn[start:stop] = np.where(ok, j, -1)
    valid = nn >= 0
    dist[valid] = np.linalg.norm(X[valid] - X[nn[valid]], axis=1)
    return nn, dist


def false_nearest_fraction(
    series,
    tau: int,
    m: int,
    ratio: float = 10.0,
    size_tolerance: float | None = 2.0,
    theiler: int | None = None,
    min_distance: float = 1e-12,
) -> float:
    """Fraction of points whose nearest neighbour at dimension m is false.

    A pair is false when its distance grows by more than ``ratio`` on
    extending both points to dimension m+1, or (Kennel's attractor-size test,
    skipped when ``size_tolerance`` is None) when the extended distance
    exceeds ``size_tolerance`` times the series standard deviation. The size
    test is what keeps noise from passing at moderate m.

    Temporal neighbours within ``theiler`` samples (default tau) are excluded
    from the search; pairs closer than ``min_distance`` are discarded.
    """
    y = _as_array(series)
    if y.ndim == 2:
        y = y[:, 0] if y.shape[1] == 1 else None
        if y is None:
            raise EmbeddingError("false nearest neighbours needs a scalar series")
    if m < 1:
        raise EmbeddingError("m must be >= 1")
    n = len(y) - m * tau
    if n < 2:
        raise EmbeddingError(f"fewer than 2 points embeddable at dimension {m + 1}")
    Z = build_delay_vectors(y, m + 1, tau).vectors.T  # (n, m+1)
    low = np.ascontiguousarray(Z[:, :m])
    nn, dist = _nearest_neighbours(low, tau if theiler is None else theiler)
    valid = (nn >= 0) & (dist > min_distance)
    if not np.any(valid):
        raise EmbeddingError("no admissible nearest-neighbour pairs")
    i = np.nonzero(valid)[0]
    dist_high = np.linalg.norm(Z[i] - Z[nn[i]], axis=1)
    false = dist_high > ratio * dist[i]
    if size_tolerance is not None:
        false |= dist_high > size_tolerance * np.std(y)
    return float(np.mean(false))


def fnn_curve(series, tau: int, m_max: int, **kwargs) -> list[tuple[int, float]]:
    return [(m, false_nearest_fraction(series, tau, m, **kwargs)) for m in range(1, m_max + 1)]


def select_embedding_dimension(
    series, tau: int, m_max: int = 10, threshold: float = 0.10, **kwargs
) -> int:
    if m_max < 1:
        raise EmbeddingError("m_max must be >= 1")
    fractions = []
    for m in range(1, m_max + 1):
        f = false_nearest_fraction(series, tau, m, **kwargs)
        fractions.append((m, f))
        if f < threshold:
            return m
    raise DimensionNotFound(fractions, threshold)


@dataclass
class EmbeddingReport:
    ami_curve: list[tuple[int, float]]
    fnn_fractions: list[tuple[int, float]]
    chosen_tau: int
    chosen_m: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ami": [[int(l), float(v)] for l, v in self.ami_curve],
            "fnn": [[int(m), float(f)] for m, f in self.fnn_fractions],
            "tau": int(self.chosen_tau),
            "m": int(self.chosen_m),
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def estimate_embedding(
    series,
    max_lag: int = 50,
    bins: int = 16,
    m_max: int = 8,
    threshold: float = 0.10,
    tau: int | None = None,
    **fnn_kwargs,
) -> EmbeddingReport:
    """AMI delay then FNN dimension. A given ``tau`` skips the delay search."""
    y = _as_array(series)
    if y.ndim == 2:
        y = y[:, 0]
    ami = average_mutual_information(y, min(max_lag, len(y) - 1), bins)
    if tau is None:
        tau = select_delay(ami)
    fractions: list[tuple[int, float]] = []
    chosen = None
    for m in range(1, m_max + 1):
        f = false_nearest_fraction(y, tau, m, **fnn_kwargs)
        fractions.append((m, f))
        if f < threshold:
            chosen = m
            break
    if chosen is None:
        raise DimensionNotFound(fractions, threshold)
    return EmbeddingReport(list(enumerate(ami.tolist())), fractions, tau, chosen)
