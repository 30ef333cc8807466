"""Lorenz-63 truth model, RK4 integration and the partial noisy observation model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SIGMA = 10.0
RHO = 28.0
BETA = 8.0 / 3.0

STATE_NAMES = ("x", "y", "z")


class IntegrationDiverged(RuntimeError):
    """Raised when the integrator produces a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"integration produced a non-finite state at output step {step}")
        self.step = step


def lorenz63_rhs(state: np.ndarray) -> np.ndarray:
    """Time derivative of the standard Lorenz-63 system (sigma=10, rho=28, beta=8/3)."""
    x, y, z = state
    return np.array([SIGMA * (y - x), RHO * x - y - x * z, -BETA * z + x * y])


def fixed_points() -> np.ndarray:
    r = np.sqrt(BETA * (RHO - 1.0))
    return np.array([[0.0, 0.0, 0.0], [r, r, RHO - 1.0], [-r, -r, RHO - 1.0]])


def integrate(
    rhs: Callable[[np.ndarray], np.ndarray],
    initial,
    dt_out: float,
    n_steps: int,
    substeps: int = 10,
) -> np.ndarray:
    """Classical fourth-order Runge-Kutta.

    Takes ``substeps`` internal steps of size ``dt_out / substeps`` between
    outputs and returns an array of ``n_steps + 1`` states, the first being
    ``initial``.
    """
    if dt_out <= 0:
        raise ValueError("dt_out must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")

    u = np.array(initial, dtype=float)
    out = np.empty((n_steps + 1,) + u.shape)
    out[0] = u
    h = dt_out / substeps
    half = 0.5 * h
    sixth = h / 6.0
    for n in range(1, n_steps + 1):
        for _ in range(substeps):
            k1 = rhs(u)
            k2 = rhs(u + half * k1)
            k3 = rhs(u + half * k2)
            k4 = rhs(u + h * k3)
            u = u + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(u)):
            raise IntegrationDiverged(n)
        out[n] = u
    return out


@dataclass(frozen=True)
class ObservationModel:
    """y = G u + Gamma^{1/2} eta with a 0/1 selection matrix G."""

    projection: np.ndarray
    noise_covariance: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.projection, dtype=float))
        Gamma = np.atleast_2d(np.asarray(self.noise_covariance, dtype=float))
        if not np.all((G == 0.0) | (G == 1.0)) or not np.all(G.sum(axis=1) == 1.0):
            raise ValueError("projection rows must select exactly one state component")
        if Gamma.shape != (G.shape[0], G.shape[0]):
            raise ValueError(f"noise covariance must be {G.shape[0]}x{G.shape[0]}, got {Gamma.shape}")
        if not np.allclose(Gamma, Gamma.T):
            raise ValueError("noise covariance must be symmetric")
        if np.linalg.eigvalsh(Gamma).min() < -1e-12 * max(1.0, np.abs(Gamma).max()):
            raise ValueError("noise covariance must be positive semi-definite")
        object.__setattr__(self, "projection", G)
        object.__setattr__(self, "noise_covariance", Gamma)

    @classmethod
    def scalar(cls, eta: float, component: int = 0, dim: int = 3) -> "ObservationModel":
        """Observe a single component with noise variance ``eta`` (Gamma = eta I)."""
        G = np.zeros((1, dim))
        G[0, component] = 1.0
        return cls(G, np.array([[eta]]))

    @property
    def d(self) -> int:
        return self.projection.shape[0]

    @property
    def noise_strength(self) -> float | None:
        """eta when Gamma = eta I, else None."""
        Gamma = self.noise_covariance
        eta = Gamma[0, 0]
        return float(eta) if np.array_equal(Gamma, eta * np.eye(self.d)) else None

    def noise_sqrt(self) -> np.ndarray:
        return symmetric_sqrt(self.noise_covariance)


def symmetric_sqrt(cov: np.ndarray) -> np.ndarray:
    """Spectral square root of a symmetric PSD matrix (negative round-off clipped)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    diag = np.diag(np.diag(cov))
    if np.array_equal(cov, diag):
        return np.sqrt(np.clip(diag, 0.0, None))
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass
class TimeSeries:
    values: np.ndarray  # (length, d)
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("time series needs shape (length >= 1, d)")
        if not np.all(np.isfinite(v)):
            raise ValueError("time series contains non-finite values")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.values = v

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self))

    def scalar(self) -> np.ndarray:
        if self.d != 1:
            raise ValueError(f"expected a scalar series, got d={self.d}")
        return self.values[:, 0]


def observe(trajectory: np.ndarray, model: ObservationModel, rng: np.random.Generator, dt: float = 1.0) -> TimeSeries:
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if traj.shape[1] != model.projection.shape[1]:
        raise ValueError(
            f"projection expects states of dimension {model.projection.shape[1]}, got {traj.shape[1]}"
        )
    clean = traj @ model.projection.T
    noise = rng.standard_normal(clean.shape) @ model.noise_sqrt().T
    return TimeSeries(clean + noise, dt)


@dataclass
class DatasetConfig:
    dt: float = 0.02
    transient: float = 40.0
    n_train: int = 4021
    n_valid: int = 571
    eta: float = 0.2
    substeps: int = 10
    ic_box: float = 10.0


@dataclass
class DatasetPair:
    train: TimeSeries
    validation: TimeSeries
    truth_train: np.ndarray
    truth_validation: np.ndarray
    initial_conditions: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))


def simulate(config: DatasetConfig, initial, n_samples: int) -> np.ndarray:
    """Discard ``config.transient`` time units then record ``n_samples`` states."""
    n_transient = int(round(config.transient / config.dt))
    start = initial
    if n_transient > 0:
        start = integrate(lorenz63_rhs, initial, config.dt, n_transient, config.substeps)[-1]
    return integrate(lorenz63_rhs, start, config.dt, n_samples - 1, config.substeps)


def generate_dataset(
    config: DatasetConfig,
    rng: np.random.Generator,
    initial_conditions: Sequence | None = None,
) -> DatasetPair:
    """Independent training and validation runs observed through x only."""
    if initial_conditions is None:
        ics = rng.uniform(-config.ic_box, config.ic_box, size=(2, 3))
    else:
        ics = np.asarray(initial_conditions, dtype=float).reshape(2, 3)
    truth_train = simulate(config, ics[0], config.n_train)
    truth_valid = simulate(config, ics[1], config.n_valid)
    model = ObservationModel.scalar(config.eta)
    train = observe(truth_train, model, rng, config.dt)
    valid = observe(truth_valid, model, rng, config.dt)
    return DatasetPair(train, valid, truth_train, truth_valid, ics)


def write_csv(path, values: np.ndarray, dt: float, names: Sequence[str] | None = None) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if names is None:
        names = STATE_NAMES if values.shape[1] == 3 else [f"y{k}" for k in range(values.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", *names])
        for n, row in enumerate(values):
            writer.writerow([f"{n * dt:.17g}", *(f"{v:.17g}" for v in row)])


def read_csv(path) -> tuple[np.ndarray, float, list[str]]:
    """Returns (values, dt, component names) from a file written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if not header or header[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    if data.shape[0] < 1:
        raise ValueError(f"{path}: no samples")
    dt = float(data[1, 0] - data[0, 0]) if data.shape[0] > 1 else 1.0
    return data[:, 1:], dt, header[1:]


def load_series(path, column: str | None = None) -> TimeSeries:
    values, dt, names = read_csv(Path(path))
    if column is not None:
        if column not in names:
            raise ValueError(f"{path}: no column {column!r} (have {names})")
        values = values[:, [names.index(column)]]
    return TimeSeries(values, dt)
