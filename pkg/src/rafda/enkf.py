"""Joint state/weight estimation with a stochastic ensemble Kalman filter.

The augmented state of each member is x = (zeta, w) where w is the row-major
flattening of the D_zeta x D_r output matrix. Only the D_zeta observed rows
enter the gain, so the analysis works with the blocks P_zz and P_wz and never
forms the full covariance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import symmetric_sqrt
from .embedding import DelayVectorSet
from .features import FeatureParams, WeightMatrix
from .regression import build_training_matrices, ridge_regression

SPREAD_LIMIT = 1e8


class FilterDivergence(RuntimeError):
    """Assimilation stopped early; ``weights`` is the last valid ensemble-mean W."""

    def __init__(self, step: int, reason: str, weights: WeightMatrix | None, diagnostics: "FilterDiagnostics"):
        super().__init__(f"filter diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.weights = weights
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class AugmentedEnsemble:
    zeta: np.ndarray  # (D_zeta, M)
    w: np.ndarray  # (D_zeta * D_r, M)

    def __post_init__(self):
        if self.zeta.ndim != 2 or self.w.ndim != 2 or self.zeta.shape[1] != self.w.shape[1]:
            raise ValueError(f"inconsistent ensemble blocks {self.zeta.shape} / {self.w.shape}")
        if self.M < 2:
            raise ValueError("ensemble needs at least 2 members")
        if self.w.shape[0] % self.D_zeta:
            raise ValueError("weight block length must be a multiple of D_zeta")

    @property
    def M(self) -> int:
        return self.zeta.shape[1]

    @property
    def D_zeta(self) -> int:
        return self.zeta.shape[0]

    @property
    def D_r(self) -> int:
        return self.w.shape[0] // self.D_zeta

    def member_weights(self, i: int) -> np.ndarray:
        return self.w[:, i].reshape(self.D_zeta, self.D_r)

    def mean_weights(self) -> np.ndarray:
        return self.w.mean(axis=1).reshape(self.D_zeta, self.D_r)

    def stacked(self) -> np.ndarray:
        """Full augmented matrix X, shape (D_x, M)."""
        return np.vstack([self.zeta, self.w])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.zeta)) and np.all(np.isfinite(self.w)))


@dataclass
class FilterConfig:
    gamma_dc: np.ndarray  # (D_zeta, D_zeta)
    alpha: float = 1.0002
    gamma_init: float = 0.01
    M: int = 300

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.gamma_dc, dtype=float))
        if G.shape[0] != G.shape[1] or not np.allclose(G, G.T):
            raise ValueError("gamma_dc must be a symmetric square matrix")
        if self.alpha < 1.0:
            raise ValueError(f"inflation alpha must be >= 1, got {self.alpha}")
        if self.gamma_init < 0:
            raise ValueError("gamma_init must be non-negative")
        if self.M < 2:
            raise ValueError("ensemble size M must be >= 2")
        self.gamma_dc = G
        self._sqrt = symmetric_sqrt(G)

    @classmethod
    def for_delay_vectors(cls, gamma, m: int, **kwargs) -> "FilterConfig":
        """Gamma_dc = I_m (kron) Gamma for the stacking used by build_delay_vectors."""
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        return cls(np.kron(np.eye(m), gamma), **kwargs)

    @property
    def gamma_dc_sqrt(self) -> np.ndarray:
        return self._sqrt


@dataclass
class StepRecord:
    step: int
    innovation_norm: float
    state_spread: float
    weight_spread: float
    diverged: bool = False


@dataclass
class FilterDiagnostics:
    records: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    divergence_step: int | None = None

    def innovation_norms(self) -> np.ndarray:
        return np.array([r.innovation_norm for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "innovation_norm", "state_spread", "weight_spread", "diverged"])
            for r in self.records:
                writer.writerow(
                    [r.step, f"{r.innovation_norm:.17g}", f"{r.state_spread:.17g}", f"{r.weight_spread:.17g}", int(r.diverged)]
                )


def init_ensemble(zeta0, W_LR, cfg: FilterConfig, rng: np.random.Generator) -> AugmentedEnsemble:
    """zeta ~ N(zeta0, Gamma_dc), w ~ N(w_LR, gamma I), member-wise independent."""
    zeta0 = np.asarray(zeta0, dtype=float)
    W = W_LR.W if isinstance(W_LR, WeightMatrix) else np.asarray(W_LR, dtype=float)
    if W.shape[0] != zeta0.shape[0] or cfg.gamma_dc.shape[0] != zeta0.shape[0]:
        raise ValueError("zeta0, W_LR and gamma_dc dimensions disagree")
    M = cfg.M
    zeta = zeta0[:, None] + cfg.gamma_dc_sqrt @ rng.standard_normal((zeta0.shape[0], M))
    w = W.reshape(-1)[:, None] + np.sqrt(cfg.gamma_init) * rng.standard_normal((W.size, M))
    return AugmentedEnsemble(zeta, w)


def forecast_step(ens: AugmentedEnsemble, params: FeatureParams, work: np.ndarray | None = None) -> AugmentedEnsemble:
    """zeta_i <- W_i phi(zeta_i); weights persist (the weight block is shared, not copied).

    Sums are accumulated in a fixed order, so every member's result is
    bitwise identical to evaluating it on its own. ``work`` is an optional
    scratch array shaped like ``ens.w``.
    """
    D_zeta, M, D_r = ens.D_zeta, ens.M, ens.D_r
    W_in, b_in = params.W_in, params.b_in
    pre = np.multiply.outer(W_in[:, 0], ens.zeta[0])
    pre += b_in[:, None]
    if D_zeta > 1:
        tmp = np.empty_like(pre)
        for k in range(1, D_zeta):
            np.multiply.outer(W_in[:, k], ens.zeta[k], out=tmp)
            pre += tmp
    phi = np.tanh(pre, out=pre)
    if work is None:
        work = np.empty_like(ens.w)
    prod = work.reshape(D_zeta, D_r, M)
    np.multiply(ens.w.reshape(D_zeta, D_r, M), phi, out=prod)
    zeta_f = prod.sum(axis=1)
    return AugmentedEnsemble(zeta_f, ens.w)


def apply_inflation(ens: AugmentedEnsemble, alpha: float, inplace: bool = False) -> AugmentedEnsemble:
    """Scale deviations about the ensemble mean by sqrt(alpha)."""
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    if alpha == 1.0:
        return ens
    s = np.sqrt(alpha)
    blocks = []
    for X in (ens.zeta, ens.w):
        mean = X.mean(axis=1, keepdims=True)
        out = np.multiply(X, s, out=X if inplace else None)
        out += (1.0 - s) * mean
        blocks.append(out)
    return AugmentedEnsemble(*blocks)


def observation_operator(ens: AugmentedEnsemble) -> np.ndarray:
    """H X: the state block, by selection."""
    return ens.zeta


def analysis_step(
    ens: AugmentedEnsemble,
    obs,
    cfg: FilterConfig,
    rng: np.random.Generator,
    step: int = 0,
    inplace: bool = False,
    work: np.ndarray | None = None,
) -> tuple[AugmentedEnsemble, StepRecord]:
    """Stochastic EnKF update with perturbed observations zeta_obs - eta_i.

    With ``inplace`` the weight block of ``ens`` is overwritten. Raises
    :class:`numpy.linalg.LinAlgError` if P_zz + Gamma_dc cannot be
    Cholesky-factorised.
    """
    obs = np.asarray(obs, dtype=float)
    Zf, Wf = ens.zeta, ens.w
    M = ens.M
    zbar = Zf.mean(axis=1)
    Zhat = Zf - zbar[:, None]
    P_zz = Zhat @ Zhat.T / (M - 1)
    # Zhat rows sum to zero, so the weight mean drops out of the cross-covariance.
    P_wz = Wf @ Zhat.T / (M - 1)

    perturbed = obs[:, None] - cfg.gamma_dc_sqrt @ rng.standard_normal((obs.shape[0], M))
    innovation = observation_operator(ens) - perturbed
    factor = scipy.linalg.cho_factor(P_zz + cfg.gamma_dc, lower=True)
    gain_rhs = scipy.linalg.cho_solve(factor, innovation)

    Za = Zf - P_zz @ gain_rhs
    if work is None:
        work = np.empty_like(Wf)
    correction = np.matmul(P_wz, gain_rhs, out=work)
    Wa = np.subtract(Wf, correction, out=Wf if inplace else None)
    out = AugmentedEnsemble(Za, Wa)

    Za_hat = Za - Za.mean(axis=1, keepdims=True)
    spread_z = float(np.sum(Za_hat * Za_hat)) / (M - 1)
    spread_w = _total_variance(Wa, work)
    bad = not (np.isfinite(spread_z) and np.isfinite(spread_w)) or spread_z > SPREAD_LIMIT
    record = StepRecord(step, float(np.linalg.norm(zbar - obs)), spread_z, spread_w, bad)
    return out, record


def _total_variance(X: np.ndarray, work: np.ndarray | None = None) -> float:
    """Trace of the sample covariance; non-finite if any entry is."""
    if X.shape[0] == 0:
        return 0.0
    dev = np.subtract(X, X.mean(axis=1, keepdims=True), out=work)
    flat = dev.reshape(-1)
    return float(flat @ flat) / (X.shape[1] - 1)


def run_rafda(
    observations: DelayVectorSet,
    params: FeatureParams,
    cfg: FilterConfig,
    beta: float,
    rng: np.random.Generator,
    w_lr: WeightMatrix | None = None,
) -> tuple[WeightMatrix, FilterDiagnostics]:
    """Assimilate zeta_1..zeta_N sequentially starting from a ridge-regression prior.

    ``observations`` holds zeta_0..zeta_N as columns. Returns the ensemble
    mean of the weight block after the last analysis.
    """
    Z = observations.vectors if isinstance(observations, DelayVectorSet) else np.asarray(observations, dtype=float)
    if w_lr is None:
        w_lr = ridge_regression(build_training_matrices(observations, params), beta)
    ens = init_ensemble(Z[:, 0], w_lr, cfg, rng)
    work = np.empty_like(ens.w)
    ones_over_M = np.full(ens.M, 1.0 / ens.M)
    diagnostics = FilterDiagnostics()
    last_good = ens.mean_weights()

    def fail(n: int, reason: str):
        diagnostics.diverged = True
        diagnostics.divergence_step = n
        return FilterDivergence(n, reason, WeightMatrix(last_good, "rafda"), diagnostics)

    for n in range(1, Z.shape[1]):
        ens = forecast_step(ens, params, work)
        if not np.all(np.isfinite(ens.zeta)):
            raise fail(n, "non-finite forecast")
        ens = apply_inflation(ens, cfg.alpha, inplace=True)
        try:
            ens, record = analysis_step(ens, Z[:, n], cfg, rng, step=n, inplace=True, work=work)
        except (np.linalg.LinAlgError, ValueError):
            diagnostics.records.append(StepRecord(n, float("nan"), float("nan"), float("nan"), True))
            raise fail(n, "innovation covariance not positive definite") from None
        diagnostics.records.append(record)
        if record.diverged:
            raise fail(n, "non-finite or exploding ensemble")
        last_good = (ens.w @ ones_over_M).reshape(ens.D_zeta, ens.D_r)
    return WeightMatrix(last_good, "rafda"), diagnostics
