"""Batch ridge regression of the output weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .embedding import DelayVectorSet
from .features import FeatureParams, WeightMatrix, feature_map


class RidgeSolveError(np.linalg.LinAlgError):
    pass


@dataclass
class TrainingMatrices:
    """Targets zeta_1..zeta_N and features phi(zeta_0)..phi(zeta_{N-1}), column-aligned."""

    Z_target: np.ndarray  # (D_zeta, N)
    Phi: np.ndarray  # (D_r, N)

    def __post_init__(self):
        if self.Z_target.shape[1] != self.Phi.shape[1]:
            raise ValueError("targets and features need the same number of columns")

    @property
    def N(self) -> int:
        return self.Phi.shape[1]


def build_training_matrices(delays: DelayVectorSet, params: FeatureParams) -> TrainingMatrices:
    Z = delays.vectors if isinstance(delays, DelayVectorSet) else np.asarray(delays, dtype=float)
    if Z.shape[1] < 2:
        raise ValueError("need at least 2 delay vectors to form one input/target pair")
    return TrainingMatrices(Z[:, 1:].copy(), feature_map(Z[:, :-1], params))


def ridge_regression(tm: TrainingMatrices, beta: float) -> WeightMatrix:
    """W = Z Phi^T (Phi Phi^T + beta I)^{-1} via a Cholesky solve of the Gram system."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    Phi, Z = tm.Phi, tm.Z_target
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(Z))):
        raise RidgeSolveError("non-finite training data")
    gram = Phi @ Phi.T
    gram[np.diag_indices_from(gram)] += beta
    rhs = Phi @ Z.T  # (D_r, D_zeta) = (Z Phi^T)^T
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        W = scipy.linalg.cho_solve(factor, rhs, check_finite=False).T
    except np.linalg.LinAlgError as exc:
        raise RidgeSolveError(f"Gram matrix not positive definite (beta={beta})") from exc
    if not np.all(np.isfinite(W)):
        raise RidgeSolveError("ridge solution is not finite")
    return WeightMatrix(W, "ridge")


def ridge_cost(W, tm: TrainingMatrices, beta: float) -> float:
    W = W.W if isinstance(W, WeightMatrix) else W
    resid = tm.Z_target - W @ tm.Phi
    return 0.5 * np.sum(resid**2) + 0.5 * beta * np.sum(W**2)
