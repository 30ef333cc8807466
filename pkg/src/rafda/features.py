"""Random feature map tanh(W_in zeta + b_in) and the surrogate propagator W phi(zeta)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

BLOWUP_THRESHOLD = 1e6
_MAGIC = b"RFMP"


class SurrogateBlowUp(RuntimeError):
    """Raised by :func:`free_run` when an iterate leaves the finite/bounded range.

    ``trajectory`` holds the iterates up to and excluding the offending step.
    """

    def __init__(self, step: int, trajectory: np.ndarray):
        super().__init__(f"surrogate free run blew up at step {step}")
        self.step = step
        self.trajectory = trajectory


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureParams:
    W_in: np.ndarray  # (D_r, D_zeta)
    b_in: np.ndarray  # (D_r,)
    w: float
    b: float

    def __post_init__(self):
        W_in = _frozen(self.W_in)
        b_in = _frozen(self.b_in).reshape(-1)
        if W_in.ndim != 2 or W_in.shape[0] != b_in.shape[0]:
            raise ValueError(f"W_in {W_in.shape} and b_in {b_in.shape} are inconsistent")
        object.__setattr__(self, "W_in", W_in)
        object.__setattr__(self, "b_in", b_in)

    @property
    def D_r(self) -> int:
        return self.W_in.shape[0]

    @property
    def D_zeta(self) -> int:
        return self.W_in.shape[1]

    def to_json(self) -> dict:
        return {
            "w": self.w,
            "b": self.b,
            "W_in": self.W_in.tolist(),
            "b_in": self.b_in.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureParams":
        return cls(np.array(doc["W_in"], dtype=float), np.array(doc["b_in"], dtype=float), doc["w"], doc["b"])

    def to_bytes(self) -> bytes:
        """16-byte header (magic, D_r, D_zeta, version) then w, b, W_in column-major, b_in; little-endian."""
        head = _MAGIC + struct.pack("<III", self.D_r, self.D_zeta, 1)
        body = struct.pack("<dd", self.w, self.b)
        return head + body + self.W_in.astype("<f8").tobytes(order="F") + self.b_in.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeatureParams":
        if raw[:4] != _MAGIC:
            raise ValueError("not a feature-parameter blob")
        D_r, D_zeta, _ = struct.unpack("<III", raw[4:16])
        w, b = struct.unpack("<dd", raw[16:32])
        n_w = D_r * D_zeta * 8
        W_in = np.frombuffer(raw[32:32 + n_w], dtype="<f8").reshape((D_r, D_zeta), order="F")
        b_in = np.frombuffer(raw[32 + n_w:32 + n_w + D_r * 8], dtype="<f8")
        return cls(W_in, b_in, w, b)


@dataclass(frozen=True)
class WeightMatrix:
    W: np.ndarray  # (D_zeta, D_r)
    provenance: str = "ridge"

    def __post_init__(self):
        W = _frozen(self.W)
        if W.ndim != 2:
            raise ValueError("weight matrix must be 2-D")
        if not np.all(np.isfinite(W)):
            raise ValueError("weight matrix has non-finite entries")
        if self.provenance not in ("ridge", "rafda"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "W", W)


def sample_feature_params(D_r: int, D_zeta: int, w: float, b: float, rng: np.random.Generator) -> FeatureParams:
    if D_r < 1 or D_zeta < 1:
        raise ValueError("feature and input dimensions must be >= 1")
    if w < 0 or b < 0:
        raise ValueError("draw half-widths must be non-negative")
    W_in = rng.uniform(-w, w, size=(D_r, D_zeta))
    b_in = rng.uniform(-b, b, size=D_r)
    return FeatureParams(W_in, b_in, float(w), float(b))


def feature_map(zeta, params: FeatureParams) -> np.ndarray:
    """phi(zeta) for a single vector (D_zeta,) or column batch (D_zeta, K)."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape[0] != params.D_zeta:
        raise ValueError(f"expected input of dimension {params.D_zeta}, got {zeta.shape[0]}")
    if zeta.ndim == 1:
        return np.tanh(params.W_in @ zeta + params.b_in)
    return np.tanh(params.W_in @ zeta + params.b_in[:, None])


def _weights(W) -> np.ndarray:
    return W.W if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)


def surrogate_step(W, zeta, params: FeatureParams) -> np.ndarray:
    W = _weights(W)
    if W.shape[1] != params.D_r:
        raise ValueError(f"weight matrix has {W.shape[1]} columns, feature dimension is {params.D_r}")
    return W @ feature_map(zeta, params)


def free_run(W, params: FeatureParams, zeta0, n_steps: int, threshold: float = BLOWUP_THRESHOLD) -> np.ndarray:
    """Iterate the surrogate from ``zeta0``; returns (n_steps + 1, D_zeta)."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    W = _weights(W)
    z = np.asarray(zeta0, dtype=float)
    out = np.empty((n_steps + 1, z.shape[0]))
    out[0] = z
    W_in, b_in = params.W_in, params.b_in
    for n in range(1, n_steps + 1):
        z = W @ np.tanh(W_in @ z + b_in)
        if not np.all(np.abs(z) <= threshold):
            raise SurrogateBlowUp(n, out[:n].copy())
        out[n] = z
    return out


def save_model(path, params: FeatureParams, W: WeightMatrix, m: int, tau: int, dt: float, **extra) -> None:
    doc = {
        "format": "rafda-model",
        "version": 1,
        "embedding": {"m": int(m), "tau": int(tau), "dt": float(dt)},
        "features": params.to_json(),
        "weights": {"provenance": W.provenance, "W": W.W.tolist()},
    }
    doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> tuple[FeatureParams, WeightMatrix, dict]:
    """Returns (params, weights, embedding metadata)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "rafda-model":
        raise ValueError(f"{path}: not a model file")
    params = FeatureParams.from_json(doc["features"])
    W = WeightMatrix(np.array(doc["weights"]["W"], dtype=float), doc["weights"]["provenance"])
    if W.W.shape != (params.D_zeta, params.D_r):
        raise ValueError(f"{path}: weight shape {W.W.shape} does not match features")
    return params, W, doc["embedding"]
