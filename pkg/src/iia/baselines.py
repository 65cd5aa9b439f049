"""Comparison estimators.

AD-NVAR assumes additive innovations x_t = f_ad(x_{t-1}) + s_t: a predictor
MLP is fitted by mean squared error and its residuals are the innovation
estimates, un-mixed by linear ICA for fairness. The linear ICA (NSVICA)
exploits nonstationarity of variance: whiten globally, then find one
orthogonal rotation that jointly diagonalizes all segment covariance
matrices (Jacobi sweeps over coordinate pairs).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnet, simgen
from .contrastive import lagged_pairs
from .nnet import TrainConfig

log = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-12
JACOBI_TOL = 1e-8
MAX_JACOBI_SWEEPS = 100


# ----------------------------------------------------------------------
# AD-NVAR: additive-innovation predictor
# ----------------------------------------------------------------------

@dataclass
class AdnvarConfig:
    num_layers: int = 1
    order: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class AdnvarModel:
    """Predictor net plus the linear unmixing fitted to its residuals."""

    predictor: nnet.MlpParams
    unmixing: np.ndarray       # (n, n), applied to centered residuals
    mean: np.ndarray           # (n,) residual mean removed before unmixing
    num_segments: int

    def validate(self) -> None:
        sign, _ = np.linalg.slogdet(self.unmixing)
        if sign == 0.0:
            raise ValueError("unmixing matrix is singular")


def _predictor_dims(n: int, order: int, num_layers: int) -> list[int]:
    if num_layers == 1:
        return [order * n, n]
    return [order * n] + [4 * n] * (num_layers - 1) + [n]


def train_adnvar(x: np.ndarray, config: AdnvarConfig | None = None):
    """MSE regression of x_t on its lagged values. Returns (net, history);
    the last history row carries the final train MSE."""
    config = config or AdnvarConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < config.order + 2:
        raise ValueError("x must be (N, n) with N >= order + 2")
    x_t, x_prev = lagged_pairs(x, config.order)
    activation = "maxout" if config.num_layers > 1 else "leaky_relu"
    dims = _predictor_dims(x.shape[1], config.order, config.num_layers)
    return nnet.train_regression(x_prev, x_t, dims, activation, config.train)


def adnvar_residuals(net: nnet.MlpParams, x: np.ndarray) -> np.ndarray:
    """Innovation estimates r_t = x_t - f(x_prev); the lag order is read off
    the predictor input width."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    width = net.layer_dims[0]
    if width % n != 0 or not 1 <= width // n <= 3:
        raise ValueError(f"predictor input width {width} incompatible with n={n}")
    x_t, x_prev = lagged_pairs(x, width // n)
    return x_t - nnet.mlp_forward(net, x_prev)[0]


def fit_adnvar(x: np.ndarray, num_segments: int,
               config: AdnvarConfig | None = None):
    """Full baseline: predictor, residuals, then NSVICA on the residuals.
    Returns (AdnvarModel, sources, predictor history)."""
    net, history = train_adnvar(x, config)
    residuals = adnvar_residuals(net, x)
    ns_model, sources = nsvica(residuals, num_segments)
    model = AdnvarModel(predictor=net, unmixing=ns_model.unmixing(),
                        mean=ns_model.mean, num_segments=num_segments)
    model.validate()
    return model, sources, history


# ----------------------------------------------------------------------
# NSVICA: whitening + orthogonal joint diagonalization
# ----------------------------------------------------------------------

@dataclass
class NsvicaModel:
    whitening: np.ndarray      # (n, n)
    rotation: np.ndarray       # (n, n) orthogonal
    num_segments: int
    mean: np.ndarray           # (n,)

    def unmixing(self) -> np.ndarray:
        return self.rotation.T @ self.whitening

    def transform(self, series: np.ndarray) -> np.ndarray:
        return (np.asarray(series, dtype=np.float64) - self.mean) @ self.unmixing().T

    def validate(self) -> None:
        gap = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(self.rotation.shape[0])))
        if gap > 1e-8:
            raise ValueError(f"rotation is not orthogonal (deviation {gap:.3g})")


def _off_diagonal_objective(mats) -> float:
    total = 0.0
    for C in mats:
        total += float(np.sum(C * C) - np.sum(np.diag(C) ** 2))
    return total


def joint_diagonalize(mats, tol: float = JACOBI_TOL,
                      max_sweeps: int = MAX_JACOBI_SWEEPS):
    """One orthogonal V that makes every V^T C_k V as diagonal as possible.

    Jacobi strategy: each coordinate pair (p, q) gets the closed-form Givens
    angle that minimizes the summed squared off-diagonals restricted to that
    pair, and sweeps repeat until the largest rotation sine falls below tol.
    Returns (V, objective history per sweep).
    """
    mats = [np.array(C, dtype=np.float64, copy=True) for C in mats]
    if not mats:
        raise ValueError("need at least one matrix")
    n = mats[0].shape[0]
    V = np.eye(n)
    history = [_off_diagonal_objective(mats)]
    for _ in range(max_sweeps):
        max_sin = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                h1 = np.array([C[p, p] - C[q, q] for C in mats])
                h2 = np.array([C[p, q] + C[q, p] for C in mats])
                G = np.array([[h1 @ h1, h1 @ h2], [h1 @ h2, h2 @ h2]])
                _, vecs = np.linalg.eigh(G)
                gx, gy = vecs[:, -1]
                if gx < 0.0:
                    gx, gy = -gx, -gy
                r = np.hypot(gx, gy)
                if r < 1e-30:
                    continue
                c = np.sqrt((gx + r) / (2.0 * r))
                s = gy / np.sqrt(2.0 * r * (gx + r))
                max_sin = max(max_sin, abs(s))
                for C in mats:
                    cp, cq = C[:, p].copy(), C[:, q].copy()
                    C[:, p] = c * cp + s * cq
                    C[:, q] = -s * cp + c * cq
                    rp, rq = C[p, :].copy(), C[q, :].copy()
                    C[p, :] = c * rp + s * rq
                    C[q, :] = -s * rp + c * rq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp + s * vq
                V[:, q] = -s * vp + c * vq
        history.append(_off_diagonal_objective(mats))
        if max_sin < tol:
            break
    return V, history


def nsvica(series: np.ndarray, num_segments: int):
    """Linear ICA from variance nonstationarity.

    Whitens with the total covariance, splits the whitened series into
    contiguous segments, and joint-diagonalizes the segment covariances.
    Returns (NsvicaModel, sources).
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError("series must be (N, n)")
    N, n = series.shape
    if num_segments < 2:
        raise ValueError("num_segments must be at least 2")
    if N // num_segments < n:
        raise ValueError(f"segment length {N // num_segments} shorter than n={n}")

    mean = series.mean(axis=0)
    centered = series - mean
    total_cov = centered.T @ centered / N
    evals, evecs = np.linalg.eigh(total_cov)
    if evals[0] < RANK_TOLERANCE * evals[-1]:
        raise ValueError("rank-deficient covariance; components are collinear")
    whitening = (evecs / np.sqrt(evals)).T
    white = centered @ whitening.T

    labels = simgen.segment_labels(N, num_segments)
    covs = []
    for k in range(num_segments):
        block = white[labels == k]
        covs.append(block.T @ block / block.shape[0])
    rotation, history = joint_diagonalize(covs)
    log.debug("joint diagonalization: %d sweeps, objective %.3g -> %.3g",
              len(history) - 1, history[0], history[-1])

    model = NsvicaModel(whitening=whitening, rotation=rotation,
                        num_segments=num_segments, mean=mean)
    model.validate()
    return model, white @ rotation


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------

def adnvar_to_json(model: AdnvarModel) -> dict:
    return {
        "kind": "adnvar",
        "predictor": nnet.mlp_to_json(model.predictor),
        "unmixing": model.unmixing.tolist(),
        "mean": model.mean.tolist(),
        "num_segments": model.num_segments,
    }


def adnvar_from_json(blob: dict) -> AdnvarModel:
    model = AdnvarModel(
        predictor=nnet.mlp_from_json(blob["predictor"]),
        unmixing=np.asarray(blob["unmixing"], dtype=np.float64),
        mean=np.asarray(blob["mean"], dtype=np.float64),
        num_segments=int(blob["num_segments"]),
    )
    model.validate()
    return model


def nsvica_to_json(model: NsvicaModel) -> dict:
    return {
        "kind": "nsvica",
        "whitening": model.whitening.tolist(),
        "rotation": model.rotation.tolist(),
        "num_segments": model.num_segments,
        "mean": model.mean.tolist(),
    }


def nsvica_from_json(blob: dict) -> NsvicaModel:
    model = NsvicaModel(
        whitening=np.asarray(blob["whitening"], dtype=np.float64),
        rotation=np.asarray(blob["rotation"], dtype=np.float64),
        num_segments=int(blob["num_segments"]),
        mean=np.asarray(blob["mean"], dtype=np.float64),
    )
    model.validate()
    return model


def save_baseline(path, model) -> None:
    blob = adnvar_to_json(model) if isinstance(model, AdnvarModel) else nsvica_to_json(model)
    Path(path).write_text(json.dumps(blob))


def load_baseline(path):
    blob = json.loads(Path(path).read_text())
    if blob.get("kind") == "adnvar":
        return adnvar_from_json(blob)
    if blob.get("kind") == "nsvica":
        return nsvica_from_json(blob)
    raise ValueError(f"unknown baseline kind {blob.get('kind')!r}")
