"""Recovery metrics and model checks: correlation, matching, MCC, variability.

MCC here is the mean absolute Pearson correlation between true and estimated
innovation components after optimal one-to-one matching (Hungarian assignment
on -|corr|). A Spearman variant is exposed alongside for robustness to
monotone warps. variability_check verifies the rank condition on modulation
differences that the recovery guarantees rest on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from . import nnet

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    """Recovery metrics for one (true, estimated) innovation pair."""

    corr: np.ndarray
    perm: np.ndarray
    mcc: float
    corr_spearman: np.ndarray | None = None
    mcc_spearman: float | None = None
    metadata: dict = field(default_factory=dict)


@dataclass
class VariabilityReport:
    """Rank diagnostics of the modulation-difference matrix."""

    L_matrix: np.ndarray
    rank: int
    smallest_sv: float
    passed: bool


def align_true_innovations(s_true: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
    """Drop the first true point when estimates start at t=1 (length N-1)."""
    if s_true.shape[0] == s_hat.shape[0] + 1:
        return s_true[1:]
    return s_true


def correlation_matrix(s_true: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
    """Pearson correlation per (true, estimated) component pair.

    Requires equal lengths >= 3 (use align_true_innovations first). A
    constant series contributes zeros in its row/column; logged, not an error.
    """
    s_true = np.asarray(s_true, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_true.ndim != 2 or s_hat.ndim != 2:
        raise ValueError("series must be 2-D (rows = time)")
    if s_true.shape[0] != s_hat.shape[0]:
        raise ValueError(
            f"series lengths differ: {s_true.shape[0]} vs {s_hat.shape[0]}"
        )
    if s_true.shape[0] < 3:
        raise ValueError("need at least 3 time points")

    # Each column is standardized and dotted as its own contiguous 1-D array,
    # so an entry depends only on its two columns. A fused matrix product
    # would let the surrounding layout perturb low-order bits, breaking exact
    # invariance under column permutation.
    def standardize_columns(a):
        cols = []
        for j in range(a.shape[1]):
            col = np.ascontiguousarray(a[:, j])
            centered = col - col.mean()
            std = col.std()
            if std < 1e-300:
                log.warning("constant series in correlation; component %d set to 0", j)
                cols.append(np.zeros_like(col))
            else:
                cols.append(centered / std)
        return cols

    a = standardize_columns(s_true)
    b = standardize_columns(s_hat)
    N = s_true.shape[0]
    corr = np.empty((len(a), len(b)))
    for i, ac in enumerate(a):
        for j, bc in enumerate(b):
            corr[i, j] = np.dot(ac, bc) / N
    return np.clip(corr, -1.0, 1.0)


def match_components(corr: np.ndarray) -> np.ndarray:
    """Permutation maximizing the matched |corr| sum (exact Hungarian optimum).

    Returns perm with perm[i] = estimated component matched to true i.
    """
    corr = np.asarray(corr, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError(f"corr must be square, got {corr.shape}")
    rows, cols = linear_sum_assignment(-np.abs(corr))
    perm = np.empty(corr.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def mcc(corr: np.ndarray, perm: np.ndarray) -> float:
    """Mean absolute correlation along the matched pairs.

    The sum is order-independent (math.fsum), so permuting the estimated
    components cannot move the result by even one ulp.
    """
    corr = np.asarray(corr, dtype=np.float64)
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(corr.shape[0])):
        raise ValueError("perm must be a bijection on components")
    matched = np.abs(corr[np.arange(corr.shape[0]), perm])
    return math.fsum(matched.tolist()) / corr.shape[0]


def spearman_correlation_matrix(s_true: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
    """Spearman = Pearson on per-component ranks."""
    ranks_true = np.column_stack([rankdata(c) for c in np.asarray(s_true, dtype=np.float64).T])
    ranks_hat = np.column_stack([rankdata(c) for c in np.asarray(s_hat, dtype=np.float64).T])
    return correlation_matrix(ranks_true, ranks_hat)


def evaluate_recovery(s_true: np.ndarray, s_hat: np.ndarray,
                      metadata: dict | None = None) -> EvalReport:
    """Full recovery report: Pearson MCC (primary) plus the Spearman variant."""
    s_true = align_true_innovations(np.asarray(s_true), np.asarray(s_hat))
    corr = correlation_matrix(s_true, s_hat)
    perm = match_components(corr)
    corr_sp = spearman_correlation_matrix(s_true, s_hat)
    perm_sp = match_components(corr_sp)
    return EvalReport(
        corr=corr,
        perm=perm,
        mcc=mcc(corr, perm),
        corr_spearman=corr_sp,
        mcc_spearman=mcc(corr_sp, perm_sp),
        metadata=dict(metadata or {}),
    )


def variability_check(lambda_samples: np.ndarray, threshold: float = 1e-8) -> VariabilityReport:
    """Rank check on L = [lambda(u_1)-lambda(u_0), ..., lambda(u_{P-1})-lambda(u_0)].

    ``lambda_samples`` is nk x P, one column per distinct auxiliary point.
    Passes iff the difference matrix has full row rank nk, judged by singular
    values above threshold * sigma_max.
    """
    lam = np.asarray(lambda_samples, dtype=np.float64)
    if lam.ndim != 2 or lam.shape[1] < 2:
        raise ValueError("need an nk x P matrix with P >= 2")
    nk = lam.shape[0]
    diff = lam[:, 1:] - lam[:, :1]
    svals = np.linalg.svd(diff, compute_uv=False)
    if svals.size == 0 or svals[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(svals > threshold * svals[0]))
    smallest = float(svals[nk - 1]) if svals.size >= nk else 0.0
    return VariabilityReport(L_matrix=diff, rank=rank, smallest_sv=smallest,
                             passed=rank == nk)


def modulation_variability(mod, num_points: int | None = None, seed: int = 0,
                           threshold: float = 1e-8) -> VariabilityReport:
    """variability_check on nk+1 distinct random time points of a modulation."""
    nk = mod.n * mod.k
    if num_points is None:
        num_points = nk + 1
    N = mod.lambda1.shape[1]
    if num_points > N:
        raise ValueError(f"need {num_points} distinct time points, series has {N}")
    rng = np.random.default_rng(seed)
    pts = rng.choice(N, size=num_points, replace=False)
    lam = np.vstack([mod.lambda1[:, pts], mod.lambda2[:, pts]])
    return variability_check(lam, threshold=threshold)


def fit_forward_model(x: np.ndarray, s_hat: np.ndarray, cfg: nnet.TrainConfig | None = None,
                      hidden_layers: int = 2, holdout: float = 0.1):
    """Post-hoc check: fit x_t from [x_{t-1}; s_hat_t] by MSE, report R^2.

    Estimates are aligned to start at t=1. Returns (net, r2) with r2 the
    per-dimension coefficient of determination on the held-out tail. With
    zero training epochs the net is the zero predictor, the defined baseline.
    """
    x = np.asarray(x, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.shape[0] == x.shape[0]:
        s_hat = s_hat[1:]
    if s_hat.shape[0] != x.shape[0] - 1:
        raise ValueError("s_hat must have N or N-1 rows for an N-row x")
    cfg = cfg or nnet.TrainConfig()
    n = x.shape[1]
    inputs = np.hstack([x[:-1], s_hat])
    targets = x[1:]
    split = max(1, int(round(inputs.shape[0] * (1.0 - holdout))))
    dims = [2 * n] + [4 * n] * hidden_layers + [n]
    net, _ = nnet.train_regression(inputs[:split], targets[:split], dims,
                                   "leaky_relu", cfg)
    pred, _ = nnet.mlp_forward(net, inputs[split:])
    held = targets[split:]
    ss_res = np.sum((held - pred) ** 2, axis=0)
    ss_tot = np.sum((held - held.mean(axis=0)) ** 2, axis=0)
    ss_tot = np.where(ss_tot < 1e-300, 1.0, ss_tot)
    return net, 1.0 - ss_res / ss_tot
