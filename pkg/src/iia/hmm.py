"""Hidden-Markov innovation analysis fitted by expectation-maximization.

A demixing network h maps (x_t, x_prev) to innovation estimates whose
distribution switches between C diagonal-Gaussian states along a Markov
chain. The exact likelihood of the observed series follows from the change
of variables, so every emission carries log|det dh/dx_t|; both that term
and its gradient with respect to the network parameters are computed
analytically (adjoint rule) rather than by automatic differentiation.

The E-step runs scaled forward-backward for full posteriors. The M-step
updates the chain and the state moments in closed form and takes guarded
gradient-ascent steps on the network (generalized EM: a step is kept only
if it does not lower the EM lower bound Q).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from . import contrastive, nnet, simgen
from .nnet import TrainConfig
from .nnet import seed_from as child_seed

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SINGULAR_DET_FLOOR = 1e-300
VARIANCE_FLOOR = 1e-6
DEAD_STATE_RESPONSIBILITY = 1e-8

_singular_jacobians = 0


def singular_jacobian_count() -> int:
    """Number of emissions forced to -inf by a singular demixing Jacobian."""
    return _singular_jacobians


def reset_singular_jacobian_count() -> None:
    global _singular_jacobians
    _singular_jacobians = 0


# ----------------------------------------------------------------------
# Model and posterior containers
# ----------------------------------------------------------------------

@dataclass
class HmmModel:
    """Demixing network plus the Markov-Gaussian innovation parameters."""

    n: int
    C: int
    h_net: nnet.MlpParams
    A: np.ndarray       # (C, C) row-stochastic transition matrix
    pi: np.ndarray      # (C,) initial state distribution
    means: np.ndarray   # (C, n) per-state innovation means
    vars: np.ndarray    # (C, n) per-state innovation variances

    def validate(self) -> None:
        if self.A.shape != (self.C, self.C):
            raise ValueError(f"A must be ({self.C}, {self.C}), got {self.A.shape}")
        if np.max(np.abs(self.A.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows of A must sum to 1")
        if abs(float(self.pi.sum()) - 1.0) > 1e-12:
            raise ValueError("pi must sum to 1")
        if self.means.shape != (self.C, self.n) or self.vars.shape != (self.C, self.n):
            raise ValueError("means and vars must be (C, n)")
        if not np.all(self.vars > 0.0):
            raise ValueError("state variances must be strictly positive")
        if self.h_net.layer_dims[-1] != self.n:
            raise ValueError("h_net must output n components")

    def copy(self) -> "HmmModel":
        return HmmModel(n=self.n, C=self.C, h_net=self.h_net.copy(),
                        A=self.A.copy(), pi=self.pi.copy(),
                        means=self.means.copy(), vars=self.vars.copy())


@dataclass
class Posteriors:
    """Smoothed state beliefs from one forward-backward pass."""

    gamma: np.ndarray   # (N, C) state responsibilities
    xi: np.ndarray      # (N-1, C, C) pairwise responsibilities
    loglik: float

    def validate(self) -> None:
        if np.max(np.abs(self.gamma.sum(axis=1) - 1.0)) > 1e-10:
            raise ValueError("gamma rows must sum to 1")
        if self.xi.size and np.max(np.abs(self.xi.sum(axis=(1, 2)) - 1.0)) > 1e-10:
            raise ValueError("xi slices must sum to 1")
        if self.xi.size:
            drift = np.max(np.abs(self.xi.sum(axis=2) - self.gamma[:-1]))
            if drift > 1e-10:
                raise ValueError(f"xi marginals disagree with gamma by {drift:.3g}")


# ----------------------------------------------------------------------
# Emission log-likelihoods and the Jacobian log-determinant
# ----------------------------------------------------------------------

def _batch_output_and_jacobian(params: nnet.MlpParams, inputs: np.ndarray,
                               num_cols: int):
    """Forward pass plus per-sample Jacobian w.r.t. the first num_cols inputs.

    Returns (outputs, jac) where jac has shape (B, out, num_cols) and B is 1
    when the Jacobian is the same for every sample (purely affine net).
    """
    a = np.asarray(inputs, dtype=np.float64)
    jac = np.eye(params.layer_dims[0])[None, :, :num_cols]
    for l in range(params.num_layers):
        z = a @ params.weights[l].T + params.biases[l]
        jac = params.weights[l] @ jac
        if nnet._is_maxout_layer(params, l):
            batch, rows = z.shape
            out = rows // nnet.MAXOUT_GROUPS
            stacked = z.reshape(batch, nnet.MAXOUT_GROUPS, out)
            active = np.argmax(stacked, axis=1)
            a = np.take_along_axis(stacked, active[:, None, :], axis=1)[:, 0, :]
            row_idx = active * out + np.arange(out)
            jac = np.broadcast_to(jac, (batch, rows, jac.shape[2]))
            jac = np.take_along_axis(jac, row_idx[:, :, None], axis=1)
        elif nnet._has_activation(params, l):
            deriv = nnet._act_derivative(z, params.activation, params.leak)
            a = nnet._act_forward(z, params.activation, params.leak)[0]
            jac = deriv[:, :, None] * jac
        else:
            a = z
    return a, jac


def _h_inputs(x_t: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
    return np.hstack([x_t, x_prev])


def demix_and_logdet(h_net: nnet.MlpParams, x_t: np.ndarray, x_prev: np.ndarray):
    """Innovation estimates h(x_t, x_prev) and log|det dh/dx_t| per sample.

    Singular Jacobians (|det| below 1e-300) yield -inf and bump the module
    diagnostic counter instead of raising, so a bad parameter trial surfaces
    as an impossible emission rather than a crash.
    """
    global _singular_jacobians
    inputs = _h_inputs(x_t, x_prev)
    n = h_net.layer_dims[-1]
    outputs, jac = _batch_output_and_jacobian(h_net, inputs, n)
    sign, logabs = np.linalg.slogdet(jac)
    bad = (sign == 0.0) | ~np.isfinite(logabs) | (logabs < math.log(SINGULAR_DET_FLOOR))
    if np.any(bad):
        count = int(np.count_nonzero(bad)) * (inputs.shape[0] if jac.shape[0] == 1 else 1)
        _singular_jacobians += count
        log.warning("%d singular demixing Jacobians set to -inf emission", count)
        logabs = np.where(bad, -np.inf, logabs)
    if jac.shape[0] == 1:
        logabs = np.broadcast_to(logabs, (inputs.shape[0],))
    return outputs, logabs


def _gaussian_logpdf_matrix(s_hat: np.ndarray, means: np.ndarray,
                            variances: np.ndarray) -> np.ndarray:
    """log N(s_hat[t]; means[c], diag variances[c]) for every (t, c) pair."""
    diff = s_hat[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / variances[None, :, :], axis=2)
    const = np.sum(np.log(variances), axis=1) + means.shape[1] * LOG_2PI
    return -0.5 * (quad + const[None, :])


def emission_matrix(model: HmmModel, x_t: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    """(N, C) log-emission matrix: Gaussian term plus the shared log-det."""
    s_hat, logdet = demix_and_logdet(model.h_net, x_t, x_prev)
    return _gaussian_logpdf_matrix(s_hat, model.means, model.vars) + logdet[:, None]


def emission_loglik(model: HmmModel, x_t: np.ndarray, x_prev: np.ndarray, c: int) -> float:
    """Log density of one observation under state c, with the change-of-
    variables correction log|det dh/dx_t|."""
    if not 0 <= c < model.C:
        raise ValueError(f"state index {c} out of range for C={model.C}")
    row = emission_matrix(model, np.atleast_2d(x_t), np.atleast_2d(x_prev))
    return float(row[0, c])


def _act_second_derivative(z: np.ndarray, kind: str, leak: float) -> np.ndarray:
    if kind in ("linear", "leaky_relu"):
        return np.zeros_like(z)
    if kind == "smooth_leaky_relu":
        sig = expit(z)
        return (1.0 - leak) * sig * (1.0 - sig)
    raise ValueError(f"no second derivative for activation {kind!r}")


def jacobian_logdet_grad(h_net: nnet.MlpParams, x_t: np.ndarray, x_prev: np.ndarray,
                         weights: np.ndarray):
    """Gradient of sum_t weights[t] * log|det dh/dx_t| w.r.t. the h parameters.

    Uses d log|det J| = tr(J^-1 dJ) on the layer-factorized Jacobian
    J = W_last D_{M-2} W_{M-2} ... D_0 W_0[:, :n]: each weight matrix gets a
    direct term S_m^T J^-T B_m^T, and each activation contributes a curvature
    term through D_l = diag(act'(z_l)) that is injected into a standard
    backward pass at z_l. Returns (weight_grads, bias_grads).
    """
    if h_net.activation == "maxout" and h_net.num_layers > 1:
        raise NotImplementedError("log-det gradients need a twice-differentiable "
                                  "activation; maxout is piecewise linear")
    inputs = _h_inputs(x_t, x_prev)
    B, n = inputs.shape[0], h_net.layer_dims[-1]
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape[0] != B:
        raise ValueError(f"{w.shape[0]} weights for {B} samples")
    M = h_net.num_layers

    # Forward pass keeping activations a_l, derivatives D_l, and the prefix
    # Jacobians P_l = dz_l/dx_t; the final prefix is J itself.
    acts = [inputs]
    pre = []     # z_l
    deriv = []   # act'(z_l), None for the linear last layer
    prefix = []  # (B or 1, width_l, n)
    P = np.eye(h_net.layer_dims[0])[None, :, :n]
    a = inputs
    for l in range(M):
        z = a @ h_net.weights[l].T + h_net.biases[l]
        P = h_net.weights[l] @ P
        pre.append(z)
        prefix.append(P)
        if nnet._has_activation(h_net, l):
            d = nnet._act_derivative(z, h_net.activation, h_net.leak)
            a = nnet._act_forward(z, h_net.activation, h_net.leak)[0]
        elif l < M - 1:
            d = np.ones_like(z)   # hidden layer of a purely affine net
            a = z
        else:
            d = None              # last layer, always linear
            a = z
        deriv.append(d)
        if d is not None:
            P = d[:, :, None] * P
        acts.append(a)

    J = np.broadcast_to(prefix[-1], (B, n, n))
    sign, logabs = np.linalg.slogdet(J)
    if np.any(sign == 0.0) or not np.all(np.isfinite(logabs)):
        raise np.linalg.LinAlgError("singular demixing Jacobian in batch")
    Jinv = np.linalg.inv(J)

    # Suffix factors S_l = d output / d z_l, built from the top down.
    suffix = [None] * M
    suffix[M - 1] = np.eye(n)[None, :, :]
    for l in range(M - 2, -1, -1):
        U = suffix[l + 1] @ h_net.weights[l + 1]          # d out / d a_l
        suffix[l] = U * deriv[l][:, None, :]              # d out / d z_l

    weight_grads = [np.zeros_like(Wl) for Wl in h_net.weights]
    bias_grads = [np.zeros_like(bl) for bl in h_net.biases]

    # Direct terms: holding activations fixed, J is linear in each W_m.
    for m in range(M):
        S_m = np.broadcast_to(suffix[m], (B, n, suffix[m].shape[2]))
        JinvS = Jinv @ S_m                                # (B, n, width_m)
        if m == 0:
            weight_grads[0][:, :n] += np.einsum("t,tij->ji", w, JinvS)
        else:
            B_m = deriv[m - 1][:, :, None] * np.broadcast_to(
                prefix[m - 1], (B, prefix[m - 1].shape[1], n))
            weight_grads[m] += np.einsum("t,tnj,tkn->jk", w, JinvS, B_m)

    # Curvature terms: variation of D_l feeds gradient w.r.t. z_l, which a
    # standard backward pass distributes over all parameters of layers <= l.
    upstream = None
    for l in range(M - 2, -1, -1):
        P_l = np.broadcast_to(prefix[l], (B, prefix[l].shape[1], n))
        U_l = np.broadcast_to(suffix[l + 1] @ h_net.weights[l + 1],
                              (B, n, prefix[l].shape[1]))
        G = np.einsum("tin,tnm,tmi->ti", P_l, Jinv, U_l)
        zeta = w[:, None] * G * _act_second_derivative(pre[l], h_net.activation, h_net.leak)
        v = zeta if upstream is None else zeta + upstream * deriv[l]
        weight_grads[l] += v.T @ acts[l]
        bias_grads[l] += v.sum(axis=0)
        if l > 0:
            upstream = v @ h_net.weights[l]
    return weight_grads, bias_grads


# ----------------------------------------------------------------------
# Forward-backward, Viterbi
# ----------------------------------------------------------------------

def forward_backward(emissions: np.ndarray, A: np.ndarray, pi: np.ndarray) -> Posteriors:
    """Scaled forward-backward over a log-emission matrix.

    emissions is (N, C) with allowed -inf entries; a row that is entirely
    -inf (no state explains the point) raises.
    """
    logb = np.asarray(emissions, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    N, C = logb.shape
    shifts = logb.max(axis=1)
    if not np.all(np.isfinite(shifts)):
        t = int(np.flatnonzero(~np.isfinite(shifts))[0])
        raise ValueError(f"no state explains observation {t}: all emissions -inf")
    b = np.exp(logb - shifts[:, None])

    ahat = np.empty((N, C))
    scale = np.empty(N)
    f = pi * b[0]
    scale[0] = f.sum()
    if scale[0] <= 0.0:
        raise ValueError("forward mass vanished at t=0")
    ahat[0] = f / scale[0]
    for t in range(1, N):
        f = (ahat[t - 1] @ A) * b[t]
        scale[t] = f.sum()
        if scale[t] <= 0.0:
            raise ValueError(f"forward mass vanished at t={t}")
        ahat[t] = f / scale[t]

    bhat = np.empty((N, C))
    bhat[N - 1] = 1.0
    for t in range(N - 2, -1, -1):
        bhat[t] = (A @ (b[t + 1] * bhat[t + 1])) / scale[t + 1]

    gamma = ahat * bhat
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = (ahat[:-1, :, None] * A[None, :, :]
          * (b[1:, None, :] * bhat[1:, None, :]) / scale[1:, None, None])
    if xi.size:
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    loglik = float(np.log(scale).sum() + shifts.sum())
    return Posteriors(gamma=gamma, xi=xi, loglik=loglik)


def viterbi(emissions: np.ndarray, A: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Most probable state path under the model, for reporting only (the
    E-step uses full posteriors)."""
    logb = np.asarray(emissions, dtype=np.float64)
    N, C = logb.shape
    with np.errstate(divide="ignore"):
        logA = np.log(np.asarray(A, dtype=np.float64))
        logpi = np.log(np.asarray(pi, dtype=np.float64))
    score = logpi + logb[0]
    back = np.empty((N, C), dtype=np.int64)
    for t in range(1, N):
        cand = score[:, None] + logA
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(C)] + logb[t]
    path = np.empty(N, dtype=np.int64)
    path[N - 1] = int(np.argmax(score))
    for t in range(N - 2, -1, -1):
        path[t] = back[t + 1, path[t + 1]]
    return path


def state_accuracy(true_states: np.ndarray, decoded: np.ndarray) -> float:
    """Fraction of time points decoded correctly after the best one-to-one
    relabeling of states (Hungarian assignment on the confusion matrix)."""
    true_states = np.asarray(true_states, dtype=np.int64).ravel()
    decoded = np.asarray(decoded, dtype=np.int64).ravel()
    if true_states.shape != decoded.shape:
        raise ValueError("state paths must have equal length")
    Ct, Ce = int(true_states.max()) + 1, int(decoded.max()) + 1
    confusion = np.zeros((Ct, Ce))
    np.add.at(confusion, (true_states, decoded), 1.0)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / true_states.size)


# ----------------------------------------------------------------------
# M-step: closed-form discrete updates, guarded network ascent
# ----------------------------------------------------------------------

@dataclass
class DiscreteUpdate:
    A: np.ndarray
    pi: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    reinitialized: tuple[int, ...] = ()


def stationary_distribution(A: np.ndarray) -> np.ndarray:
    """Left eigenvector of A for eigenvalue 1, normalized to a distribution."""
    values, vectors = np.linalg.eig(np.asarray(A, dtype=np.float64).T)
    k = int(np.argmin(np.abs(values - 1.0)))
    p = np.abs(np.real(vectors[:, k]))
    return p / p.sum()


def m_step_discrete(posteriors: Posteriors, s_hat: np.ndarray,
                    rng: np.random.Generator | None = None,
                    stationary: bool = False) -> DiscreteUpdate:
    """Baum-Welch closed forms for A, pi, and the state moments of s_hat.

    Variances are floored at 1e-6. A state whose total responsibility falls
    below 1e-8 is reinitialized from a random data point (recorded in the
    result) so EM can recycle it instead of dividing by zero.
    """
    gamma, xi = posteriors.gamma, posteriors.xi
    s_hat = np.asarray(s_hat, dtype=np.float64)
    N, C = gamma.shape
    if s_hat.shape[0] != N:
        raise ValueError(f"s_hat has {s_hat.shape[0]} rows for {N} posteriors")

    counts = xi.sum(axis=0) if xi.size else np.zeros((C, C))
    row_mass = counts.sum(axis=1, keepdims=True)
    A = np.where(row_mass > 0.0, counts / np.where(row_mass > 0.0, row_mass, 1.0),
                 1.0 / C)
    A /= A.sum(axis=1, keepdims=True)
    pi = stationary_distribution(A) if stationary else gamma[0].copy()
    pi /= pi.sum()

    totals = gamma.sum(axis=0)
    safe = np.where(totals > 0.0, totals, 1.0)
    means = (gamma.T @ s_hat) / safe[:, None]
    second = (gamma.T @ (s_hat * s_hat)) / safe[:, None]
    variances = np.maximum(second - means * means, VARIANCE_FLOOR)

    dead = np.flatnonzero(totals < DEAD_STATE_RESPONSIBILITY)
    if dead.size:
        rng = rng or np.random.default_rng(0)
        spread = np.maximum(s_hat.var(axis=0), VARIANCE_FLOOR)
        for c in dead:
            means[c] = s_hat[rng.integers(N)]
            variances[c] = spread
        log.info("reinitialized %d dead states: %s", dead.size, dead.tolist())
    return DiscreteUpdate(A=A, pi=pi, means=means, vars=variances,
                          reinitialized=tuple(int(c) for c in dead))


def q_value(h_net: nnet.MlpParams, x_t: np.ndarray, x_prev: np.ndarray,
            gamma: np.ndarray, means: np.ndarray, variances: np.ndarray) -> float:
    """EM lower-bound term that depends on the network:
    sum_t sum_c gamma_t(c) log N(h_t; m_c, v_c) + sum_t gamma-mass_t log|det J_t|."""
    s_hat, logdet = demix_and_logdet(h_net, x_t, x_prev)
    gauss = _gaussian_logpdf_matrix(s_hat, means, variances)
    mass = gamma.sum(axis=1)
    if np.any(~np.isfinite(logdet) & (mass > 0.0)):
        return -np.inf
    return float(np.sum(gamma * gauss) + np.sum(mass * np.where(mass > 0.0, logdet, 0.0)))


def q_gradient(h_net: nnet.MlpParams, x_t: np.ndarray, x_prev: np.ndarray,
               gamma: np.ndarray, means: np.ndarray, variances: np.ndarray):
    """Analytic gradient of q_value w.r.t. the network parameters."""
    inputs = _h_inputs(x_t, x_prev)
    s_hat, cache = nnet.mlp_forward(h_net, inputs)
    inv_v = 1.0 / variances
    upstream = (gamma @ (means * inv_v)) - s_hat * (gamma @ inv_v)
    (wg, bg), _ = nnet.mlp_backward(h_net, cache, upstream)
    jw, jb = jacobian_logdet_grad(h_net, x_t, x_prev, gamma.sum(axis=1))
    return ([a + b for a, b in zip(wg, jw)], [a + b for a, b in zip(bg, jb)])


@dataclass
class NetUpdateResult:
    h_net: nnet.MlpParams
    q_before: float
    q_after: float
    accepted_steps: int


def m_step_network(model: HmmModel, x_t: np.ndarray, x_prev: np.ndarray,
                   posteriors: Posteriors, lr: float = 0.1, num_steps: int = 1,
                   max_halvings: int = 10) -> NetUpdateResult:
    """Guarded gradient ascent on Q: each step keeps the largest halved step
    size that does not decrease Q, and gives up after max_halvings tries.

    The step length is lr times the mean (per-sample) gradient, so lr has a
    data-size-independent scale.
    """
    gamma = posteriors.gamma
    net = model.h_net.copy()
    q0 = q_value(net, x_t, x_prev, gamma, model.means, model.vars)
    if not np.any(gamma):
        return NetUpdateResult(h_net=net, q_before=q0, q_after=q0, accepted_steps=0)
    q_current = q0
    accepted = 0
    scale = 1.0 / gamma.shape[0]
    for _ in range(num_steps):
        wg, bg = q_gradient(net, x_t, x_prev, gamma, model.means, model.vars)
        direction = nnet.flatten_params(wg + bg) * scale
        theta = nnet.mlp_param_vector(net)
        trial = net.copy()
        step = lr
        improved = False
        for _ in range(max_halvings + 1):
            nnet.mlp_set_param_vector(trial, theta + step * direction)
            q_trial = q_value(trial, x_t, x_prev, gamma, model.means, model.vars)
            if q_trial >= q_current:
                net, q_current, improved = trial, q_trial, True
                accepted += 1
                break
            step *= 0.5
        if not improved:
            log.info("no improving network step found; skipping network update")
            break
    return NetUpdateResult(h_net=net, q_before=q0, q_after=q_current,
                           accepted_steps=accepted)


# ----------------------------------------------------------------------
# Full EM training with restarts
# ----------------------------------------------------------------------

@dataclass
class HmmConfig:
    """Knobs for train_hmm_em; defaults follow the reference experiment."""

    num_restarts: int = 20
    max_iters: int = 50
    tol: float = 1e-6
    num_layers: int = 1
    net_lr: float = 0.1
    net_steps: int = 3
    max_halvings: int = 10
    init_segment_length: int = 32
    init_epochs: int = 10
    stationary_pi: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainedHmm:
    model: HmmModel
    restart_seed: int
    final_loglik: float


def _fold_scaler(h_net: nnet.MlpParams, x_mean: np.ndarray, x_std: np.ndarray,
                 order: int) -> nnet.MlpParams:
    """Absorb a per-component input scaler into the first layer so the net
    reads raw (x_t, x_prev) rows."""
    folded = h_net.copy()
    tiled_mean = np.tile(x_mean, order + 1)
    tiled_std = np.tile(x_std, order + 1)
    folded.weights[0] = h_net.weights[0] / tiled_std
    folded.biases[0] = h_net.biases[0] - folded.weights[0] @ tiled_mean
    return folded


def _h_net_dims(n: int, num_layers: int) -> list[int]:
    return [2 * n] + [2 * n] * (num_layers - 1) + [n]


def _init_h_net(x: np.ndarray, config: HmmConfig, seed: int) -> nnet.MlpParams:
    """Short segment-classification run whose feature net seeds the EM."""
    N, n = x.shape
    num_segments = max(2, N // config.init_segment_length)
    labels = simgen.segment_labels(N, num_segments)
    tcl_cfg = contrastive.TclConfig(
        num_layers=config.num_layers, order=1,
        h_dims=_h_net_dims(n, config.num_layers),
        h_activation="smooth_leaky_relu",
        train=TrainConfig(epochs=config.init_epochs, seed=seed),
    )
    tcl_model, _, _ = contrastive.train_tcl(x, labels, tcl_cfg)
    return _fold_scaler(tcl_model.h_net, tcl_model.x_mean, tcl_model.x_std, order=1)


def _run_restart(x_t: np.ndarray, x_prev: np.ndarray, h_net: nnet.MlpParams,
                 C: int, config: HmmConfig, seed: int):
    n = x_t.shape[1]
    rng = np.random.default_rng(child_seed(seed, 1))
    A = np.full((C, C), 0.1 / (C - 1)) if C > 1 else np.ones((1, 1))
    if C > 1:
        np.fill_diagonal(A, 0.9)
    pi = np.full(C, 1.0 / C)
    s0, _ = demix_and_logdet(h_net, x_t, x_prev)
    anchors = rng.choice(x_t.shape[0], size=C, replace=False)
    means = s0[anchors].copy()
    variances = np.broadcast_to(np.maximum(s0.var(axis=0), VARIANCE_FLOOR),
                                (C, n)).copy()
    model = HmmModel(n=n, C=C, h_net=h_net, A=A, pi=pi, means=means, vars=variances)

    rows = []
    prev_loglik = -np.inf
    for it in range(config.max_iters):
        s_hat, logdet = demix_and_logdet(model.h_net, x_t, x_prev)
        emissions = _gaussian_logpdf_matrix(s_hat, model.means, model.vars) + logdet[:, None]
        post = forward_backward(emissions, model.A, model.pi)
        if post.loglik < prev_loglik - 1e-6:
            log.warning("loglik decreased by %.3g at iteration %d",
                        prev_loglik - post.loglik, it)
        converged = it > 0 and post.loglik - prev_loglik < config.tol
        prev_loglik = post.loglik
        if converged:
            rows.append({"iter": it, "loglik": post.loglik, "Q": math.nan,
                         "accepted_net_step": 0})
            break
        update = m_step_discrete(post, s_hat, rng=rng, stationary=config.stationary_pi)
        model.A, model.pi = update.A, update.pi
        model.means, model.vars = update.means, update.vars
        net_result = m_step_network(model, x_t, x_prev, post, lr=config.net_lr,
                                    num_steps=config.net_steps,
                                    max_halvings=config.max_halvings)
        model.h_net = net_result.h_net
        rows.append({"iter": it, "loglik": post.loglik, "Q": net_result.q_after,
                     "accepted_net_step": net_result.accepted_steps})
    final = forward_backward(emission_matrix(model, x_t, x_prev), model.A, model.pi)
    model.validate()
    return model, float(final.loglik), rows


def train_hmm_em(x: np.ndarray, C: int, config: HmmConfig | None = None):
    """EM with restarts: every restart seeds the demixing net from a short
    segment-classification run, then alternates forward-backward E-steps with
    closed-form discrete updates and guarded network ascent. Returns
    (TrainedHmm of the best-likelihood restart, list of per-iteration log rows).
    """
    config = config or HmmConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be (N, n)")
    if C < 1:
        raise ValueError("C must be positive")
    x_t, x_prev = contrastive.lagged_pairs(x, order=1)

    best: TrainedHmm | None = None
    log_rows = []
    for r in range(config.num_restarts):
        restart_seed = child_seed(config.seed, 301, r)
        try:
            h_net = _init_h_net(x, config, restart_seed)
            model, loglik, rows = _run_restart(x_t, x_prev, h_net, C, config,
                                               restart_seed)
        except (ValueError, np.linalg.LinAlgError, nnet.DivergenceError) as exc:
            log.warning("restart %d failed: %s", r, exc)
            continue
        for row in rows:
            log_rows.append({"restart": r, **row})
        log.info("restart %d: final loglik %.6f", r, loglik)
        if best is None or loglik > best.final_loglik:
            best = TrainedHmm(model=model, restart_seed=restart_seed,
                              final_loglik=loglik)
    if best is None:
        raise RuntimeError("all restarts diverged")
    return best, log_rows


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------

def hmm_to_json(trained: TrainedHmm) -> dict:
    model = trained.model
    return {
        "h_net": nnet.mlp_to_json(model.h_net),
        "A": model.A.tolist(),
        "pi": model.pi.tolist(),
        "means": model.means.tolist(),
        "vars": model.vars.tolist(),
        "C": model.C,
        "restart_seed": trained.restart_seed,
        "final_loglik": trained.final_loglik,
    }


def hmm_from_json(blob: dict) -> TrainedHmm:
    h_net = nnet.mlp_from_json(blob["h_net"])
    means = np.asarray(blob["means"], dtype=np.float64)
    model = HmmModel(
        n=means.shape[1], C=int(blob["C"]), h_net=h_net,
        A=np.asarray(blob["A"], dtype=np.float64),
        pi=np.asarray(blob["pi"], dtype=np.float64),
        means=means, vars=np.asarray(blob["vars"], dtype=np.float64),
    )
    model.validate()
    return TrainedHmm(model=model, restart_seed=int(blob["restart_seed"]),
                      final_loglik=float(blob["final_loglik"]))


def save_hmm(path, trained: TrainedHmm) -> None:
    Path(path).write_text(json.dumps(hmm_to_json(trained)))


def load_hmm(path) -> TrainedHmm:
    return hmm_from_json(json.loads(Path(path).read_text()))


def save_em_log(path, rows) -> None:
    """Fixed-schema CSV of the EM trace: restart, iter, loglik, Q,
    accepted_net_step."""
    fields = ["restart", "iter", "loglik", "Q", "accepted_net_step"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
