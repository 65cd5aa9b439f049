"""Self-supervised innovation estimators.

Two estimators share the feature extractor h(x_t, x_prev) whose outputs are
the innovation estimates:

* GCL: binary logistic regression that discriminates real triples
  (x_t, x_prev, u_t) from copies whose u column was permuted across time.
  The regression function pairs fixed sufficient statistics psi(y) = (y^2, y)
  of the h outputs with trainable Fourier-basis functions of u.
* TCL: multinomial logistic regression that classifies which time segment a
  pair (x_t, x_prev) came from, again through psi of the h outputs.

Setting ``nica=True`` drops the x_prev pathway entirely (h reads x_t only,
no phi terms), which turns either estimator into its instantaneous-ICA
ablation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import nnet
from .nnet import TrainConfig
from .nnet import seed_from as child_seed

log = logging.getLogger(__name__)

NUM_PSI = 2  # fixed sufficient statistics per component: y^2 and y


# ----------------------------------------------------------------------
# Dataset construction
# ----------------------------------------------------------------------

@dataclass
class ContrastiveDataset:
    """Real triples (label 1) followed by u-permuted copies (label 0)."""

    x_t: np.ndarray      # (2M, n)
    x_prev: np.ndarray   # (2M, order*n)
    u: np.ndarray        # (2M,)
    labels: np.ndarray   # (2M,) int, 1 = real
    t_index: np.ndarray  # (2M,) time index of the x pair, for time-based splits
    n: int
    order: int
    u_period: float

    @property
    def num_rows(self) -> int:
        return self.labels.shape[0]


def lagged_pairs(x: np.ndarray, order: int = 1):
    """Stack (x_t, [x_{t-1} .. x_{t-order}]) rows for t = order .. N-1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be (N, n)")
    N = x.shape[0]
    if order < 1 or order > 3:
        raise ValueError("order must be 1, 2, or 3")
    if N < order + 1:
        raise ValueError(f"need at least {order + 1} points, got {N}")
    x_t = x[order:]
    x_prev = np.hstack([x[order - lag : N - lag] for lag in range(1, order + 1)])
    return x_t, x_prev


def build_contrastive_dataset(x: np.ndarray, u: np.ndarray, seed: int,
                              order: int = 1) -> ContrastiveDataset:
    """Pair each real triple with one copy whose u comes from a random
    non-identity permutation of the u column."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).ravel()
    N = x.shape[0]
    if u.shape[0] != N:
        raise ValueError(f"u has {u.shape[0]} entries for {N} time points")
    if N < order + 2:
        raise ValueError(f"need at least {order + 2} points, got {N}")

    x_t, x_prev = lagged_pairs(x, order)
    M = x_t.shape[0]
    u_real = u[order:]
    t_index = np.arange(order, N)

    perm = None
    for attempt in range(100):
        rng = np.random.default_rng(child_seed(seed, 1, attempt))
        candidate = rng.permutation(M)
        if not np.array_equal(candidate, np.arange(M)):
            perm = candidate
            break
    if perm is None:
        raise RuntimeError("could not draw a non-identity permutation")

    return ContrastiveDataset(
        x_t=np.vstack([x_t, x_t]),
        x_prev=np.vstack([x_prev, x_prev]),
        u=np.concatenate([u_real, u_real[perm]]),
        labels=np.concatenate([np.ones(M, dtype=np.int64),
                               np.zeros(M, dtype=np.int64)]),
        t_index=np.concatenate([t_index, t_index]),
        n=x.shape[1],
        order=order,
        u_period=float(N),
    )


def fourier_features(u: np.ndarray, period: float, num_freq: int) -> np.ndarray:
    """Columns [1, sin(f*theta), cos(f*theta)] for f = 1..num_freq,
    theta = 2*pi*u/period. Shape (len(u), 2*num_freq + 1)."""
    theta = 2.0 * np.pi * np.asarray(u, dtype=np.float64).ravel() / period
    cols = [np.ones_like(theta)]
    for f in range(1, num_freq + 1):
        cols.append(np.sin(f * theta))
        cols.append(np.cos(f * theta))
    return np.column_stack(cols)


def psi_stats(y: np.ndarray) -> np.ndarray:
    """Fixed sufficient statistics (y^2, y), shape (B, n, 2)."""
    return np.stack([y**2, y], axis=2)


# ----------------------------------------------------------------------
# Model types
# ----------------------------------------------------------------------

def _feature_dims(n: int, order: int, num_layers: int, nica: bool):
    in_width = n if nica else (order + 1) * n
    if num_layers == 1:
        return [in_width, n]
    return [in_width] + [4 * n] * (num_layers - 1) + [n]


def _phi_dims(n: int, order: int, num_layers: int):
    in_width = order * n
    if num_layers == 1:
        return [in_width, n]
    return [in_width] + [4 * n] * (num_layers - 1) + [n]


@dataclass
class GclModel:
    """Feature nets plus the trainable pieces of the logistic regression."""

    n: int
    order: int
    num_freq: int
    u_period: float
    nica: bool
    h_net: nnet.MlpParams
    phi_net: nnet.MlpParams | None
    mu_weights: np.ndarray       # (n, 2, 2F+1)
    phi_mu_weights: np.ndarray | None
    alpha_weights: np.ndarray    # (2F+1,)
    beta_weights: np.ndarray     # (n,)
    gamma_weights: np.ndarray | None
    x_mean: np.ndarray
    x_std: np.ndarray


@dataclass
class TclModel:
    """Feature nets plus per-class combination weights of the softmax."""

    n: int
    order: int
    T: int
    nica: bool
    h_net: nnet.MlpParams
    phi_net: nnet.MlpParams | None
    w: np.ndarray                # (T, n, 2)
    v: np.ndarray | None         # (T, n, 2)
    b: np.ndarray                # (T,)
    x_mean: np.ndarray
    x_std: np.ndarray


@dataclass
class GclConfig:
    num_layers: int = 1
    num_freq: int = 64
    order: int = 1
    nica: bool = False
    val_frac: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class TclConfig:
    num_layers: int = 1
    order: int = 1
    nica: bool = False
    # Optional overrides for the h network; the defaults follow num_layers
    # (maxout with 4n-wide hidden layers). Downstream consumers that keep
    # the trained h net, such as the EM initializer, set these to match
    # their own architecture.
    h_dims: list[int] | None = None
    h_activation: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)


def init_gcl_model(n: int, config: GclConfig, u_period: float) -> GclModel:
    """Random feature nets; every coefficient that feeds r starts at zero,
    so the initial regression output is exactly 0 (posterior 1/2)."""
    F = config.num_freq
    h_net = nnet.mlp_init(_feature_dims(n, config.order, config.num_layers, config.nica),
                          "maxout" if config.num_layers > 1 else "leaky_relu",
                          seed=child_seed(config.train.seed, 101))
    phi_net = None
    phi_mu = None
    gamma = None
    if not config.nica:
        phi_net = nnet.mlp_init(_phi_dims(n, config.order, config.num_layers),
                                "maxout" if config.num_layers > 1 else "leaky_relu",
                                seed=child_seed(config.train.seed, 102))
        phi_mu = np.zeros((n, NUM_PSI, 2 * F + 1))
        gamma = np.zeros(n)
    return GclModel(
        n=n, order=config.order, num_freq=F, u_period=u_period, nica=config.nica,
        h_net=h_net, phi_net=phi_net,
        mu_weights=np.zeros((n, NUM_PSI, 2 * F + 1)),
        phi_mu_weights=phi_mu,
        alpha_weights=np.zeros(2 * F + 1),
        beta_weights=np.zeros(n),
        gamma_weights=gamma,
        x_mean=np.zeros(n), x_std=np.ones(n),
    )


def init_tcl_model(n: int, T: int, config: TclConfig) -> TclModel:
    """Random feature nets; class weights and biases start at zero, so the
    initial posterior is exactly uniform."""
    h_dims = config.h_dims or _feature_dims(n, config.order, config.num_layers, config.nica)
    expected_in = n if config.nica else (config.order + 1) * n
    if h_dims[0] != expected_in or h_dims[-1] != n:
        raise ValueError(f"h_dims must map {expected_in} -> {n}, got {h_dims}")
    h_act = config.h_activation or ("maxout" if config.num_layers > 1 else "leaky_relu")
    h_net = nnet.mlp_init(h_dims, h_act, seed=child_seed(config.train.seed, 101))
    phi_net = None
    v = None
    if not config.nica:
        phi_net = nnet.mlp_init(_phi_dims(n, config.order, config.num_layers),
                                "maxout" if config.num_layers > 1 else "leaky_relu",
                                seed=child_seed(config.train.seed, 102))
        v = np.zeros((T, n, NUM_PSI))
    return TclModel(
        n=n, order=config.order, T=T, nica=config.nica,
        h_net=h_net, phi_net=phi_net,
        w=np.zeros((T, n, NUM_PSI)), v=v, b=np.zeros(T),
        x_mean=np.zeros(n), x_std=np.ones(n),
    )


def _scale_inputs(model, x_t: np.ndarray, x_prev: np.ndarray):
    """Apply the stored per-component scaler to x_t and each lag block."""
    x_t = (x_t - model.x_mean) / model.x_std
    if x_prev is not None and x_prev.size:
        tiled_mean = np.tile(model.x_mean, x_prev.shape[1] // model.n)
        tiled_std = np.tile(model.x_std, x_prev.shape[1] // model.n)
        x_prev = (x_prev - tiled_mean) / tiled_std
    return x_t, x_prev


def _h_inputs(model, x_t: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    if model.nica:
        return x_t
    return np.hstack([x_t, x_prev])


# ----------------------------------------------------------------------
# GCL regression function and loss
# ----------------------------------------------------------------------

def gcl_regression(model: GclModel, x_t: np.ndarray, x_prev: np.ndarray,
                   u: np.ndarray):
    """Regression function r of the logistic discriminator.

    r = sum_ij psi_ij(h_i) mu_ij(u) + sum_ij psi_ij(phi_i) mu^phi_ij(u)
        + alpha(u) + sum_i beta_i h_i^2 + sum_i gamma_i phi_i^2

    Returns (r, cache) with everything the backward pass needs.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
    if x_t.shape[1] != model.n:
        raise ValueError(f"x_t width {x_t.shape[1]} != n={model.n}")
    if not model.nica and x_prev.shape[1] != model.order * model.n:
        raise ValueError(f"x_prev width {x_prev.shape[1]} != order*n="
                         f"{model.order * model.n}")
    x_t, x_prev = _scale_inputs(model, x_t, x_prev)

    h, h_cache = nnet.mlp_forward(model.h_net, _h_inputs(model, x_t, x_prev))
    psi_h = psi_stats(h)
    basis = fourier_features(u, model.u_period, model.num_freq)

    mu_of_u = np.einsum("ijf,bf->bij", model.mu_weights, basis)
    r = np.einsum("bij,bij->b", psi_h, mu_of_u)
    r += basis @ model.alpha_weights
    r += (h**2) @ model.beta_weights

    cache = {"h": h, "h_cache": h_cache, "psi_h": psi_h, "basis": basis,
             "mu_of_u": mu_of_u}
    if not model.nica:
        phi, phi_cache = nnet.mlp_forward(model.phi_net, x_prev)
        psi_phi = psi_stats(phi)
        phi_mu_of_u = np.einsum("ijf,bf->bij", model.phi_mu_weights, basis)
        r += np.einsum("bij,bij->b", psi_phi, phi_mu_of_u)
        r += (phi**2) @ model.gamma_weights
        cache.update({"phi": phi, "phi_cache": phi_cache, "psi_phi": psi_phi,
                      "phi_mu_of_u": phi_mu_of_u})
    return r, cache


def gcl_loss_and_grads(model: GclModel, x_t: np.ndarray, x_prev: np.ndarray,
                       u: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy of logistic(r) against labels, with
    gradients for every trainable array."""
    labels = np.asarray(labels, dtype=np.float64).ravel()
    r, cache = gcl_regression(model, x_t, x_prev, u)
    B = r.shape[0]
    loss = float(np.mean(np.logaddexp(0.0, r) - labels * r))
    dr = (expit(r) - labels) / B

    h, psi_h, basis = cache["h"], cache["psi_h"], cache["basis"]
    mu_of_u = cache["mu_of_u"]
    grads = {
        "mu_weights": np.einsum("b,bij,bf->ijf", dr, psi_h, basis),
        "alpha_weights": basis.T @ dr,
        "beta_weights": (h**2).T @ dr,
    }
    upstream_h = dr[:, None] * (2.0 * h * mu_of_u[:, :, 0] + mu_of_u[:, :, 1]
                                + 2.0 * h * model.beta_weights)
    grads["h"], _ = nnet.mlp_backward(model.h_net, cache["h_cache"], upstream_h)

    if not model.nica:
        phi, psi_phi = cache["phi"], cache["psi_phi"]
        phi_mu_of_u = cache["phi_mu_of_u"]
        grads["phi_mu_weights"] = np.einsum("b,bij,bf->ijf", dr, psi_phi, basis)
        grads["gamma_weights"] = (phi**2).T @ dr
        upstream_phi = dr[:, None] * (2.0 * phi * phi_mu_of_u[:, :, 0]
                                      + phi_mu_of_u[:, :, 1]
                                      + 2.0 * phi * model.gamma_weights)
        grads["phi"], _ = nnet.mlp_backward(model.phi_net, cache["phi_cache"],
                                            upstream_phi)
    return loss, grads


# ----------------------------------------------------------------------
# TCL posterior and loss
# ----------------------------------------------------------------------

def tcl_logits(model: TclModel, x_t: np.ndarray, x_prev: np.ndarray):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
    if x_t.shape[1] != model.n:
        raise ValueError(f"x_t width {x_t.shape[1]} != n={model.n}")
    if not model.nica and x_prev.shape[1] != model.order * model.n:
        raise ValueError(f"x_prev width {x_prev.shape[1]} != order*n="
                         f"{model.order * model.n}")
    x_t, x_prev = _scale_inputs(model, x_t, x_prev)

    h, h_cache = nnet.mlp_forward(model.h_net, _h_inputs(model, x_t, x_prev))
    psi_h = psi_stats(h)
    logits = np.einsum("lij,bij->bl", model.w, psi_h) + model.b
    cache = {"h": h, "h_cache": h_cache, "psi_h": psi_h}
    if not model.nica:
        phi, phi_cache = nnet.mlp_forward(model.phi_net, x_prev)
        psi_phi = psi_stats(phi)
        logits += np.einsum("lij,bij->bl", model.v, psi_phi)
        cache.update({"phi": phi, "phi_cache": phi_cache, "psi_phi": psi_phi})
    return logits, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def tcl_posterior(model: TclModel, x_t: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    """Class posterior over the T segments, rows summing to 1."""
    logits, _ = tcl_logits(model, x_t, x_prev)
    return _softmax(logits)


def tcl_loss_and_grads(model: TclModel, x_t: np.ndarray, x_prev: np.ndarray,
                       labels: np.ndarray):
    """Mean multiclass cross-entropy with stable log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    logits, cache = tcl_logits(model, x_t, x_prev)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(B), labels]))

    probs = _softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B

    h, psi_h = cache["h"], cache["psi_h"]
    grads = {"w": np.einsum("bl,bij->lij", dlogits, psi_h),
             "b": dlogits.sum(axis=0)}
    coeff_h = np.einsum("bl,lij->bij", dlogits, model.w)
    upstream_h = 2.0 * h * coeff_h[:, :, 0] + coeff_h[:, :, 1]
    grads["h"], _ = nnet.mlp_backward(model.h_net, cache["h_cache"], upstream_h)

    if not model.nica:
        phi, psi_phi = cache["phi"], cache["psi_phi"]
        grads["v"] = np.einsum("bl,bij->lij", dlogits, psi_phi)
        coeff_phi = np.einsum("bl,lij->bij", dlogits, model.v)
        upstream_phi = 2.0 * phi * coeff_phi[:, :, 0] + coeff_phi[:, :, 1]
        grads["phi"], _ = nnet.mlp_backward(model.phi_net, cache["phi_cache"],
                                            upstream_phi)
    return loss, grads


# ----------------------------------------------------------------------
# Parameter vectors (for gradient checking)
# ----------------------------------------------------------------------

def _coef_names(model) -> list[str]:
    if isinstance(model, GclModel):
        names = ["mu_weights", "alpha_weights", "beta_weights"]
        if not model.nica:
            names += ["phi_mu_weights", "gamma_weights"]
        return names
    names = ["w", "b"]
    if not model.nica:
        names.append("v")
    return names


def param_vector(model) -> np.ndarray:
    pieces = [nnet.mlp_param_vector(model.h_net)]
    if model.phi_net is not None:
        pieces.append(nnet.mlp_param_vector(model.phi_net))
    pieces += [getattr(model, name).ravel() for name in _coef_names(model)]
    return np.concatenate(pieces)


def set_param_vector(model, vector: np.ndarray) -> None:
    offset = nnet.mlp_param_vector(model.h_net).size
    nnet.mlp_set_param_vector(model.h_net, vector[:offset])
    if model.phi_net is not None:
        size = nnet.mlp_param_vector(model.phi_net).size
        nnet.mlp_set_param_vector(model.phi_net, vector[offset : offset + size])
        offset += size
    for name in _coef_names(model):
        arr = getattr(model, name)
        setattr(model, name, vector[offset : offset + arr.size].reshape(arr.shape).copy())
        offset += arr.size
    if offset != vector.size:
        raise ValueError(f"vector has {vector.size} entries, model needs {offset}")


def grad_vector(model, grads: dict) -> np.ndarray:
    pieces = [nnet.flatten_params(grads["h"][0] + grads["h"][1])]
    if model.phi_net is not None:
        pieces.append(nnet.flatten_params(grads["phi"][0] + grads["phi"][1]))
    pieces += [grads[name].ravel() for name in _coef_names(model)]
    return np.concatenate(pieces)


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

class _CoefOpt:
    """Momentum state for the plain coefficient arrays of a model."""

    def __init__(self, model, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.vel = {name: np.zeros_like(getattr(model, name))
                    for name in _coef_names(model)}

    def step(self, model, grads: dict) -> None:
        for name in self.vel:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise nnet.DivergenceError("non-finite gradient; aborting the step")
            self.vel[name] = self.momentum * self.vel[name] + g
            setattr(model, name, getattr(model, name) - self.lr * self.vel[name])


def _fit_scaler(model, x_t: np.ndarray) -> None:
    model.x_mean = x_t.mean(axis=0)
    std = x_t.std(axis=0)
    model.x_std = np.where(std < 1e-12, 1.0, std)


def _model_opts(model, cfg: TrainConfig):
    opts = [nnet.OptState.for_params(model.h_net, cfg.lr, cfg.momentum)]
    if model.phi_net is not None:
        opts.append(nnet.OptState.for_params(model.phi_net, cfg.lr, cfg.momentum))
    coef = _CoefOpt(model, cfg.lr, cfg.momentum)
    return opts, coef


def _apply_grads(model, grads: dict, opts, coef) -> None:
    nnet.sgd_momentum_step(model.h_net, grads["h"], opts[0])
    if model.phi_net is not None:
        nnet.sgd_momentum_step(model.phi_net, grads["phi"], opts[1])
    coef.step(model, grads)


def _decay(opts, coef, factor: float) -> None:
    for o in opts:
        o.lr *= factor
    coef.lr *= factor


def _copy_gcl(model: GclModel) -> GclModel:
    return GclModel(
        n=model.n, order=model.order, num_freq=model.num_freq,
        u_period=model.u_period, nica=model.nica,
        h_net=model.h_net.copy(),
        phi_net=None if model.phi_net is None else model.phi_net.copy(),
        mu_weights=model.mu_weights.copy(),
        phi_mu_weights=None if model.phi_mu_weights is None else model.phi_mu_weights.copy(),
        alpha_weights=model.alpha_weights.copy(),
        beta_weights=model.beta_weights.copy(),
        gamma_weights=None if model.gamma_weights is None else model.gamma_weights.copy(),
        x_mean=model.x_mean.copy(), x_std=model.x_std.copy(),
    )


def train_gcl(dataset: ContrastiveDataset, config: GclConfig | None = None):
    """Minibatch SGD with momentum on the logistic loss.

    A seeded uniform val_frac of triples (held out from both label blocks,
    so classes stay balanced) serves as validation; the returned model is
    the best-validation-loss snapshot. Returns (model, history) with
    history rows {epoch, train_loss, val_loss}.
    """
    config = config or GclConfig()
    cfg = config.train
    model = init_gcl_model(dataset.n, config, dataset.u_period)
    _fit_scaler(model, dataset.x_t)

    # Validation must cover the whole u range: u is time here, so holding out
    # a chronological tail would leave the Fourier terms unconstrained on it
    # and make the validation loss meaningless. Hold out a seeded uniform
    # draw of triples instead, the same triples in both label blocks.
    M = dataset.num_rows // 2
    num_val = int(config.val_frac * M)
    split_rng = np.random.default_rng(child_seed(cfg.seed, 3))
    val_triples = split_rng.choice(M, size=num_val, replace=False)
    val_mask = np.zeros(dataset.num_rows, dtype=bool)
    val_mask[val_triples] = True
    val_mask[val_triples + M] = True
    train_idx = np.flatnonzero(~val_mask)
    val_idx = np.flatnonzero(val_mask)

    def split_loss(idx):
        loss, _ = gcl_loss_and_grads(model, dataset.x_t[idx], dataset.x_prev[idx],
                                     dataset.u[idx], dataset.labels[idx])
        return loss

    opts, coef = _model_opts(model, cfg)
    shuffle_rng = np.random.default_rng(child_seed(cfg.seed, 2))
    history = []
    best = (np.inf, _copy_gcl(model))
    for epoch in range(cfg.epochs):
        sched = shuffle_rng.permutation(train_idx)
        for start in range(0, sched.size, cfg.batch):
            idx = sched[start : start + cfg.batch]
            loss, grads = gcl_loss_and_grads(model, dataset.x_t[idx],
                                             dataset.x_prev[idx],
                                             dataset.u[idx], dataset.labels[idx])
            if not np.isfinite(loss):
                log.error("GCL diverged at epoch %d (loss=%r)", epoch, loss)
                raise nnet.DivergenceError(f"GCL loss diverged at epoch {epoch}")
            _apply_grads(model, grads, opts, coef)
        train_loss = split_loss(train_idx)
        val_loss = split_loss(val_idx) if val_idx.size else train_loss
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss})
        if val_loss < best[0]:
            best = (val_loss, _copy_gcl(model))
        _decay(opts, coef, cfg.lr_decay)
    return best[1], history


def train_tcl(x: np.ndarray, labels: np.ndarray, config: TclConfig | None = None):
    """Minibatch SGD with momentum on the softmax cross-entropy.

    Trains on all (x_t, x_prev, labels[t]) triples and reports the final
    train accuracy. Returns (model, history, accuracy) with history rows
    {epoch, train_loss, accuracy}.
    """
    config = config or TclConfig()
    cfg = config.train
    labels = np.asarray(labels, dtype=np.int64).ravel()
    x = np.asarray(x, dtype=np.float64)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("labels length must match x")
    x_t, x_prev = lagged_pairs(x, config.order)
    y = labels[config.order:]
    T = int(y.max()) + 1
    counts = np.bincount(y, minlength=T)
    if np.any(counts == 0):
        raise ValueError(f"classes with zero samples: {np.flatnonzero(counts == 0).tolist()}")

    model = init_tcl_model(x.shape[1], T, config)
    _fit_scaler(model, x_t)
    opts, coef = _model_opts(model, cfg)
    shuffle_rng = np.random.default_rng(child_seed(cfg.seed, 2))
    history = []

    def full_metrics():
        logits, _ = tcl_logits(model, x_t, x_prev)
        B = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(log_norm - shifted[np.arange(B), y]))
        acc = float(np.mean(logits.argmax(axis=1) == y))
        return loss, acc

    accuracy = 1.0 / T
    for epoch in range(cfg.epochs):
        sched = shuffle_rng.permutation(x_t.shape[0])
        for start in range(0, sched.size, cfg.batch):
            idx = sched[start : start + cfg.batch]
            loss, grads = tcl_loss_and_grads(model, x_t[idx], x_prev[idx], y[idx])
            if not np.isfinite(loss):
                log.error("TCL diverged at epoch %d (loss=%r)", epoch, loss)
                raise nnet.DivergenceError(f"TCL loss diverged at epoch {epoch}")
            _apply_grads(model, grads, opts, coef)
        train_loss, accuracy = full_metrics()
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "accuracy": accuracy})
        _decay(opts, coef, cfg.lr_decay)
    return model, history, accuracy


# ----------------------------------------------------------------------
# Extraction
# ----------------------------------------------------------------------

def extract_innovations(model, x: np.ndarray) -> np.ndarray:
    """Innovation estimates s_hat[t] = h(x_t, x_prev) for t = order..N-1.

    Accepts a trained GclModel/TclModel (stored scaler applied) or a bare
    MlpParams h network (no scaling; the input width decides whether it reads
    x_t alone or lagged pairs).
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, nnet.MlpParams):
        n = x.shape[1]
        width = model.layer_dims[0]
        if width == n:
            return nnet.mlp_forward(model, x[1:])[0]
        if width % n != 0 or width // n - 1 not in (1, 2, 3):
            raise ValueError(f"h input width {width} incompatible with n={n}")
        order = width // n - 1
        x_t, x_prev = lagged_pairs(x, order)
        return nnet.mlp_forward(model, np.hstack([x_t, x_prev]))[0]

    x_t, x_prev = lagged_pairs(x, model.order)
    x_t, x_prev = _scale_inputs(model, x_t, x_prev)
    return nnet.mlp_forward(model.h_net, _h_inputs(model, x_t, x_prev))[0]


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------

def _opt_array(a):
    return None if a is None else np.asarray(a).tolist()


def model_to_json(model) -> dict:
    if isinstance(model, GclModel):
        return {
            "kind": "gcl", "n": model.n, "order": model.order,
            "num_freq": model.num_freq, "u_period": model.u_period,
            "nica": model.nica,
            "h_net": nnet.mlp_to_json(model.h_net),
            "phi_net": None if model.phi_net is None else nnet.mlp_to_json(model.phi_net),
            "mu_weights": model.mu_weights.tolist(),
            "phi_mu_weights": _opt_array(model.phi_mu_weights),
            "alpha_weights": model.alpha_weights.tolist(),
            "beta_weights": model.beta_weights.tolist(),
            "gamma_weights": _opt_array(model.gamma_weights),
            "x_mean": model.x_mean.tolist(), "x_std": model.x_std.tolist(),
        }
    if isinstance(model, TclModel):
        return {
            "kind": "tcl", "n": model.n, "order": model.order, "T": model.T,
            "nica": model.nica,
            "h_net": nnet.mlp_to_json(model.h_net),
            "phi_net": None if model.phi_net is None else nnet.mlp_to_json(model.phi_net),
            "w": model.w.tolist(), "v": _opt_array(model.v),
            "b": model.b.tolist(),
            "x_mean": model.x_mean.tolist(), "x_std": model.x_std.tolist(),
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_json(blob: dict):
    kind = blob.get("kind")
    if kind == "gcl":
        return GclModel(
            n=blob["n"], order=blob["order"], num_freq=blob["num_freq"],
            u_period=blob["u_period"], nica=blob["nica"],
            h_net=nnet.mlp_from_json(blob["h_net"]),
            phi_net=None if blob["phi_net"] is None else nnet.mlp_from_json(blob["phi_net"]),
            mu_weights=np.asarray(blob["mu_weights"], dtype=np.float64),
            phi_mu_weights=None if blob["phi_mu_weights"] is None
            else np.asarray(blob["phi_mu_weights"], dtype=np.float64),
            alpha_weights=np.asarray(blob["alpha_weights"], dtype=np.float64),
            beta_weights=np.asarray(blob["beta_weights"], dtype=np.float64),
            gamma_weights=None if blob["gamma_weights"] is None
            else np.asarray(blob["gamma_weights"], dtype=np.float64),
            x_mean=np.asarray(blob["x_mean"], dtype=np.float64),
            x_std=np.asarray(blob["x_std"], dtype=np.float64),
        )
    if kind == "tcl":
        return TclModel(
            n=blob["n"], order=blob["order"], T=blob["T"], nica=blob["nica"],
            h_net=nnet.mlp_from_json(blob["h_net"]),
            phi_net=None if blob["phi_net"] is None else nnet.mlp_from_json(blob["phi_net"]),
            w=np.asarray(blob["w"], dtype=np.float64),
            v=None if blob["v"] is None else np.asarray(blob["v"], dtype=np.float64),
            b=np.asarray(blob["b"], dtype=np.float64),
            x_mean=np.asarray(blob["x_mean"], dtype=np.float64),
            x_std=np.asarray(blob["x_std"], dtype=np.float64),
        )
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model)))


def load_model(path):
    return model_from_json(json.loads(Path(path).read_text()))


def save_history(history: list[dict], path) -> None:
    """Training log as CSV; columns are the union of row keys."""
    if not history:
        Path(path).write_text("")
        return
    cols = list(history[0].keys())
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(f"{row[c]:.10g}" if isinstance(row[c], float)
                              else str(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
