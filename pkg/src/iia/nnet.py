"""Dense MLP kernel: forward, reverse-mode gradients, input Jacobians, SGD.

Everything else in the package trains through this module. It deliberately
supports only what the estimators need: fully connected layers, a fixed menu
of activations (linear, leaky ReLU, a smooth leaky ReLU, two-group maxout),
classical momentum SGD, and a central finite-difference gradient checker.
All arithmetic is float64.

Public API
----------
MlpParams, OptState, Batch, DivergenceError
mlp_init, mlp_forward, mlp_backward, input_jacobian
sgd_momentum_step, grad_check
flatten_params, unflatten_params, mlp_to_json, mlp_from_json
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("linear", "leaky_relu", "smooth_leaky_relu", "maxout")

MAXOUT_GROUPS = 2


class DivergenceError(RuntimeError):
    """Raised when training produces NaN/Inf losses or gradients."""


@dataclass
class MlpParams:
    """Weights and biases of a dense MLP.

    ``weights[l]`` has shape (layer_dims[l+1], layer_dims[l]); for maxout
    hidden layers the rows double to 2*layer_dims[l+1] (two affine groups,
    group g in rows [g*out, (g+1)*out)). The last layer is always linear
    with the standard shape. ``leak`` is the slope coefficient a of
    leaky_relu / smooth_leaky_relu, required in (0, 1).
    """

    layer_dims: list[int]
    activation: str
    leak: float = 0.2
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def copy(self) -> "MlpParams":
        return MlpParams(
            layer_dims=list(self.layer_dims),
            activation=self.activation,
            leak=self.leak,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class Batch:
    """A dense minibatch: inputs B x d_in plus optional targets/labels."""

    inputs: np.ndarray
    targets: np.ndarray | None = None


@dataclass
class OptState:
    """Classical-momentum SGD state: per-parameter velocity buffers."""

    lr: float
    momentum: float
    vel_weights: list[np.ndarray] = field(default_factory=list)
    vel_biases: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float, momentum: float) -> "OptState":
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if lr < 0.0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        return cls(
            lr=lr,
            momentum=momentum,
            vel_weights=[np.zeros_like(w) for w in params.weights],
            vel_biases=[np.zeros_like(b) for b in params.biases],
        )


def _is_maxout_layer(params: MlpParams, layer: int) -> bool:
    # Maxout applies to hidden layers only; the last layer stays linear.
    return params.activation == "maxout" and layer < params.num_layers - 1


def _has_activation(params: MlpParams, layer: int) -> bool:
    return layer < params.num_layers - 1 and params.activation != "linear"


def mlp_init(layer_dims, activation: str, seed: int, leak: float = 0.2) -> MlpParams:
    """Random MLP: weights i.i.d. uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    biases zero. Deterministic in seed."""
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output width")
    if any(d < 1 for d in layer_dims):
        raise ValueError(f"all layer widths must be >= 1, got {layer_dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    if activation in ("leaky_relu", "smooth_leaky_relu") and not 0.0 < leak < 1.0:
        raise ValueError(f"leak coefficient must be in (0, 1), got {leak}")
    rng = np.random.default_rng(seed)
    params = MlpParams(layer_dims=layer_dims, activation=activation, leak=leak)
    num_layers = len(layer_dims) - 1
    for l in range(num_layers):
        fan_in, out = layer_dims[l], layer_dims[l + 1]
        rows = out * MAXOUT_GROUPS if (activation == "maxout" and l < num_layers - 1) else out
        bound = 1.0 / np.sqrt(fan_in)
        params.weights.append(rng.uniform(-bound, bound, size=(rows, fan_in)))
        params.biases.append(np.zeros(rows))
    return params


def _act_forward(z: np.ndarray, kind: str, leak: float):
    """Apply an activation to pre-activations z (B x rows).

    Returns (post, aux) where aux is whatever backward needs: the active-group
    index for maxout, None otherwise (derivatives recompute from z).
    """
    if kind == "linear":
        return z, None
    if kind == "leaky_relu":
        return np.where(z >= 0.0, z, leak * z), None
    if kind == "smooth_leaky_relu":
        # a*z + (1-a)*log(1+e^z), computed stably via logaddexp.
        return leak * z + (1.0 - leak) * np.logaddexp(0.0, z), None
    if kind == "maxout":
        batch, rows = z.shape
        out = rows // MAXOUT_GROUPS
        stacked = z.reshape(batch, MAXOUT_GROUPS, out)
        active = np.argmax(stacked, axis=1)  # first group wins ties
        post = np.take_along_axis(stacked, active[:, None, :], axis=1)[:, 0, :]
        return post, active
    raise ValueError(f"unknown activation {kind!r}")


def _act_derivative(z: np.ndarray, kind: str, leak: float) -> np.ndarray:
    """Elementwise derivative for non-maxout activations (right derivative at kinks)."""
    if kind == "linear":
        return np.ones_like(z)
    if kind == "leaky_relu":
        return np.where(z >= 0.0, 1.0, leak)
    if kind == "smooth_leaky_relu":
        return leak + (1.0 - leak) * expit(z)
    raise ValueError(f"no elementwise derivative for activation {kind!r}")


def mlp_forward(params: MlpParams, inputs: np.ndarray):
    """Run the net on a batch. Returns (outputs B x d_out, cache for backward)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != params.layer_dims[0]:
        raise ValueError(
            f"input width {inputs.shape[1]} != expected {params.layer_dims[0]}"
        )
    a = inputs
    cache = []
    for l in range(params.num_layers):
        z = a @ params.weights[l].T + params.biases[l]
        if l == params.num_layers - 1:
            post, aux = z, None
        elif params.activation == "maxout":
            post, aux = _act_forward(z, "maxout", params.leak)
        else:
            post, aux = _act_forward(z, params.activation, params.leak)
        cache.append({"input": a, "pre": z, "aux": aux})
        a = post
    return a, cache


def mlp_backward(params: MlpParams, cache, upstream: np.ndarray):
    """Reverse-mode gradients of sum_b <upstream[b], output[b]>.

    Returns ((weight_grads, bias_grads), input_grads).
    """
    delta = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if delta.shape != (cache[-1]["pre"].shape[0], params.layer_dims[-1]):
        raise ValueError(
            f"upstream shape {delta.shape} does not match output "
            f"({cache[-1]['pre'].shape[0]}, {params.layer_dims[-1]})"
        )
    weight_grads = [None] * params.num_layers
    bias_grads = [None] * params.num_layers
    for l in range(params.num_layers - 1, -1, -1):
        layer = cache[l]
        if l == params.num_layers - 1 or params.activation == "linear":
            dz = delta
        elif params.activation == "maxout":
            batch, rows = layer["pre"].shape
            out = rows // MAXOUT_GROUPS
            dz_stacked = np.zeros((batch, MAXOUT_GROUPS, out))
            np.put_along_axis(dz_stacked, layer["aux"][:, None, :], delta[:, None, :], axis=1)
            dz = dz_stacked.reshape(batch, rows)
        else:
            dz = delta * _act_derivative(layer["pre"], params.activation, params.leak)
        weight_grads[l] = dz.T @ layer["input"]
        bias_grads[l] = dz.sum(axis=0)
        delta = dz @ params.weights[l]
    return (weight_grads, bias_grads), delta


def layer_input_jacobians(params: MlpParams, point: np.ndarray):
    """Per-layer Jacobian factors at one input point, outermost last.

    The full input Jacobian is the left-to-right product factors[-1] @ ... @
    factors[0]. Shared by input_jacobian and the log-det gradient.
    """
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    _, cache = mlp_forward(params, point)
    factors = []
    for l in range(params.num_layers):
        w = params.weights[l]
        if l == params.num_layers - 1 or params.activation == "linear":
            factors.append(w)
        elif params.activation == "maxout":
            rows = cache[l]["pre"].shape[1]
            out = rows // MAXOUT_GROUPS
            active = cache[l]["aux"][0]
            factors.append(w[active * out + np.arange(out), :])
        else:
            d = _act_derivative(cache[l]["pre"][0], params.activation, params.leak)
            factors.append(d[:, None] * w)
    return factors


def input_jacobian(params: MlpParams, point: np.ndarray, columns=None) -> np.ndarray:
    """Exact Jacobian d output / d input at one point, restricted to ``columns``.

    Piecewise-linear activations (leaky ReLU, maxout) use the right-derivative
    convention at kinks: slope 1 at z = 0, first group wins maxout ties.
    """
    factors = layer_input_jacobians(params, point)
    jac = factors[0] if columns is None else factors[0][:, np.asarray(columns, dtype=int)]
    for factor in factors[1:]:
        jac = factor @ jac
    return jac


def sgd_momentum_step(params: MlpParams, grads, opt: OptState) -> None:
    """Classical momentum update, in place: v <- mu*v + g; theta <- theta - lr*v."""
    weight_grads, bias_grads = grads
    for g in list(weight_grads) + list(bias_grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; aborting the step")
    for l in range(params.num_layers):
        opt.vel_weights[l] = opt.momentum * opt.vel_weights[l] + weight_grads[l]
        opt.vel_biases[l] = opt.momentum * opt.vel_biases[l] + bias_grads[l]
        params.weights[l] -= opt.lr * opt.vel_weights[l]
        params.biases[l] -= opt.lr * opt.vel_biases[l]


def flatten_params(arrays) -> np.ndarray:
    """Concatenate a list of arrays into one float64 vector."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten_params(vector: np.ndarray, templates) -> list[np.ndarray]:
    """Inverse of flatten_params given template arrays for shapes."""
    out = []
    offset = 0
    for t in templates:
        size = t.size
        out.append(vector[offset : offset + size].reshape(t.shape).copy())
        offset += size
    if offset != vector.size:
        raise ValueError(f"vector has {vector.size} entries, templates need {offset}")
    return out


def mlp_param_vector(params: MlpParams) -> np.ndarray:
    return flatten_params(params.weights + params.biases)


def mlp_set_param_vector(params: MlpParams, vector: np.ndarray) -> None:
    arrays = unflatten_params(vector, params.weights + params.biases)
    n = params.num_layers
    params.weights = arrays[:n]
    params.biases = arrays[n:]


def grad_check(loss_closure, theta0: np.ndarray, eps: float = 1e-5,
               max_checks: int = 10_000, seed: int = 0) -> float:
    """Compare the closure's analytic gradient against central differences.

    ``loss_closure(theta) -> (loss, grad)`` must be deterministic in theta.
    Checks every coordinate, or a seeded subsample above ``max_checks``.
    Returns the max of |ga - gfd| / max(1, |ga|, |gfd|) over checked
    coordinates (relative above unit scale, absolute below it).
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    _, grad = loss_closure(theta0)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta0.shape:
        raise ValueError(f"gradient shape {grad.shape} != theta shape {theta0.shape}")
    if theta0.size > max_checks:
        idx = np.random.default_rng(seed).choice(theta0.size, size=max_checks, replace=False)
    else:
        idx = np.arange(theta0.size)
    worst = 0.0
    for i in idx:
        bumped = theta0.copy()
        bumped[i] = theta0[i] + eps
        up, _ = loss_closure(bumped)
        bumped[i] = theta0[i] - eps
        down, _ = loss_closure(bumped)
        fd = (up - down) / (2.0 * eps)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]), abs(fd))
        worst = max(worst, err)
    return worst


@dataclass
class TrainConfig:
    """Shared minibatch-SGD settings for every trainer in the package."""

    lr: float = 0.1
    momentum: float = 0.9
    batch: int = 256
    epochs: int = 60
    lr_decay: float = 1.0  # multiplicative per-epoch factor
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "batch": self.batch,
            "epochs": self.epochs,
            "lr_decay": self.lr_decay,
            "seed": self.seed,
        }


def train_regression(inputs: np.ndarray, targets: np.ndarray, layer_dims,
                     activation: str, cfg: TrainConfig,
                     zero_last_layer: bool = True):
    """Minibatch MSE regression: fit an MLP to map inputs -> targets.

    The last layer starts at zero when ``zero_last_layer`` (the untrained net
    is the zero predictor, a defined baseline). Returns (params, history)
    where history rows are {"epoch", "train_loss"} with loss = mean squared
    residual over samples and output dimensions.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must have the same number of rows")
    params = mlp_init(layer_dims, activation, seed=seed_from(cfg.seed, 1))
    if zero_last_layer:
        params.weights[-1][:] = 0.0
        params.biases[-1][:] = 0.0
    opt = OptState.for_params(params, lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(seed_from(cfg.seed, 2))
    num = inputs.shape[0]
    out_dim = targets.shape[1]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(num)
        total, seen = 0.0, 0
        for start in range(0, num, cfg.batch):
            sel = order[start : start + cfg.batch]
            xb, yb = inputs[sel], targets[sel]
            pred, cache = mlp_forward(params, xb)
            res = pred - yb
            loss = float(np.mean(res**2))
            if not np.isfinite(loss):
                raise DivergenceError(f"regression loss diverged at epoch {epoch}")
            upstream = 2.0 * res / (sel.size * out_dim)
            grads, _ = mlp_backward(params, cache, upstream)
            sgd_momentum_step(params, grads, opt)
            total += loss * sel.size
            seen += sel.size
        history.append({"epoch": epoch, "train_loss": total / seen})
        opt.lr *= cfg.lr_decay
    return params, history


def seed_from(*keys: int) -> int:
    """Deterministic derived seed from integer keys (shared convention)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def mlp_to_json(params: MlpParams) -> dict:
    """JSON-ready dict; exact float round-trip via Python repr semantics."""
    return {
        "layer_dims": list(params.layer_dims),
        "activation": {"kind": params.activation, "leak": params.leak},
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def mlp_from_json(blob: dict) -> MlpParams:
    params = MlpParams(
        layer_dims=[int(d) for d in blob["layer_dims"]],
        activation=blob["activation"]["kind"],
        leak=float(blob["activation"]["leak"]),
        weights=[np.asarray(w, dtype=np.float64) for w in blob["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in blob["biases"]],
    )
    if params.activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {params.activation!r}")
    return params
