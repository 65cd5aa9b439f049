"""Ground-truth generators: modulated innovations, random NVAR mixers, rollouts.

Conventions
-----------
Time series arrays are (N, n): rows indexed by time, columns by component,
matching the on-disk CSV layout. Modulation trajectories follow the
component-major (n, N) layout of ModulationParams.

The innovation model is conditionally Gaussian: for modulation values
(lambda1, lambda2) at a time point, each component is drawn from
Normal(mean=-lambda2/2, var=1/(2*lambda1)) — the density whose unnormalized
log is -lambda1*s^2 - lambda1*lambda2*s, by completing the square. lambda1
is produced in [e^-2, e^2] (exponentiated Fourier curve), lambda2 in [-2, 2].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnet

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
FOURIER_WEIGHT_RANGE = (-1.0, 1.0)
NVAR_LEAK = 0.5
NVAR_FEEDBACK_GAIN = 0.8
INVERTIBILITY_PROBES = 100
INVERTIBILITY_MIN_DET = 1e-8
INVERTIBILITY_MAX_TRIES = 50


child_seed = nnet.seed_from


# ----------------------------------------------------------------------
# Modulations (auxiliary-variable-dependent innovation parameters)
# ----------------------------------------------------------------------

@dataclass
class ModulationParams:
    """Per-component modulation trajectories lambda_{ij}(u), order k=2.

    lambda1: (n, N) strictly positive, controls precision (var = 1/(2*lambda1)).
    lambda2: (n, N) in [-2, 2], controls mean (mean = -lambda2/2).
    u: length-N auxiliary labels (time index here). m: auxiliary dimension.
    """

    n: int
    lambda1: np.ndarray
    lambda2: np.ndarray
    u: np.ndarray
    k: int = 2
    m: int = 1
    recipe: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.lambda1.shape != self.lambda2.shape or self.lambda1.shape[0] != self.n:
            raise ValueError("lambda trajectories must both be (n, N)")
        if not np.all(self.lambda1 > 0.0):
            raise ValueError("lambda1 must be strictly positive everywhere")
        if np.min(self.lambda2) < -2.0 - 1e-12 or np.max(self.lambda2) > 2.0 + 1e-12:
            raise ValueError("lambda2 must lie in [-2, 2]")


def fourier_curve(weights: np.ndarray, N: int, exponentiate: bool = False) -> np.ndarray:
    """Weighted sin/cos combination over [0, 2π), affinely rescaled to [-2, 2].

    ``weights`` has shape (2, num_freq): row 0 multiplies sin(f*tau), row 1
    cos(f*tau), for frequencies f = 1..num_freq on tau = 2π*t/N. A constant
    raw curve (e.g. all-zero weights) is the defined degenerate case: all
    zeros, or all ones when exponentiated.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != 2 or weights.shape[1] < 1:
        raise ValueError(f"weights must be (2, num_freq), got {weights.shape}")
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    tau = 2.0 * np.pi * np.arange(N) / N
    raw = np.zeros(N)
    for f in range(1, weights.shape[1] + 1):
        raw += weights[0, f - 1] * np.sin(f * tau)
        raw += weights[1, f - 1] * np.cos(f * tau)
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        curve = np.zeros(N)
    else:
        curve = -2.0 + 4.0 * (raw - lo) / (hi - lo)
    return np.exp(curve) if exponentiate else curve


def fourier_modulation(num_freq: int, N: int, seed: int, exponentiate: bool = False) -> np.ndarray:
    """Random-weight Fourier curve: weights i.i.d. uniform on (-1, 1)."""
    if num_freq < 1:
        raise ValueError(f"num_freq must be >= 1, got {num_freq}")
    rng = np.random.default_rng(seed)
    weights = rng.uniform(*FOURIER_WEIGHT_RANGE, size=(2, num_freq))
    return fourier_curve(weights, N, exponentiate=exponentiate)


def make_modulations(n: int, N: int, num_freq: int, seed: int) -> ModulationParams:
    """Independent Fourier modulations per component: lambda1 exponentiated
    (range [e^-2, e^2]), lambda2 raw (range [-2, 2]). u is the time index."""
    lambda1 = np.empty((n, N))
    lambda2 = np.empty((n, N))
    for i in range(n):
        lambda1[i] = fourier_modulation(num_freq, N, child_seed(seed, 2 * i), exponentiate=True)
        lambda2[i] = fourier_modulation(num_freq, N, child_seed(seed, 2 * i + 1))
    mod = ModulationParams(
        n=n,
        lambda1=lambda1,
        lambda2=lambda2,
        u=np.arange(N),
        recipe={
            "n": n,
            "N": N,
            "num_freq": num_freq,
            "seed": int(seed),
            "weight_dist": f"uniform{FOURIER_WEIGHT_RANGE}",
        },
    )
    mod.validate()
    return mod


def modulation_mean_std(mod: ModulationParams):
    """Conditional mean (-lambda2/2) and std (1/sqrt(2*lambda1)), both (n, N)."""
    return -mod.lambda2 / 2.0, 1.0 / np.sqrt(2.0 * mod.lambda1)


def sample_nonstationary_innovations(mod: ModulationParams, seed: int) -> np.ndarray:
    """Draw s (N, n): s_i(t) ~ Normal(-lambda2_i(t)/2, 1/(2*lambda1_i(t))),
    independent across components and time."""
    mod.validate()
    mean, std = modulation_mean_std(mod)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal(size=(mod.lambda1.shape[1], mod.n))
    return mean.T + std.T * draws


# ----------------------------------------------------------------------
# Hidden-Markov innovations
# ----------------------------------------------------------------------

@dataclass
class HmmGroundTruth:
    """Ground-truth hidden-Markov innovation process."""

    C: int
    A: np.ndarray
    pi: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    states: np.ndarray

    def validate(self) -> None:
        if self.A.shape != (self.C, self.C):
            raise ValueError("A must be C x C")
        if np.max(np.abs(self.A.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows of A must sum to 1")
        if not np.all(self.vars > 0.0):
            raise ValueError("state variances must be strictly positive")


def cyclic_transition_matrix(C: int, stay: float = 0.99) -> np.ndarray:
    """Stay with probability ``stay``, otherwise advance to the next state."""
    A = np.eye(C) * stay
    for i in range(C):
        A[i, (i + 1) % C] += 1.0 - stay
    return A


def sample_hmm_states(C: int, N: int, A: np.ndarray, pi: np.ndarray, seed: int) -> np.ndarray:
    """Markov-chain path: u_0 ~ pi, u_{t+1} ~ A[u_t, :]."""
    A = np.asarray(A, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(A < 0.0) or np.max(np.abs(A.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("A must be row-stochastic")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(A, axis=1)
    uniforms = rng.random(N)
    states = np.empty(N, dtype=np.int64)
    states[0] = np.searchsorted(np.cumsum(pi), uniforms[0], side="right")
    for t in range(1, N):
        states[t] = np.searchsorted(cum[states[t - 1]], uniforms[t], side="right")
    return np.minimum(states, C - 1)


def make_hmm_ground_truth(n: int, C: int, N: int, seed: int,
                          mean_range: float = 4.0, min_mean_gap: float = 0.5) -> HmmGroundTruth:
    """Cyclic-chain ground truth with distinctive per-state Gaussians.

    Means uniform on [-mean_range, mean_range], variances log-uniform on
    [0.25, 4]; mean draws are rejected until every pair of state mean vectors
    is at least ``min_mean_gap`` apart in the max norm.
    """
    rng = np.random.default_rng(child_seed(seed, 0))
    for _ in range(1000):
        means = rng.uniform(-mean_range, mean_range, size=(C, n))
        gaps = np.abs(means[:, None, :] - means[None, :, :]).max(axis=2)
        gaps[np.diag_indices(C)] = np.inf
        if gaps.min() >= min_mean_gap:
            break
    else:
        raise RuntimeError("could not draw distinctive state means in 1000 tries")
    variances = np.exp(rng.uniform(np.log(0.25), np.log(4.0), size=(C, n)))
    A = cyclic_transition_matrix(C)
    pi = np.full(C, 1.0 / C)
    states = sample_hmm_states(C, N, A, pi, child_seed(seed, 1))
    truth = HmmGroundTruth(C=C, A=A, pi=pi, means=means, vars=variances, states=states)
    truth.validate()
    return truth


def sample_hmm_innovations(truth: HmmGroundTruth, seed: int) -> np.ndarray:
    """Draw s (N, n): s_t ~ Normal(means[u_t], diag vars[u_t])."""
    truth.validate()
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal(size=(truth.states.size, truth.means.shape[1]))
    return truth.means[truth.states] + np.sqrt(truth.vars[truth.states]) * draws


# ----------------------------------------------------------------------
# NVAR mixing model and rollout
# ----------------------------------------------------------------------

@dataclass
class NvarModel:
    """Random invertible NVAR mixer x_t = f(x_{t-1}, s_t).

    ``net`` maps the width-2n concatenation [x_{t-1}; s_t] through a 2n->n
    affine layer and then L-1 leaky-ReLU n->n layers (last linear). The
    innovation block of the input occupies columns n..2n-1.
    """

    n: int
    L: int
    net: nnet.MlpParams

    @property
    def innovation_columns(self) -> np.ndarray:
        return np.arange(self.n, 2 * self.n)


def innovation_jacobian_determinant(model: NvarModel, x_prev: np.ndarray, s: np.ndarray) -> float:
    """det of the n x n block d f / d s_t at one point."""
    point = np.concatenate([x_prev, s])
    jac = nnet.input_jacobian(model.net, point, columns=model.innovation_columns)
    return float(np.linalg.det(jac))


def _random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def build_nvar_mlp(n: int, L: int, seed: int) -> NvarModel:
    """Random NVAR mixer certified invertible in the innovation block.

    Construction keeps the rollout stable and the innovation-block Jacobian
    well conditioned at any depth, while leaving x_t genuinely dependent on
    x_{t-1}. Every n x n layer after the first is a pure random rotation, so
    composed with leaky-ReLU slopes (<= 1) the feedback path
    x_{t-1} -> x_t never expands beyond the sub-unit gain put on the x
    columns of the first layer. The leaky slopes drift log|det d f / d s_t|
    downward by (ln leak)/2 per hidden unit on average; that is cancelled by
    scaling the s columns (which sit outside the feedback loop) up by
    (1/leak)^((L-1)/2). The gain/leak values balance the two pathways so the
    s-column boost stays small and the history carries a comparable share of
    the response. Certification stays empirical: |det d f / d s_t| > 1e-8 at
    100 seeded probe points, retrying with fresh derived seeds up to 50
    times.
    """
    if n < 1 or L < 1:
        raise ValueError(f"need n >= 1 and L >= 1, got n={n}, L={L}")
    s_scale = (1.0 / NVAR_LEAK) ** ((L - 1) / 2.0)
    tried = []
    for attempt in range(INVERTIBILITY_MAX_TRIES):
        init_seed = child_seed(seed, attempt)
        tried.append(init_seed)
        net = nnet.mlp_init([2 * n] + [n] * L, "leaky_relu", seed=init_seed, leak=NVAR_LEAK)
        ortho_rng = np.random.default_rng(child_seed(seed, attempt, 2))
        net.weights[0][:, n:] = s_scale * _random_orthogonal(n, ortho_rng)
        net.weights[0][:, :n] = NVAR_FEEDBACK_GAIN * _random_orthogonal(n, ortho_rng)
        for l in range(1, net.num_layers):
            net.weights[l] = _random_orthogonal(n, ortho_rng)
        model = NvarModel(n=n, L=L, net=net)
        probe_rng = np.random.default_rng(child_seed(seed, attempt, 1))
        points = probe_rng.standard_normal(size=(INVERTIBILITY_PROBES, 2 * n))
        dets = [innovation_jacobian_determinant(model, p[:n], p[n:]) for p in points]
        if np.min(np.abs(dets)) > INVERTIBILITY_MIN_DET:
            return model
    raise RuntimeError(
        f"no invertible NVAR model found in {INVERTIBILITY_MAX_TRIES} tries "
        f"(seeds tried: {tried})"
    )


def generate_series(model: NvarModel, s: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """Roll out x_t = f(x_{t-1}, s_t) for t = 0..N-1, starting from x0
    (defaults to the zero vector). Aborts on non-finite values."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != model.n:
        raise ValueError(f"s must be (N, {model.n}), got {s.shape}")
    x_prev = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    if x_prev.shape != (model.n,):
        raise ValueError(f"x0 must have length {model.n}")
    net = model.net
    num_layers = net.num_layers
    x = np.empty_like(s)
    for t in range(s.shape[0]):
        v = np.concatenate([x_prev, s[t]])
        for l in range(num_layers):
            v = net.weights[l] @ v + net.biases[l]
            if l < num_layers - 1:
                v = np.where(v >= 0.0, v, net.leak * v)
        if not np.all(np.isfinite(v)):
            raise RuntimeError(f"rollout diverged (non-finite x) at t={t}")
        x[t] = v
        x_prev = v
    return x


def segment_labels(N: int, num_segments: int) -> np.ndarray:
    """Contiguous equal blocks; the last block absorbs the remainder."""
    if not 1 <= num_segments <= N:
        raise ValueError(f"need 1 <= num_segments <= N, got {num_segments}, N={N}")
    size = N // num_segments
    return np.minimum(np.arange(N) // size, num_segments - 1).astype(np.int64)


# ----------------------------------------------------------------------
# Dataset bundles on disk
# ----------------------------------------------------------------------

def _write_csv(path: Path, array: np.ndarray, header: str, fmt: str = "%.17g") -> None:
    np.savetxt(path, array, delimiter=",", header=header, comments="", fmt=fmt)


def generate_dataset(n: int, L: int, N: int, seed: int, kind: str = "nonstationary",
                     num_freq: int = 64, C: int | None = None) -> dict:
    """Build a full synthetic dataset in memory.

    kind = "nonstationary": Fourier-modulated conditionally Gaussian
    innovations, u = time index. kind = "hmm": hidden-Markov innovations
    (cyclic chain, C states, default 2n+1), u = true state path.

    Returns a dict with keys x, s, u, model, x0, truth (JSON-ready metadata).
    """
    model = build_nvar_mlp(n, L, child_seed(seed, 10))
    x0 = np.zeros(n)
    truth: dict = {
        "generator_version": GENERATOR_VERSION,
        "kind": kind,
        "seed": int(seed),
        "n": n,
        "L": L,
        "N": N,
        "model": {"n": n, "L": L, "net": nnet.mlp_to_json(model.net)},
        "x0": x0.tolist(),
    }
    if kind == "nonstationary":
        mod = make_modulations(n, N, num_freq, child_seed(seed, 11))
        s = sample_nonstationary_innovations(mod, child_seed(seed, 12))
        u = mod.u
        truth["modulation"] = mod.recipe
    elif kind == "hmm":
        if C is None:
            C = 2 * n + 1
        hmm_truth = make_hmm_ground_truth(n, C, N, child_seed(seed, 13))
        s = sample_hmm_innovations(hmm_truth, child_seed(seed, 14))
        u = hmm_truth.states
        truth["hmm_truth"] = {
            "C": C,
            "A": hmm_truth.A.tolist(),
            "pi": hmm_truth.pi.tolist(),
            "means": hmm_truth.means.tolist(),
            "vars": hmm_truth.vars.tolist(),
        }
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    x = generate_series(model, s, x0)
    return {"x": x, "s": s, "u": np.asarray(u), "model": model, "x0": x0, "truth": truth}


def save_bundle(dataset: dict, out_dir) -> Path:
    """Write x.csv, s.csv, u.csv, truth.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = dataset["x"].shape[1]
    _write_csv(out / "x.csv", dataset["x"], ",".join(f"x{i+1}" for i in range(n)))
    _write_csv(out / "s.csv", dataset["s"], ",".join(f"s{i+1}" for i in range(n)))
    u = np.asarray(dataset["u"]).reshape(-1)
    t_and_label = np.column_stack([np.arange(u.size), u])
    _write_csv(out / "u.csv", t_and_label, "t,label", fmt="%d")
    (out / "truth.json").write_text(json.dumps(dataset["truth"], indent=1))
    return out


def load_bundle(bundle_dir) -> dict:
    """Read a dataset bundle back; s.csv may be absent (real-data mode)."""
    bundle = Path(bundle_dir)
    x = np.loadtxt(bundle / "x.csv", delimiter=",", skiprows=1, ndmin=2)
    s = None
    if (bundle / "s.csv").exists():
        s = np.loadtxt(bundle / "s.csv", delimiter=",", skiprows=1, ndmin=2)
    u = None
    if (bundle / "u.csv").exists():
        u = np.loadtxt(bundle / "u.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1].astype(np.int64)
    truth = None
    model = None
    x0 = None
    truth_path = bundle / "truth.json"
    if truth_path.exists():
        truth = json.loads(truth_path.read_text())
        blob = truth.get("model")
        if blob is not None:
            model = NvarModel(n=int(blob["n"]), L=int(blob["L"]), net=nnet.mlp_from_json(blob["net"]))
        if truth.get("x0") is not None:
            x0 = np.asarray(truth["x0"], dtype=np.float64)
    return {"x": x, "s": s, "u": u, "truth": truth, "model": model, "x0": x0}
