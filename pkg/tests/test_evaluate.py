"""Tests for recovery metrics: correlation, matching, MCC, variability, R^2."""

import itertools

import numpy as np
import numpy.testing as npt
import pytest

from iia import evaluate, nnet, simgen


def brute_force_match(corr):
    """Exhaustive search over all permutations; the oracle for match_components."""
    n = corr.shape[0]
    best_perm, best_sum = None, -np.inf
    for perm in itertools.permutations(range(n)):
        total = sum(abs(corr[i, perm[i]]) for i in range(n))
        if total > best_sum:
            best_sum, best_perm = total, perm
    return np.array(best_perm), best_sum


# ----------------------------------------------------------------------
# Correlation
# ----------------------------------------------------------------------

def test_correlation_self_has_unit_diagonal():
    s = np.random.default_rng(0).normal(size=(500, 4))
    corr = evaluate.correlation_matrix(s, s)
    npt.assert_allclose(np.diag(corr), np.ones(4), atol=1e-12)
    npt.assert_allclose(corr, corr.T, atol=1e-12)
    off = corr[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off)) < 0.2


def test_correlation_sign_flip():
    s = np.random.default_rng(1).normal(size=(200, 3))
    corr = evaluate.correlation_matrix(s, -s)
    npt.assert_allclose(np.diag(corr), -np.ones(3), atol=1e-12)


def test_correlation_independent_noise_is_small():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(100_000, 2))
    b = rng.normal(size=(100_000, 2))
    corr = evaluate.correlation_matrix(a, b)
    assert np.max(np.abs(corr)) < 0.02


def test_correlation_constant_series_is_zero():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(50, 2))
    b = rng.normal(size=(50, 2))
    b[:, 1] = 7.0
    corr = evaluate.correlation_matrix(a, b)
    npt.assert_array_equal(corr[:, 1], np.zeros(2))
    assert abs(corr[0, 0]) > 0.0


def test_correlation_rejects_length_mismatch():
    with pytest.raises(ValueError):
        evaluate.correlation_matrix(np.zeros((5, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        evaluate.correlation_matrix(np.zeros((2, 2)), np.zeros((2, 2)))


def test_align_drops_first_true_point():
    s_true = np.arange(10.0).reshape(5, 2)
    s_hat = np.zeros((4, 2))
    aligned = evaluate.align_true_innovations(s_true, s_hat)
    npt.assert_array_equal(aligned, s_true[1:])


# ----------------------------------------------------------------------
# Matching and MCC
# ----------------------------------------------------------------------

def test_match_two_by_two():
    corr = np.array([[0.9, 0.1], [0.2, 0.8]])
    perm = evaluate.match_components(corr)
    npt.assert_array_equal(perm, [0, 1])
    assert evaluate.mcc(corr, perm) == pytest.approx(0.85)


def test_match_anti_diagonal():
    corr = np.fliplr(np.diag([0.9, 0.8, 0.7]))
    perm = evaluate.match_components(corr)
    npt.assert_array_equal(perm, [2, 1, 0])


def test_match_equals_brute_force_on_random_matrices():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = rng.integers(2, 7)
        corr = rng.uniform(-1, 1, size=(n, n))
        perm = evaluate.match_components(corr)
        oracle_perm, oracle_sum = brute_force_match(corr)
        matched = sum(abs(corr[i, perm[i]]) for i in range(n))
        assert matched == pytest.approx(oracle_sum, abs=1e-12)


def test_mcc_perfect_and_flipped():
    s = np.random.default_rng(4).normal(size=(300, 3))
    for est in (s, -s):
        corr = evaluate.correlation_matrix(s, est)
        perm = evaluate.match_components(corr)
        assert evaluate.mcc(corr, perm) == pytest.approx(1.0, abs=1e-12)


def test_mcc_invariances_exact():
    rng = np.random.default_rng(5)
    s_true = rng.normal(size=(400, 4))
    s_hat = s_true + 0.3 * rng.normal(size=(400, 4))

    def score(est):
        corr = evaluate.correlation_matrix(s_true, est)
        return evaluate.mcc(corr, evaluate.match_components(corr))

    base = score(s_hat)
    perm = [2, 0, 3, 1]
    assert score(s_hat[:, perm]) == base
    signs = np.array([1.0, -1.0, -1.0, 1.0])
    assert score(s_hat * signs) == base
    pow2 = np.array([0.5, 4.0, -8.0, 0.25])
    assert score(s_hat * pow2) == base
    scales = np.array([0.1, 3.0, -7.5, 0.004])
    offsets = np.array([5.0, -2.0, 0.0, 100.0])
    assert score(s_hat * scales + offsets) == pytest.approx(base, abs=1e-12)


def test_mcc_rejects_non_bijection():
    with pytest.raises(ValueError):
        evaluate.mcc(np.eye(3), np.array([0, 0, 2]))


def test_evaluate_recovery_report():
    rng = np.random.default_rng(6)
    s_true = rng.normal(size=(301, 3))
    s_hat = -s_true[1:][:, [1, 2, 0]] * 2.0
    report = evaluate.evaluate_recovery(s_true, s_hat, metadata={"method": "oracle"})
    assert report.mcc == pytest.approx(1.0, abs=1e-12)
    assert report.mcc_spearman == pytest.approx(1.0, abs=1e-12)
    assert report.metadata["method"] == "oracle"


# ----------------------------------------------------------------------
# Variability check
# ----------------------------------------------------------------------

def test_variability_constant_lambda_fails():
    lam = np.ones((4, 6))
    report = evaluate.variability_check(lam)
    assert report.rank == 0
    assert not report.passed


def test_variability_duplicate_columns_fail():
    rng = np.random.default_rng(7)
    col = rng.normal(size=(4, 1))
    other = rng.normal(size=(4, 1))
    lam = np.hstack([col, other, other, other])
    report = evaluate.variability_check(lam)
    assert report.rank < 4
    assert not report.passed


def test_variability_full_rank_passes():
    rng = np.random.default_rng(8)
    lam = rng.normal(size=(4, 5))
    report = evaluate.variability_check(lam)
    assert report.passed
    assert report.rank == 4
    assert report.smallest_sv > 0.0


def test_variability_fourier_modulations_pass_over_seeds():
    passes = 0
    for seed in range(100):
        mod = simgen.make_modulations(n=3, N=512, num_freq=64, seed=seed)
        report = evaluate.modulation_variability(mod, seed=seed + 1000)
        passes += int(report.passed)
    assert passes >= 99


# ----------------------------------------------------------------------
# Forward-model fit
# ----------------------------------------------------------------------

def test_forward_model_true_innovations_linear_case():
    dataset = simgen.generate_dataset(n=2, L=1, N=4096, seed=9)
    cfg = nnet.TrainConfig(epochs=40, lr=0.2, seed=0)
    _, r2 = evaluate.fit_forward_model(dataset["x"], dataset["s"], cfg, hidden_layers=0)
    assert np.all(r2 > 0.999)


def test_forward_model_noise_scores_below_true():
    dataset = simgen.generate_dataset(n=2, L=1, N=4096, seed=10)
    cfg = nnet.TrainConfig(epochs=40, lr=0.2, seed=0)
    _, r2_true = evaluate.fit_forward_model(dataset["x"], dataset["s"], cfg, hidden_layers=0)
    noise = np.random.default_rng(0).normal(size=dataset["s"].shape)
    _, r2_noise = evaluate.fit_forward_model(dataset["x"], noise, cfg, hidden_layers=0)
    assert r2_true.mean() - r2_noise.mean() > 0.3


def test_forward_model_zero_epochs_is_zero_predictor():
    dataset = simgen.generate_dataset(n=2, L=1, N=512, seed=11)
    cfg = nnet.TrainConfig(epochs=0, seed=0)
    net, r2 = evaluate.fit_forward_model(dataset["x"], dataset["s"], cfg)
    pred, _ = nnet.mlp_forward(net, np.random.default_rng(1).normal(size=(5, 4)))
    npt.assert_array_equal(pred, np.zeros((5, 2)))
    x = dataset["x"]
    inputs = np.hstack([x[:-1], dataset["s"][1:]])
    split = max(1, int(round(inputs.shape[0] * 0.9)))
    held = x[1:][split:]
    expected = 1.0 - (held**2).sum(axis=0) / ((held - held.mean(axis=0)) ** 2).sum(axis=0)
    npt.assert_allclose(r2, expected, atol=1e-12)
