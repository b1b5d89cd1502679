import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvgeoloc.contrastive import (
    DegenerateBatchError, EmbeddingNormError, batch_recall_at1, dcl_loss, dcl_loss_and_grad,
    similarity_matrix,
)
from cvgeoloc.model import ModelConfig, NumericError, init_params
from cvgeoloc.training import AdamState, LodConfig, TrainConfig, adam_step, lr_at


def unit_rows(rng, b, e):
    x = rng.normal(size=(b, e))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def full_mask(b):
    return ~np.eye(b, dtype=bool)


def reference_loss(S, mask, tau, eps):
    """Plain loops over rows and columns, written independently."""
    b = len(S)
    total = 0.0
    for M, K in ((S, mask), (S.T, mask.T)):
        rows = 0.0
        for i in range(b):
            neg = [j for j in range(b) if K[i, j]]
            z = sum(math.exp(M[i, j] / tau) for j in neg)
            tgt = -(1 - eps) * M[i, i] / tau - sum(eps / len(neg) * M[i, j] / tau for j in neg)
            rows += tgt + math.log(z)
        total += rows / b
    return total / 2


# ---------------------------------------------------------------------------
# similarity and loss
# ---------------------------------------------------------------------------

def test_similarity_identity_and_negation():
    eye = np.eye(4)
    assert np.array_equal(similarity_matrix(eye, eye), eye)
    assert np.allclose(np.diagonal(similarity_matrix(-eye, eye)), -1)


def test_similarity_matches_loop():
    rng = np.random.default_rng(0)
    q, r = unit_rows(rng, 5, 7), unit_rows(rng, 5, 7)
    S = similarity_matrix(q, r)
    for i in range(5):
        for j in range(5):
            assert S[i, j] == pytest.approx(float(np.dot(q[i], r[j])), abs=1e-15)
    assert np.all(np.abs(S) <= 1 + 1e-12)


def test_similarity_rejects_non_unit():
    with pytest.raises(EmbeddingNormError):
        similarity_matrix(2 * np.eye(3), np.eye(3))


def test_b2_identity_hand_value():
    assert dcl_loss(np.eye(2), full_mask(2), 1.0, 0.0) == pytest.approx(-1.0, abs=1e-12)


def test_loss_matches_reference_loops():
    rng = np.random.default_rng(1)
    for _ in range(20):
        b = int(rng.integers(2, 9))
        S = similarity_matrix(unit_rows(rng, b, 6), unit_rows(rng, b, 6))
        mask = full_mask(b) & (rng.random((b, b)) < 0.8)
        for i in range(b):
            mask[i, (i + 1) % b] = True
            mask[(i + 1) % b, i] = True
        tau, eps = rng.uniform(0.02, 1.0), rng.uniform(0.0, 0.5)
        assert dcl_loss(S, mask, tau, eps) == pytest.approx(reference_loss(S, mask, tau, eps), rel=1e-12)


def test_eps_zero_is_positive_excluded_infonce():
    rng = np.random.default_rng(2)
    S = rng.uniform(-1, 1, (6, 6))
    tau = 0.1
    expected = 0.0
    for M in (S, S.T):
        for i in range(6):
            others = np.delete(M[i], i)
            expected += (-M[i, i] / tau + np.log(np.exp(others / tau).sum())) / 12
    assert dcl_loss(S, full_mask(6), tau, 0.0) == pytest.approx(expected, rel=1e-12)


def test_degenerate_batch():
    mask = full_mask(3)
    mask[0, :] = False
    with pytest.raises(DegenerateBatchError):
        dcl_loss(np.eye(3), mask, 1.0, 0.1)
    # skipping keeps the remaining rows and all columns that still have negatives
    assert math.isfinite(dcl_loss(np.eye(3), mask, 1.0, 0.1, skip_degenerate=True))


def test_mask_diagonal_rejected():
    with pytest.raises(ValueError):
        dcl_loss(np.eye(2), np.ones((2, 2), bool), 1.0, 0.0)


def test_masking_a_negative_never_increases_partition():
    rng = np.random.default_rng(3)
    S = rng.uniform(-1, 1, (5, 5))
    mask = full_mask(5)
    smaller = mask.copy()
    smaller[0, 3] = smaller[3, 0] = False
    assert dcl_loss(S, smaller, 0.5, 0.0) <= dcl_loss(S, mask, 0.5, 0.0)


def test_mask_removes_exactly_the_dropped_partition_terms():
    rng = np.random.default_rng(4)
    S = rng.uniform(-1, 1, (4, 4))
    tau = 0.3
    mask = full_mask(4)
    drop = mask.copy()
    drop[1, 2] = False
    diff = dcl_loss(S, mask, tau, 0.0) - dcl_loss(S, drop, tau, 0.0)
    row = np.exp(S[1] / tau)
    col = np.exp(S[:, 2] / tau)
    expected = 0.5 * ((np.log(row[[0, 2, 3]].sum()) - np.log(row[[0, 3]].sum())) / 4
                      + (np.log(col[[0, 1, 3]].sum()) - np.log(col[[0, 3]].sum())) / 4)
    assert diff == pytest.approx(expected, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_permutation_equivariance(seed, b):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, (b, b))
    perm = rng.permutation(b)
    a = dcl_loss(S, full_mask(b), 1 / 36, 0.1)
    c = dcl_loss(S[perm][:, perm], full_mask(b), 1 / 36, 0.1)
    assert a == pytest.approx(c, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_decreases_in_the_positive(seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, (4, 4))
    k = int(rng.integers(4))
    up = S.copy()
    up[k, k] += 0.05
    assert dcl_loss(up, full_mask(4), 0.2, 0.1) < dcl_loss(S, full_mask(4), 0.2, 0.1)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    S = rng.uniform(-1, 1, (5, 5))
    mask = full_mask(5)
    mask[0, 2] = mask[3, 1] = False
    _, dS = dcl_loss_and_grad(S, mask, 0.25, 0.1)
    h = 1e-6
    for idx in np.ndindex(5, 5):
        Sp, Sm = S.copy(), S.copy()
        Sp[idx] += h
        Sm[idx] -= h
        num = (dcl_loss(Sp, mask, 0.25, 0.1) - dcl_loss(Sm, mask, 0.25, 0.1)) / (2 * h)
        assert abs(num - dS[idx]) <= 1e-6 * max(abs(num), abs(dS[idx]), 1e-3)


def test_batch_recall():
    S = np.array([[0.9, 0.1], [0.95, 0.5]])
    assert batch_recall_at1(S, full_mask(2)) == 0.5


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def test_lr_schedule_points():
    cfg = TrainConfig(iterations=5000, warmup_iters=250, lr_peak=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(250, cfg) == pytest.approx(1e-3, rel=1e-15)
    assert lr_at(4999, cfg) < 1e-6 * 1e-3
    assert lr_at(125, cfg) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        lr_at(5000, cfg)


def test_lr_continuous_at_junction():
    cfg = TrainConfig(iterations=10_000, warmup_iters=1000, lr_peak=2e-3)
    assert abs(lr_at(1000, cfg) - lr_at(999, cfg)) <= cfg.lr_peak / 1000 + 1e-15
    assert abs(lr_at(1001, cfg) - lr_at(1000, cfg)) < 1e-8
    values = [lr_at(i, cfg) for i in range(1000, 10_000)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_b=1)
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing_eps=1.0)
    with pytest.raises(ValueError):
        TrainConfig(temperature_tau=0.0)
    assert TrainConfig().temperature_tau == 1 / 36


def _params():
    return init_params(ModelConfig(image_size=8, patch_size=4, token_dim=4, heads=2, embed_dim=4, n_lods=1), 0)


def test_adam_zero_grad():
    params = _params()
    before = params.copy()
    state = AdamState()
    grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
    adam_step(params, grads, state, 1e-3)
    m1 = {k: v.copy() for k, v in state.m.items()}
    after_one = params.copy()
    adam_step(params, {k: np.zeros_like(v) for k, v in grads.items()}, state, 0.0)
    assert all(np.array_equal(params[k], after_one[k]) for k in params)
    assert all(np.allclose(state.m[k], 0.9 * m1[k]) for k in m1)
    assert not np.array_equal(after_one["street.wq"], before["street.wq"])


def test_adam_constant_gradient_step_is_lr():
    params = _params()
    state = AdamState()
    g = {k: np.full_like(v, 0.37) for k, v in params.tensors.items()}
    for _ in range(50):
        prev = params["street.wq"].copy()
        adam_step(params, g, state, 1e-2)
        step = prev - params["street.wq"]
    assert np.allclose(step, 1e-2, rtol=1e-6)


def test_adam_matches_scalar_reference():
    params = _params()
    rng = np.random.default_rng(0)
    state = AdamState()
    x0 = float(params["street.bo"][0])
    gs = rng.normal(size=100)
    # scalar reference implementation
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(gs, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 1e-3 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    for g in gs:
        grads = {k: np.zeros_like(val) for k, val in params.tensors.items()}
        grads["street.bo"][0] = g
        adam_step(params, grads, state, 1e-3)
    assert params["street.bo"][0] == pytest.approx(x, abs=1e-12)


def test_adam_rejects_non_finite():
    params = _params()
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    grads["street.wq"][0, 0] = np.nan
    with pytest.raises(NumericError):
        adam_step(params, grads, AdamState(), 1e-3)


def test_lod_config_parse():
    assert LodConfig.parse("4,76.8,32") == LodConfig(4, 76.8, 32)
    assert str(LodConfig(1, 153.6, 64)) == "1,153.6,64"
    with pytest.raises(ValueError):
        LodConfig.parse("4,76.8")
