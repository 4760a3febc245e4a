import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxmix import losses
from voxmix.voxel import VoxelGrid


def unit_vectors_with_cosine(target):
    """Two unit vectors whose cosine similarity is exactly `target`."""
    a = np.zeros(8)
    a[0] = 1.0
    b = np.zeros(8)
    b[0] = target
    b[1] = math.sqrt(1.0 - target * target)
    return a, b


# ---------------------------------------------------------------------------
# bce
# ---------------------------------------------------------------------------

def test_bce_half_prediction_is_ln2():
    pred = np.full((4, 4, 4), 0.5)
    target = (np.arange(64).reshape(4, 4, 4) % 2).astype(np.float64)
    assert losses.bce_loss(pred, target) == pytest.approx(math.log(2), abs=1e-9)


def test_bce_soft_target_binary_entropy():
    pred = np.full((4, 4, 4), 0.3)
    target = np.full((4, 4, 4), 0.3)
    expected = -(0.3 * math.log(0.3) + 0.7 * math.log(0.7))
    assert losses.bce_loss(pred, target) == pytest.approx(expected, abs=1e-9)


def test_bce_at_binary_target_is_near_zero():
    target = (np.random.default_rng(0).random((4, 4, 4)) < 0.4).astype(float)
    value = losses.bce_loss(target, target)
    assert 0.0 <= value <= 1e-6


def test_bce_accepts_voxel_grids():
    pred = VoxelGrid(2, np.full((2, 2, 2), 0.5))
    target = VoxelGrid(2, np.ones((2, 2, 2)), binary=True)
    assert losses.bce_loss(pred, target) == pytest.approx(math.log(2), abs=1e-9)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        losses.bce_loss(np.zeros((2, 2)), np.zeros((3, 3)))


@given(st.floats(0.05, 0.95))
@settings(max_examples=20, deadline=None)
def test_bce_minimised_at_target(y):
    # Grid search over the prediction: the per-voxel loss is smallest at p=y.
    grid = np.linspace(0.01, 0.99, 99)
    values = [losses.bce_loss(np.full(1, p), np.full(1, y)) for p in grid]
    best = grid[int(np.argmin(values))]
    assert abs(best - y) <= 0.011


# ---------------------------------------------------------------------------
# alignment losses
# ---------------------------------------------------------------------------

def test_align_perfect_positive_is_zero():
    fused = np.zeros(8)
    fused[0] = 2.0  # parallel to the positive, orthogonal to the negative
    pos = np.zeros(8)
    pos[0] = 1.0
    neg = np.zeros(8)
    neg[1] = 1.0
    value, sim_pos, sim_neg = losses.align_loss(fused, pos, neg, margin=0.1)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert sim_pos == pytest.approx(1.0)
    assert sim_neg == pytest.approx(0.0)


def test_align_equal_similarities():
    # sim_pos = sim_neg = 0.5 with margin 0.1: 0.1 + 0.5 = 0.6.
    fused = np.array([1.0, 0.0, 0.0])
    pos = np.array([0.5, math.sqrt(0.75), 0.0])
    neg = np.array([0.5, 0.0, math.sqrt(0.75)])
    value, _, _ = losses.align_loss(fused, pos, neg, margin=0.1)
    assert value == pytest.approx(0.6, abs=1e-9)


def test_align_reference_point_nine_eighty_five():
    fused, pos = unit_vectors_with_cosine(0.9)
    _, neg = unit_vectors_with_cosine(0.85)
    value, sim_pos, sim_neg = losses.align_loss(fused, pos, neg, margin=0.1)
    assert sim_pos == pytest.approx(0.9, abs=1e-12)
    assert sim_neg == pytest.approx(0.85, abs=1e-12)
    assert value == pytest.approx(0.15, abs=1e-9)


def test_align_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        losses.align_loss(np.zeros(4), np.ones(4), np.ones(4))


def test_align_no_triplet_cases():
    v = np.array([0.3, -0.7, 2.0])
    assert losses.align_loss_no_triplet(v, 2.5 * v) == pytest.approx(0.0, abs=1e-12)
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    assert losses.align_loss_no_triplet(a, b) == pytest.approx(1.0)
    assert losses.align_loss_no_triplet(a, -a) == pytest.approx(2.0)


def test_align_batch_reduction_is_mean():
    fused = np.stack([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    pos = np.stack([np.array([1.0, 0.0]), np.array([1.0, 0.0])])
    neg = np.stack([np.array([0.0, 1.0]), np.array([0.0, 1.0])])
    value, sim_pos, sim_neg = losses.align_loss(fused, pos, neg, margin=0.0)
    # Row 0: aligned, loss 0; row 1: sim_pos 0, sim_neg 1 -> 1 + 1 = 2.
    assert value == pytest.approx(1.0)
    assert sim_pos == pytest.approx(0.5)
    assert sim_neg == pytest.approx(0.5)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_align_nonnegative_and_zero_condition(seed):
    rng = np.random.default_rng(seed)
    fused = rng.standard_normal((3, 6))
    pos = rng.standard_normal((3, 6))
    neg = rng.standard_normal((3, 6))
    margin = float(rng.uniform(0, 1))
    value, sim_pos, sim_neg = losses.align_loss(fused, pos, neg, margin)
    assert value >= -1e-12


def test_align_triplet_mask_disables_hinge():
    fused = np.array([1.0, 0.0])
    pos = np.array([1.0, 0.0])
    neg = np.array([1.0, 0.0])  # worst-case negative
    with_hinge, _, _ = losses.align_loss(fused, pos, neg, margin=0.2)
    masked, _, _ = losses.align_loss(fused, pos, neg, margin=0.2,
                                     triplet_mask=[0.0])
    assert with_hinge == pytest.approx(0.2)
    assert masked == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# focal
# ---------------------------------------------------------------------------

def test_focal_gamma_zero_is_half_bce():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.05, 0.95, (5, 5, 5))
    target = (rng.random((5, 5, 5)) < 0.5).astype(float)
    focal = losses.focal_loss(pred, target, gamma=0.0, balance=0.5)
    assert focal == pytest.approx(0.5 * losses.bce_loss(pred, target), abs=1e-12)


def test_focal_at_target_is_near_zero():
    target = (np.random.default_rng(2).random((4, 4, 4)) < 0.4).astype(float)
    assert losses.focal_loss(target, target) == pytest.approx(0.0, abs=1e-5)


def test_focal_single_voxel_reference_value():
    value = losses.focal_loss(np.full(1, 0.5), np.ones(1), gamma=2.0,
                              balance=0.5)
    assert value == pytest.approx(0.5 * 0.25 * math.log(2), abs=1e-9)


def test_focal_balance_weights_occupied_term():
    pred = np.full(1, 0.5)
    hot = losses.focal_loss(pred, np.ones(1), gamma=0.0, balance=0.9)
    cold = losses.focal_loss(pred, np.zeros(1), gamma=0.0, balance=0.9)
    assert hot == pytest.approx(0.9 * math.log(2), abs=1e-12)
    assert cold == pytest.approx(0.1 * math.log(2), abs=1e-12)


# ---------------------------------------------------------------------------
# combined
# ---------------------------------------------------------------------------

def test_combined_reference_value():
    cfg = losses.LossConfig(w_recon=10.0, w_align=0.5)
    out = losses.combined_loss(0.6931, 0.6, 0.5, 0.5, cfg)
    assert out.total == pytest.approx(7.231, abs=1e-12)


def test_combined_align_ablation_switch():
    cfg = losses.LossConfig(w_recon=10.0, w_align=0.0)
    out = losses.combined_loss(0.25, 123.0, 0.0, 0.0, cfg)
    assert out.total == pytest.approx(2.5)


def test_default_hyperparameters():
    cfg = losses.LossConfig()
    assert cfg.w_recon == 10.0
    assert cfg.w_align == 0.5
    assert cfg.margin == 0.1


def test_loss_config_validation():
    with pytest.raises(ValueError):
        losses.LossConfig(w_recon=-1.0)
    with pytest.raises(ValueError):
        losses.LossConfig(margin=1.5)
    with pytest.raises(ValueError):
        losses.LossConfig(kind="dice")
    with pytest.raises(ValueError):
        losses.LossConfig(focal_balance=1.0)


# ---------------------------------------------------------------------------
# analytic gradients vs finite differences
# ---------------------------------------------------------------------------

def _central_diff(f, x, step=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f()
        flat[k] = orig - step
        lo = f()
        flat[k] = orig
        out[k] = (hi - lo) / (2 * step)
    return grad


def test_bce_grad_matches_fd():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.1, 0.9, (3, 3))
    target = rng.uniform(0, 1, (3, 3))
    fd = _central_diff(lambda: losses.bce_loss(pred, target), pred)
    assert np.allclose(losses.bce_loss_grad(pred, target), fd, atol=1e-7)


def test_focal_grad_matches_fd():
    rng = np.random.default_rng(4)
    pred = rng.uniform(0.1, 0.9, (3, 3))
    target = rng.uniform(0, 1, (3, 3))
    fd = _central_diff(
        lambda: losses.focal_loss(pred, target, 2.0, 0.3), pred)
    analytic = losses.focal_loss_grad(pred, target, 2.0, 0.3)
    assert np.allclose(analytic, fd, atol=1e-7)


def test_align_grads_match_fd():
    rng = np.random.default_rng(5)
    fused = rng.standard_normal((2, 5))
    pos = rng.standard_normal((2, 5))
    neg = rng.standard_normal((2, 5))
    d_f, d_p, d_n = losses.align_loss_grads(fused, pos, neg, 0.3)
    for arr, grad in ((fused, d_f), (pos, d_p), (neg, d_n)):
        fd = _central_diff(
            lambda: losses.align_loss(fused, pos, neg, 0.3)[0], arr)
        assert np.allclose(grad, fd, atol=1e-7)


def test_align_no_triplet_grads_match_fd():
    rng = np.random.default_rng(6)
    fused = rng.standard_normal((2, 5))
    pos = rng.standard_normal((2, 5))
    d_f, d_p = losses.align_loss_no_triplet_grads(fused, pos)
    for arr, grad in ((fused, d_f), (pos, d_p)):
        fd = _central_diff(
            lambda: losses.align_loss_no_triplet(fused, pos), arr)
        assert np.allclose(grad, fd, atol=1e-7)
