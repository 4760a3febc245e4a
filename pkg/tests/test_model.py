import numpy as np
import pytest

from voxmix import losses
from voxmix.model import ForwardTrace, LatentVec, Network, NetworkConfig
from voxmix.nn import ParamStore

CFG = NetworkConfig(vox_dim=16, image_size=32, image_channels=(4, 4, 8, 8),
                    prior_channels=(4, 4, 8), decoder_channels=(8, 8, 4),
                    latent_width=32, variant="prior")
CFG_NO_PRIOR = NetworkConfig(vox_dim=16, image_size=32,
                             image_channels=(4, 4, 8, 8),
                             prior_channels=(4, 4, 8),
                             decoder_channels=(8, 8, 4),
                             latent_width=32, variant="no_prior")


def make(cfg=CFG, seed=0):
    net = Network(cfg)
    store = net.init_params(np.random.Generator(np.random.PCG64(seed)))
    return net, store


def batch(n=3, seed=1, cfg=CFG):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 2, cfg.image_size, cfg.image_size)).astype(np.float32)
    priors = (rng.random((n, 1) + (cfg.vox_dim,) * 3) < 0.4).astype(np.float32)
    volumes = (rng.random((n, 1) + (cfg.vox_dim,) * 3) < 0.4).astype(np.float32)
    return images, priors, volumes


def test_forward_shapes_and_open_interval():
    net, store = make()
    images, priors, _ = batch()
    trace = net.forward(images, priors, store)
    assert trace.prediction.shape == (3, 16, 16, 16)
    assert trace.prediction.min() > 0.0 and trace.prediction.max() < 1.0
    assert trace.e_image.shape == trace.e_aux.shape == trace.e_fused.shape \
        == (3, 32)


def test_forward_is_pure():
    net, store = make()
    images, priors, _ = batch()
    a = net.forward(images, priors, store)
    b = net.forward(images, priors, store)
    assert a.prediction.tobytes() == b.prediction.tobytes()
    assert a.e_fused.tobytes() == b.e_fused.tobytes()


def test_prior_sensitivity_of_fused_latent():
    # Central-difference sensitivity of the fused latent to the prior
    # input, probed over a handful of voxels with the image fixed.
    net, store = make()
    images, priors, _ = batch(n=1)
    rng = np.random.default_rng(8)
    step = 1e-2
    best = 0.0
    for _ in range(10):
        x, y, z = rng.integers(2, 14, size=3)
        hi = priors.copy()
        hi[0, 0, x, y, z] += step
        lo = priors.copy()
        lo[0, 0, x, y, z] -= step
        delta = net.forward(images, hi, store).e_fused \
            - net.forward(images, lo, store).e_fused
        best = max(best, float(np.abs(delta).max() / (2 * step)))
    assert best > 0.0


def test_resolution_mismatch_rejected():
    net, store = make()
    images, priors, _ = batch()
    with pytest.raises(ValueError):
        net.forward(images[:, :, :16, :16], priors, store)
    with pytest.raises(ValueError):
        net.forward(images, priors[:, :, :8, :8, :8], store)


def test_encode_gt_deterministic_and_distinct():
    net, store = make()
    rng = np.random.default_rng(3)
    volumes = (rng.random((2, 1, 16, 16, 16)) < 0.4).astype(np.float32)
    a = net.encode_gt(volumes, store)
    b = net.encode_gt(volumes, store)
    assert a.tobytes() == b.tobytes()
    sim = losses.cosine_similarity(a[0], a[1])
    assert sim[0] < 1.0


def test_no_prior_variant_contract():
    net, store = make(CFG_NO_PRIOR)
    images, priors, _ = batch(cfg=CFG_NO_PRIOR)
    trace = net.forward_no_prior(images, store)
    assert trace.prediction.shape == (3, 16, 16, 16)
    assert trace.prediction.min() > 0.0 and trace.prediction.max() < 1.0
    # No prior-encoder tensors exist; the pooled projection replaces them.
    assert not any(name.startswith("prior_encoder.") for name in store.params)
    assert any(name.startswith("pool_proj.") for name in store.params)
    with pytest.raises(ValueError):
        net.forward(images, priors, store)


def test_forward_no_prior_rejected_on_prior_network():
    net, store = make()
    images, _, _ = batch()
    with pytest.raises(ValueError, match="no_prior"):
        net.forward_no_prior(images, store)


def test_variant_store_mismatch_detected():
    net_prior, store_prior = make()
    net_np = Network(CFG_NO_PRIOR)
    with pytest.raises(ValueError, match="variant"):
        net_np.check_store(store_prior)


def test_gradient_reaches_every_parameter():
    net, store = make(seed=5)
    images, priors, volumes = batch(seed=6)
    lcfg = losses.LossConfig()
    _, _, e_fused = net.encode(images, priors, store)
    pred = net.decode(e_fused, store)
    targets = volumes[:, 0]
    vol_lat = net.encode_gt(volumes, store)
    neg = np.array([1, 2, 0])
    d_pred = lcfg.w_recon * losses.bce_loss_grad(pred, targets)
    d_fused, d_pos, d_neg = losses.align_loss_grads(
        e_fused, vol_lat, vol_lat[neg], lcfg.margin)
    d_vol = lcfg.w_align * d_pos
    np.add.at(d_vol, neg, lcfg.w_align * d_neg)
    store.zero_grads()
    net.backward(d_pred, store, d_fused_extra=lcfg.w_align * d_fused)
    net.encode_gt_backward(d_vol, store)
    for name, grad in store.grads.items():
        assert np.any(grad != 0.0), f"no gradient reached {name}"


def test_corrupted_prior_is_pure_input_substitution():
    net, store = make()
    images, priors, _ = batch()
    wrong = np.roll(priors, 1, axis=0)
    correct = net.forward(images, priors, store)
    corrupted = net.forward(images, wrong, store)
    assert corrupted.prediction.shape == correct.prediction.shape
    assert not np.array_equal(corrupted.e_fused, correct.e_fused)


def test_latent_vec_rejects_non_finite():
    with pytest.raises(ValueError):
        LatentVec(np.array([1.0, np.nan]), "fused")


def test_trace_is_plain_data():
    trace = ForwardTrace(np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)),
                         np.full((1, 2, 2, 2), 0.5))
    assert trace.prediction.shape == (1, 2, 2, 2)


def test_network_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(vox_dim=12)  # not divisible by the conv strides
    with pytest.raises(ValueError):
        NetworkConfig(variant="maybe_prior")
