import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxmix import mixup


def rng_for(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# lambda sampling
# ---------------------------------------------------------------------------

def test_lambda_rejects_bad_alpha():
    with pytest.raises(ValueError):
        mixup.sample_lambda(0.0, rng_for())
    with pytest.raises(ValueError):
        mixup.sample_lambda(-1.0, rng_for())


def test_lambda_uniform_mean():
    rng = rng_for(42)
    draws = np.array([mixup.sample_lambda(1.0, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01


def test_lambda_symmetry():
    rng = rng_for(7)
    draws = np.array([mixup.sample_lambda(0.4, rng) for _ in range(40_000)])
    # Beta(a, a) is symmetric: the empirical CDF of x and 1-x agree.
    grid = np.linspace(0.05, 0.95, 19)
    cdf = np.array([(draws <= q).mean() for q in grid])
    cdf_flipped = np.array([((1 - draws) <= q).mean() for q in grid])
    assert np.max(np.abs(cdf - cdf_flipped)) < 0.02


def test_lambda_variance_matches_closed_form():
    rng = rng_for(11)
    draws = np.array([mixup.sample_lambda(0.2, rng) for _ in range(100_000)])
    expected = 1.0 / (4.0 * (2 * 0.2 + 1))   # Beta(a,a) variance, a=0.2
    assert abs(draws.var() - expected) / expected < 0.05


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def test_endpoints_are_bitwise_exact():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((3, 4)).astype(np.float32)
    assert mixup.mix_arrays(a, b, 0.0).tobytes() == a.tobytes()
    assert mixup.mix_arrays(a, b, 1.0).tobytes() == b.tobytes()


def test_half_mix_of_binary_grids():
    rng = np.random.default_rng(1)
    a = (rng.random((4, 4, 4)) < 0.5).astype(np.float64)
    b = (rng.random((4, 4, 4)) < 0.5).astype(np.float64)
    mixed = mixup.mix_arrays(a, b, 0.5)
    assert set(np.unique(mixed)) <= {0.0, 0.5, 1.0}
    expected = np.empty_like(mixed)
    for idx in np.ndindex(*a.shape):
        expected[idx] = 0.5 * a[idx] + 0.5 * b[idx]
    assert np.array_equal(mixed, expected)


def test_mix_shape_mismatch():
    with pytest.raises(ValueError):
        mixup.mix_arrays(np.zeros(3), np.zeros(4), 0.5)


def test_input_mix_uses_one_ratio_for_all_components():
    rng = np.random.default_rng(2)
    s1 = tuple(rng.random((2, 3)) for _ in range(3))
    s2 = tuple(rng.random((2, 3)) for _ in range(3))
    lam = 0.25
    mixed = mixup.input_mix(s1, s2, lam)
    for got, a, b in zip(mixed, s1, s2):
        assert np.allclose(got, (1 - lam) * a + lam * b)


def test_latent_mix_endpoint_and_fixed_point():
    rng = np.random.default_rng(3)
    t1 = (rng.random(6), rng.random(6), rng.random((4, 4, 4)))
    t2 = (rng.random(6), rng.random(6), rng.random((4, 4, 4)))
    out = mixup.latent_mix(t1, t2, 0.0)
    for got, src in zip(out, t1):
        assert got.tobytes() == src.tobytes()
    same = mixup.latent_mix((t1[0], t1[1], t1[2]),
                            (t1[0], t2[1], t2[2]), 0.37)
    assert np.allclose(same[0], t1[0])


def test_latent_mix_quarter_matches_elementwise_oracle():
    rng = np.random.default_rng(4)
    t1 = (rng.standard_normal(8), rng.standard_normal(8),
          rng.random((4, 4, 4)))
    t2 = (rng.standard_normal(8), rng.standard_normal(8),
          rng.random((4, 4, 4)))
    out = mixup.latent_mix(t1, t2, 0.25)
    for got, a, b in zip(out, t1, t2):
        expected = np.empty_like(got)
        for idx in np.ndindex(*np.shape(a)):
            expected[idx] = 0.75 * a[idx] + 0.25 * b[idx]
        assert np.array_equal(got, expected)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_mix_linearity_and_range(seed, lam):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 3))
    b = rng.random((3, 3))
    forward = mixup.mix_arrays(a, b, lam)
    backward = mixup.mix_arrays(a, b, 1.0 - lam)
    assert np.allclose(forward + backward, a + b, atol=1e-12)
    assert forward.min() >= -1e-12 and forward.max() <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# pairing
# ---------------------------------------------------------------------------

def test_batch_of_one_degenerates_to_identity():
    pairs = mixup.pair_batch(1, 0.2, rng_for(0))
    assert pairs == [mixup.MixPair(0, 0, 0.0)]


def test_pairing_reproducible():
    a = mixup.pair_batch(16, 0.2, rng_for(5))
    b = mixup.pair_batch(16, 0.2, rng_for(5))
    assert a == b


def test_partners_are_distinct():
    for seed in range(50):
        pairs = mixup.pair_batch(9, 0.2, rng_for(seed))
        assert all(p.i != p.j for p in pairs)
        assert sorted(p.i for p in pairs) == list(range(9))


def test_cross_class_fraction_near_half():
    # Two balanced classes in a batch of 50; partner classes should split
    # close to evenly over many seeded batches.
    labels = np.array([0, 1] * 25)
    rng = rng_for(123)
    cross = 0
    total = 0
    for _ in range(10_000):
        pairs = mixup.pair_batch(50, 0.2, rng)
        for p in pairs:
            cross += labels[p.i] != labels[p.j]
            total += 1
    fraction = cross / total
    assert abs(fraction - 0.5) < 0.02


def test_apply_pairs_matches_pairwise_mix():
    rng = np.random.default_rng(9)
    stack = rng.random((6, 2, 3)).astype(np.float32)
    pairs = mixup.pair_batch(6, 0.4, rng_for(1))
    mixed = mixup.apply_pairs(stack, pairs)
    for k, p in enumerate(pairs):
        expected = (1 - np.float32(p.lam)) * stack[p.i] + \
            np.float32(p.lam) * stack[p.j]
        assert np.allclose(mixed[k], expected, atol=1e-7)


# ---------------------------------------------------------------------------
# vgrid dump format
# ---------------------------------------------------------------------------

def test_vgrid_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    values = rng.random((8, 8, 8)).astype(np.float32)
    path = tmp_path / "mix.vgrid"
    mixup.write_vgrid(values, path)
    assert np.array_equal(mixup.read_vgrid(path), values)


def test_vgrid_rejects_non_cubic(tmp_path):
    with pytest.raises(ValueError):
        mixup.write_vgrid(np.zeros((2, 3, 2), dtype=np.float32),
                          tmp_path / "x.vgrid")
