import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from umdr.augment import (MixParams, TemporalMask, make_temporal_mask, mixup_pair, partner_permutation,
                          sample_beta, shufflemix_pair, shufflemix_plus)
from umdr.data import LabeledSample, VideoClip, one_hot


def make_sample(rng, T=8, H=4, label=0, C=6):
    rgb = rng.random((T, 3, H, H)).astype(np.float32)
    depth = rng.random((T, 3, H, H)).astype(np.float32)
    return LabeledSample(VideoClip(rgb, "rgb"), VideoClip(depth, "depth"), one_hot(label, C))


def const_sample(v, label, C=6, T=2):
    f = np.full((T, 3, 2, 2), v, np.float32)
    return LabeledSample(VideoClip(f, "rgb"), VideoClip(f.copy(), "depth"), one_hot(label, C))


# -- Beta ----------------------------------------------------------------------


def test_beta_support_and_errors(rng):
    draws = [sample_beta(0.2, rng) for _ in range(1000)]
    assert min(draws) >= 0.0 and max(draws) <= 1.0
    with pytest.raises(ValueError):
        sample_beta(0.0, rng)


def test_beta_mean_and_uniformity():
    rng = np.random.default_rng(0)
    x = np.array([sample_beta(0.8, rng) for _ in range(100_000)])
    assert abs(x.mean() - 0.5) < 0.02
    u = np.array([sample_beta(1.0, rng) for _ in range(20_000)])
    assert stats.kstest(u, "uniform").pvalue > 0.01


# -- MixUp ----------------------------------------------------------------------


def test_mixup_endpoint_is_exact(rng):
    a, b = make_sample(rng), make_sample(rng, label=3)
    m = mixup_pair(a, b, 1.0)
    assert np.array_equal(m.rgb.frames, a.rgb.frames)
    assert np.array_equal(m.depth.frames, a.depth.frames)
    assert np.array_equal(m.label, a.label)


def test_mixup_arithmetic():
    m = mixup_pair(const_sample(0.5, 2), const_sample(0.1, 5), 0.8)
    assert np.allclose(m.rgb.frames, 0.42, atol=1e-6)
    assert np.allclose(m.label, [0, 0, 0.8, 0, 0, 0.2])


def test_mixup_shape_mismatch(rng):
    with pytest.raises(ValueError):
        mixup_pair(make_sample(rng, T=8), make_sample(rng, T=4), 0.5)
    with pytest.raises(ValueError):
        mixup_pair(make_sample(rng), make_sample(rng), 1.5)


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_mixup_bounds_and_simplex(lam, seed):
    rng = np.random.default_rng(seed)
    a, b = make_sample(rng, label=1), make_sample(rng, label=4)
    m = mixup_pair(a, b, lam)
    assert m.rgb.frames.min() >= 0.0 and m.rgb.frames.max() <= 1.0
    assert abs(m.label.sum() - 1.0) < 1e-6 and m.label.min() >= 0.0
    expect = lam * a.depth.frames.astype(np.float64) + (1 - lam) * b.depth.frames
    assert np.allclose(m.depth.frames, expect, atol=1e-6)


# -- masks -----------------------------------------------------------------------


def test_mask_endpoints(rng):
    m = make_temporal_mask(8, 1.0, "discrete", rng)
    assert m.bits.tolist() == [1] * 8 and m.effective_rate == 1.0
    assert make_temporal_mask(8, 0.0, "continuous", rng).bits.sum() == 0


def test_discrete_count(rng):
    assert make_temporal_mask(8, 0.5, "discrete", rng).bits.sum() == 4


def test_continuous_zero_run_is_one_of_seven():
    valid = set()
    for off in range(7):
        b = [1] * 8
        b[off] = b[off + 1] = 0
        valid.add(tuple(b))
    seen = set()
    rng = np.random.default_rng(0)
    for _ in range(500):
        bits = tuple(make_temporal_mask(8, 0.75, "continuous", rng).bits.tolist())
        assert bits in valid
        seen.add(bits)
    assert seen == valid  # every offset is reachable


def test_mask_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        make_temporal_mask(0, 0.5, "discrete", rng)
    with pytest.raises(ValueError):
        make_temporal_mask(8, 0.5, "diagonal", rng)


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 32), lam=st.floats(0.0, 1.0), seed=st.integers(0, 10_000),
       geometry=st.sampled_from(["discrete", "continuous"]))
def test_mask_properties(T, lam, seed, geometry):
    m = make_temporal_mask(T, lam, geometry, np.random.default_rng(seed))
    k = int(np.floor(lam * T + 0.5))
    assert set(np.unique(m.bits)) <= {0, 1}
    assert m.bits.sum() == k and m.effective_rate == k / T
    assert np.array_equal(m.complement().bits, 1 - m.bits)
    if geometry == "continuous" and k < T:
        zeros = np.flatnonzero(m.bits == 0)
        assert zeros[-1] - zeros[0] + 1 == len(zeros)


# -- ShuffleMix ------------------------------------------------------------------


def test_shufflemix_hand_example():
    T = 4
    a = np.stack([np.full((3, 2, 2), 10 + t, np.float32) for t in range(T)]) / 20
    b = np.stack([np.full((3, 2, 2), t, np.float32) for t in range(T)]) / 20
    s_i = LabeledSample(VideoClip(a), VideoClip(a.copy(), "depth"), one_hot(0, 3))
    s_j = LabeledSample(VideoClip(b), VideoClip(b.copy(), "depth"), one_hot(1, 3))
    m = shufflemix_pair(s_i, s_j, TemporalMask(np.array([1, 0, 1, 0])))
    expect = np.stack([a[0], b[1], a[2], b[3]])
    assert np.array_equal(m.rgb.frames, expect) and np.array_equal(m.depth.frames, expect)
    assert np.allclose(m.label, [0.5, 0.5, 0.0])


def test_shufflemix_all_ones_is_identity(rng):
    a, b = make_sample(rng), make_sample(rng, label=2)
    m = shufflemix_pair(a, b, TemporalMask(np.ones(8, np.int64)))
    assert np.array_equal(m.rgb.frames, a.rgb.frames) and np.array_equal(m.label, a.label)


def test_shufflemix_mask_length_checked(rng):
    with pytest.raises(ValueError):
        shufflemix_pair(make_sample(rng), make_sample(rng), TemporalMask(np.ones(3, np.int64)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), geometry=st.sampled_from(["discrete", "continuous"]))
def test_shufflemix_provenance(seed, geometry):
    rng = np.random.default_rng(seed)
    a, b = make_sample(rng, label=0), make_sample(rng, label=5)
    mask = make_temporal_mask(8, rng.random(), geometry, rng)
    m = shufflemix_pair(a, b, mask)
    for t in range(8):
        src = a if mask.bits[t] else b
        assert np.array_equal(m.rgb.frames[t], src.rgb.frames[t])
        assert np.array_equal(m.depth.frames[t], src.depth.frames[t])
    r = mask.effective_rate
    assert np.allclose(m.label, r * a.label + (1 - r) * b.label)


# -- ShuffleMix+ ---------------------------------------------------------------------


def test_partner_permutation_has_no_fixed_points(rng):
    for n in range(2, 12):
        p = partner_permutation(n, rng)
        assert sorted(p.tolist()) == list(range(n)) and np.all(p != np.arange(n))
    with pytest.raises(ValueError):
        partner_permutation(1, rng)


def _batch(rng, n=6):
    return [make_sample(rng, label=i % 6) for i in range(n)]


@pytest.mark.parametrize("granularity", ["batch", "pair"])
def test_rho_endpoints(granularity, rng):
    batch = _batch(rng)
    for _ in range(20):
        out = shufflemix_plus(batch, MixParams(rho=0.0, granularity=granularity), rng)
        assert all(m.kind == "mixup" for m in out)
        out = shufflemix_plus(batch, MixParams(rho=1.0, granularity=granularity), rng)
        assert all(m.kind == "shufflemix" for m in out)


def test_batch_granularity_is_uniform_within_batch(rng):
    batch = _batch(rng)
    kinds = set()
    for _ in range(40):
        out = shufflemix_plus(batch, MixParams(rho=0.5), rng)
        assert len({m.kind for m in out}) == 1
        kinds.add(out[0].kind)
    assert kinds == {"mixup", "shufflemix"}


def test_pair_granularity_mixes_within_batch():
    rng = np.random.default_rng(3)
    batch = _batch(rng, 16)
    out = shufflemix_plus(batch, MixParams(rho=0.5, granularity="pair"), rng)
    assert {m.kind for m in out} == {"mixup", "shufflemix"}


def test_shufflemix_plus_seeded(rng):
    batch = _batch(rng)
    a = shufflemix_plus(batch, MixParams(), np.random.default_rng(9))
    b = shufflemix_plus(batch, MixParams(), np.random.default_rng(9))
    for x, y in zip(a, b):
        assert np.array_equal(x.rgb.frames, y.rgb.frames) and np.array_equal(x.label, y.label)
        assert x.partner == y.partner


def test_shufflemix_plus_needs_two(rng):
    with pytest.raises(ValueError):
        shufflemix_plus(_batch(rng, 1), MixParams(), rng)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000), rho=st.floats(0, 1),
       granularity=st.sampled_from(["batch", "pair"]), geometry=st.sampled_from(["discrete", "continuous"]))
def test_shufflemix_plus_invariants(seed, rho, granularity, geometry):
    rng = np.random.default_rng(seed)
    batch = _batch(rng, 5)
    out = shufflemix_plus(batch, MixParams(rho=rho, granularity=granularity, mix_geometry=geometry), rng)
    for i, m in enumerate(out):
        assert m.partner != i
        assert abs(m.label.sum() - 1) < 1e-6 and m.label.min() >= 0
        if m.kind == "shufflemix":
            a, b = batch[i], batch[m.partner]
            for t in range(8):
                src = a if m.mask.bits[t] else b
                # same mask for both modalities
                assert np.array_equal(m.rgb.frames[t], src.rgb.frames[t])
                assert np.array_equal(m.depth.frames[t], src.depth.frames[t])


def test_mixparams_validation():
    with pytest.raises(ValueError):
        MixParams(alpha_m=0)
    with pytest.raises(ValueError):
        MixParams(rho=1.5)
    with pytest.raises(ValueError):
        MixParams(granularity="epoch")
