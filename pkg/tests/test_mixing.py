import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypermix import mixing, nets
from hypermix import synthdata as sd
from hypermix.errors import ConfigError, DomainError, SamplingError


def rng(seed=0):
    return np.random.default_rng(seed)


def test_mixup_endpoints_exact():
    s1 = (np.array([1.0, 2.0]), np.array([1.0, 0.0]))
    s2 = (np.array([-3.0, 5.0]), np.array([0.0, 1.0]))
    m1 = mixing.mixup(s1, s2, 1.0)
    assert np.array_equal(m1.x, s1[0]) and np.array_equal(m1.y, s1[1])
    m0 = mixing.mixup(s1, s2, 0.0)
    assert np.array_equal(m0.x, s2[0]) and np.array_equal(m0.y, s2[1])


def test_mixup_half_blends_labels():
    m = mixing.mixup((np.zeros(2), np.array([1.0, 0, 0])),
                     (np.ones(2), np.array([0, 1.0, 0])), 0.5)
    assert np.array_equal(m.x, [0.5, 0.5])
    assert np.array_equal(m.y, [0.5, 0.5, 0.0])


def test_mixup_ine_against_uniform_label():
    # 0.8 of one-hot class 2 plus 0.2 of uniform over 5
    m = mixing.mixup((np.zeros(3), sd.one_hot(5, 2)),
                     (np.ones(3), sd.uniform_label(5)), 0.8)
    assert np.allclose(m.y, [0.04, 0.04, 0.84, 0.04, 0.04], atol=1e-12)


def test_mixup_rejects_bad_lambda():
    s = (np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        mixing.mixup(s, s, 1.2)


@given(st.floats(0.0, 1.0), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_mixup_label_sums_to_one(lam, seed):
    r = np.random.default_rng(seed)
    y1, y2 = r.dirichlet(np.ones(4)), r.dirichlet(np.ones(4))
    m = mixing.mixup((r.normal(size=3), y1), (r.normal(size=3), y2), lam)
    assert abs(m.y.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# ParamMix


def support_set(seed=0, k=5, n=5, dim=6):
    r = rng(seed)
    x = r.normal(size=(k * n, dim))
    y = np.repeat(np.arange(n), k)
    return x, y


def test_parammix_doubles_support():
    x, y = support_set()
    xs, soft = mixing.parammix_augment(x, y, 5, 25, (2.0, 5.0), rng(1))
    assert xs.shape == (50, 6) and soft.shape == (50, 5)
    assert np.array_equal(xs[:25], x)
    assert np.allclose(soft.sum(axis=1), 1.0, atol=1e-9)


def test_parammix_extreme_beta_reproduces_first_parent():
    x, y = support_set()
    xs, _ = mixing.parammix_augment(x, y, 5, 25, (1e7, 5.0), rng(2))
    mixed = xs[25:]
    d = np.abs(mixed[:, None, :] - x[None, :, :]).max(axis=2).min(axis=1)
    assert np.all(d < 1e-4)


def test_parammix_records_same_class_rate():
    x, y = support_set()
    stats = {}
    mixing.parammix_augment(x, y, 5, 200, (2.0, 5.0), rng(3), stats)
    assert stats["n_mixed"] == 200
    # uniform ordered pairs of distinct indices hit the same class with
    # probability (K-1)/(KN-1) = 4/24
    assert 0.05 < stats["same_class_pairs"] / 200 < 0.35


def test_parammix_needs_two_samples():
    with pytest.raises(SamplingError):
        mixing.parammix_augment(np.zeros((1, 3)), [0], 1, 4, (2.0, 5.0), rng(4))


def test_parammix_aggregate_one_hot_equals_generate_classifier():
    ex = nets.FeatureExtractor(6, d_feat=8, rng=rng(5))
    hy = nets.HyperNetwork(8, rng=rng(6), out_scale=1.0)
    x, y = support_set(seed=7)
    soft = np.eye(5)[y]
    a = mixing.parammix_aggregate(hy, ex, x, soft)
    b = nets.generate_classifier(hy, ex, x, y, 5)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_parammix_aggregate_two_sample_formula():
    ex = nets.FeatureExtractor(4, d_feat=5, rng=rng(8))
    hy = nets.HyperNetwork(5, rng=rng(9), out_scale=1.0)
    xs = rng(10).normal(size=(2, 4))
    codes = hy.codes_np(ex.features(xs))
    u, v = codes[0], codes[1]
    soft = np.array([[0.7, 0.3], [0.2, 0.8]])
    cp = mixing.parammix_aggregate(hy, ex, xs, soft)
    w1 = (0.7 * u + 0.2 * v) / 0.9
    w2 = (0.3 * u + 0.8 * v) / 1.1
    assert np.allclose(cp.W[0], w1[:-1], atol=1e-12) and abs(cp.b[0] - w1[-1]) < 1e-12
    assert np.allclose(cp.W[1], w2[:-1], atol=1e-12) and abs(cp.b[1] - w2[-1]) < 1e-12


def test_parammix_aggregate_duplication_invariant():
    ex = nets.FeatureExtractor(4, d_feat=5, rng=rng(11))
    hy = nets.HyperNetwork(5, rng=rng(12), out_scale=1.0)
    xs = rng(13).normal(size=(3, 4))
    soft = np.array([[0.6, 0.4], [0.1, 0.9], [0.5, 0.5]])
    a = mixing.parammix_aggregate(hy, ex, xs, soft)
    b = mixing.parammix_aggregate(hy, ex, np.concatenate([xs, xs]),
                                  np.concatenate([soft, soft]))
    assert np.allclose(a.W, b.W, atol=1e-12) and np.allclose(a.b, b.b, atol=1e-12)


def test_parammix_aggregate_zero_mass_names_class():
    ex = nets.FeatureExtractor(4, d_feat=5, rng=rng(14))
    hy = nets.HyperNetwork(5, rng=rng(15))
    with pytest.raises(Exception, match="1"):
        mixing.parammix_aggregate(hy, ex, rng(16).normal(size=(2, 4)),
                                  np.array([[1.0, 0.0], [1.0, 0.0]]))


# ---------------------------------------------------------------------------
# OOE-Mix


def test_ooemix_labels_and_counts(tiny_dataset):
    ep = sd.sample_episode(tiny_dataset, "base", 5, 3, 5, 0,
                           sd.rng_stream(0, sd.STREAM_EPISODE, 50))
    xs, soft = mixing.ooemix_augment(ep, 8, (20.0, 20.0), rng(17))
    assert xs.shape == (8, tiny_dataset.input_dim) and soft.shape == (8, 5)
    assert np.allclose(soft.sum(axis=1), 1.0, atol=1e-9)
    # label lower bound: every class mass >= (1 - lambda)/N, and lambda is
    # recoverable as max - min for a one-hot/uniform mixture
    lam = soft.max(axis=1) - soft.min(axis=1)
    assert np.all(soft.min(axis=1) >= (1.0 - lam) / 5 - 1e-12)


def test_ooemix_zero_count(tiny_dataset):
    ep = sd.sample_episode(tiny_dataset, "base", 5, 3, 5, 0,
                           sd.rng_stream(0, sd.STREAM_EPISODE, 51))
    xs, soft = mixing.ooemix_augment(ep, 0, (20.0, 20.0), rng(18))
    assert xs.shape[0] == 0 and soft.shape[0] == 0


def test_ooemix_empty_pool_raises(tiny_dataset):
    # 6-way on the 6-class val split leaves no out-of-episode classes
    ep = sd.sample_episode(tiny_dataset, "val", 6, 3, 5, 0,
                           sd.rng_stream(0, sd.STREAM_EPISODE, 52))
    assert ep.ooe_pool.n_classes == 0
    with pytest.raises(SamplingError):
        mixing.ooemix_augment(ep, 4, (20.0, 20.0), rng(19))


def test_mixconfig_validation():
    with pytest.raises(ConfigError):
        mixing.MixConfig(a_pm=0.0)
    with pytest.raises(ConfigError):
        mixing.MixConfig(n_ooe_mix=-2)
    with pytest.raises(ConfigError):
        mixing.MixConfig(beta_oe=-0.1)
