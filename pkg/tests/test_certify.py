import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from authnet.certify import (
    BOUNDS,
    UnsupportedLayerError,
    auth_radius,
    crown_bounds,
    crown_full_bounds,
    gen_fake_keys,
    interval_bounds,
    kde_density,
    pca_embed,
    refuse_accuracy_profile,
    refuse_occupancy,
    refuse_radius,
    sample_ball,
)
from authnet.nncore import Flatten, Linear, ReLU, SequentialModel, build_model, forward
from authnet.nncore.layers import Layer

from conftest import small_conv_net, small_relu_net


def linear_net(w, b):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    lin = Linear(w.shape[0])
    model = SequentialModel([lin], (w.shape[1],), w.shape[0], seed=0)
    lin.weight[...] = w
    lin.bias[...] = b
    return model


def violations(model, x0, eps, bounds, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    xs = x0[None] + rng.uniform(-eps, eps, size=(n,) + x0.shape)
    f = forward(model, xs)
    return int(np.sum((f < bounds.lower - 1e-9) | (f > bounds.upper + 1e-9)))


@pytest.mark.parametrize("method", sorted(BOUNDS))
def test_zero_radius_is_a_point(method):
    model = small_conv_net(0)
    x0 = np.random.default_rng(0).uniform(0, 1, model.input_shape)
    b = BOUNDS[method](model, x0, 0.0)
    logits = forward(model, x0[None])[0]
    np.testing.assert_allclose(b.lower, logits, atol=1e-9)
    np.testing.assert_allclose(b.upper, logits, atol=1e-9)
    assert np.all(b.lower <= b.upper)


def test_hand_interval_linear():
    b = interval_bounds(linear_net([[2.0]], [0.0]), np.array([1.0]), 0.5)
    np.testing.assert_allclose([b.lower[0], b.upper[0]], [1.0, 3.0])


def test_relu_clips_interval():
    lin = Linear(1)
    model = SequentialModel([lin, ReLU(), Linear(1)], (1,), 1, seed=0)
    lin.weight[...] = 1.0
    lin.bias[...] = 0.0
    model.layers[2].weight[...] = 1.0
    model.layers[2].bias[...] = 0.0
    b = interval_bounds(model, np.array([0.0]), 1.0)
    np.testing.assert_allclose([b.lower[0], b.upper[0]], [0.0, 1.0])


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_linear_network_bounds_are_exact(seed, eps):
    rng = np.random.default_rng(seed)
    w, bias = rng.standard_normal((3, 4)), rng.standard_normal(3)
    model = linear_net(w, bias)
    x0 = rng.standard_normal(4)
    c, i = crown_bounds(model, x0, eps), interval_bounds(model, x0, eps)
    # extreme points of the box reach each bound exactly
    exact_lo = w @ x0 + bias - eps * np.abs(w).sum(1)
    exact_hi = w @ x0 + bias + eps * np.abs(w).sum(1)
    for b in (c, i):
        np.testing.assert_allclose(b.lower, exact_lo, atol=1e-10)
        np.testing.assert_allclose(b.upper, exact_hi, atol=1e-10)


def test_stable_relus_match_interval():
    lin = Linear(2)
    model = SequentialModel([lin, ReLU(), Linear(2)], (2,), 2, seed=1)
    lin.weight[...] = np.eye(2)
    lin.bias[...] = 5.0  # every pre-activation stays positive
    x0 = np.array([0.2, 0.3])
    c, i = crown_bounds(model, x0, 0.5), interval_bounds(model, x0, 0.5)
    np.testing.assert_allclose(c.lower, i.lower, atol=1e-12)
    np.testing.assert_allclose(c.upper, i.upper, atol=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(0.001, 0.5), st.sampled_from(["mlp", "cnn"]))
def test_soundness_and_tightness(seed, eps, kind):
    model = small_relu_net(seed) if kind == "mlp" else small_conv_net(seed)
    x0 = np.random.default_rng(seed).uniform(0, 1, model.input_shape)
    i = interval_bounds(model, x0, eps)
    for method in ("crown", "crown-full"):
        c = BOUNDS[method](model, x0, eps)
        assert violations(model, x0, eps, c, seed=seed) == 0
        assert np.all(c.lower >= i.lower - 1e-12) and np.all(c.upper <= i.upper + 1e-12)
    assert violations(model, x0, eps, i, seed=seed) == 0


def test_full_crown_no_looser_than_ibp_intermediates():
    model = small_relu_net(7, hidden=12)
    x0 = np.random.default_rng(7).uniform(0, 1, model.input_shape)
    full, lite = crown_full_bounds(model, x0, 0.2), crown_bounds(model, x0, 0.2)
    assert np.all(full.lower >= lite.lower - 1e-12) and np.all(full.upper <= lite.upper + 1e-12)


def _monotone(method, seed, e1, e2):
    e1, e2 = sorted((e1, e2))
    model = small_relu_net(seed)
    x0 = np.random.default_rng(seed).uniform(0, 1, model.input_shape)
    a, b = BOUNDS[method](model, x0, e1), BOUNDS[method](model, x0, e2)
    assert np.all(a.lower >= b.lower - 1e-9) and np.all(a.upper <= b.upper + 1e-9)


@given(st.integers(0, 10_000), st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_interval_bounds_monotone_in_eps(seed, e1, e2):
    _monotone("ibp", seed, e1, e2)


@pytest.mark.xfail(reason="adaptive lower slope can flip between eps values; see decisions ledger", strict=True)
def test_crown_monotone_in_eps_known_counterexample():
    _monotone("crown-full", 434, 0.125, 0.1875)


def test_unsupported_layer_rejected():
    class Odd(Layer):
        kind = "odd"

        def forward(self, x):
            return x

    model = SequentialModel([Flatten(), Odd(), Linear(2)], (1, 2), 2)
    with pytest.raises(UnsupportedLayerError):
        interval_bounds(model, np.zeros((1, 2)), 0.1)


def test_negative_eps_rejected():
    with pytest.raises(ValueError):
        crown_bounds(linear_net([[1.0]], [0.0]), np.array([0.0]), -0.1)


def test_auth_radius_hand_solution():
    # f(x) = (x, 1 - x) at x0 = 0.8: margin 0.6 closes at slope 2 -> 0.3
    model = linear_net([[1.0], [-1.0]], [0.0, 1.0])
    r = auth_radius(model, np.array([0.8]), 0, tol=1e-6)
    assert r.radius == pytest.approx(0.3, abs=1e-6)
    assert r.bracket <= 1e-6 and r.valid


def test_auth_radius_misclassified_centre_is_zero():
    model = linear_net([[1.0], [-1.0]], [0.0, 1.0])
    r = auth_radius(model, np.array([0.2]), 0)
    assert r.radius == 0.0 and not r.valid


@given(st.floats(0.05, 0.8))
def test_refuse_radius_half_margin(margin):
    # f0 = x, f1 = -x at x0 = margin/2: predicted 0 leads by `margin`
    model = linear_net([[1.0], [-1.0]], [0.0, 0.0])
    r = refuse_radius(model, np.array([margin / 2]), 0, 1, tol=1e-7)
    assert r.radius == pytest.approx(margin / 2, abs=1e-6)
    assert r.radius > 0


def test_refuse_radius_requires_wrong_prediction():
    model = linear_net([[1.0], [-1.0]], [0.0, 0.0])
    with pytest.raises(ValueError):
        refuse_radius(model, np.array([0.3]), 1, 1)


@settings(max_examples=15)
@given(st.integers(0, 1000))
def test_radius_crossing_semantics(seed):
    model = small_relu_net(seed)
    x0 = np.random.default_rng(seed).uniform(0, 1, model.input_shape)
    y = int(np.argmax(forward(model, x0[None])[0]))
    tol = 1e-4
    r = auth_radius(model, x0, y, tol=tol)

    def gap(eps):
        b = crown_bounds(model, x0, eps)
        return b.lower[y] - np.delete(b.upper, y).max()

    assert gap(r.radius) >= 0
    if r.valid:
        assert gap(r.radius + tol) < 0
    # a looser tolerance never reports a radius more than tol larger
    assert auth_radius(model, x0, y, tol=2 * tol).radius <= r.radius + 2 * tol


def test_fake_keys_stay_in_box_and_repeat():
    ks = gen_fake_keys(20, (1, 28, 28), 0.5, 0.5, seed=3)
    masks = np.stack([k.mask for k in ks.keys])
    offs = np.stack([k.offset for k in ks.keys])
    assert masks.size + offs.size > 10**4
    assert masks.min() >= 0.5 and masks.max() <= 1.5
    assert np.abs(offs).max() <= 0.5
    again = gen_fake_keys(20, (1, 28, 28), 0.5, 0.5, seed=3)
    np.testing.assert_array_equal(again.keys[5].offset, ks.keys[5].offset)


def test_fake_key_box_scan_large():
    ks = gen_fake_keys(64, (1, 40, 40), 0.3, 0.2, seed=1)
    vals = np.concatenate([np.concatenate([k.mask.ravel(), k.offset.ravel()]) for k in ks.keys])
    assert vals.size >= 10**5
    m = np.concatenate([k.mask.ravel() for k in ks.keys])
    o = np.concatenate([k.offset.ravel() for k in ks.keys])
    assert np.sum((m < 0.7) | (m > 1.3)) == 0 and np.sum(np.abs(o) > 0.2) == 0


def test_sample_ball_zero_radius():
    c = np.random.default_rng(0).uniform(0, 1, (1, 3, 3))
    pts = sample_ball(c, 0.0, 5)
    assert pts.shape == (5, 1, 3, 3)
    np.testing.assert_array_equal(pts, np.repeat(c[None], 5, axis=0))


def test_sample_ball_uniform_ks():
    # centre 0.5 with eps 0.2 never clamps; each coordinate offset should be Uniform(-eps, eps)
    eps = 0.2
    pts = sample_ball(np.full((1,), 0.5), eps, 10_000, seed=4)
    d = pts[:, 0] - 0.5
    assert np.abs(d).max() <= eps
    assert stats.kstest(d, stats.uniform(loc=-eps, scale=2 * eps).cdf).pvalue > 0.01


def test_sample_ball_max_coordinate_ks():
    # ||p - c||_inf over d unclamped coordinates has CDF (t / eps)^d
    eps, d = 0.2, 4
    pts = sample_ball(np.full((d,), 0.5), eps, 10_000, seed=5)
    dist = np.abs(pts - 0.5).max(axis=1)
    assert stats.kstest(dist, lambda t: np.clip(t / eps, 0, 1) ** d).pvalue > 0.01


def test_pca_rank_one():
    t = np.linspace(-1, 1, 50)
    direction = np.random.default_rng(0).standard_normal(20)
    emb = pca_embed(t[:, None] * direction[None])
    assert emb.variances[1] <= 1e-8 * emb.variances[0]


def test_pca_recovers_rotated_gaussian():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4000, 2)) * np.array([3.0, 1.0])
    q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    x = np.concatenate([z, np.zeros((4000, 8))], axis=1) @ q.T
    emb = pca_embed(x)
    want = z.var(axis=0)
    np.testing.assert_allclose(emb.variances, want, rtol=0.05)
    # oracle: eigenvalues of the sample covariance
    ev = np.sort(np.linalg.eigvalsh(np.cov(x.T, bias=True)))[::-1][:2]
    np.testing.assert_allclose(emb.variances, ev, rtol=1e-6)


def test_pca_deterministic_and_degenerate():
    x = np.random.default_rng(1).standard_normal((30, 6))
    np.testing.assert_array_equal(pca_embed(x, seed=2).coords, pca_embed(x, seed=2).coords)
    same = pca_embed(np.ones((5, 4)))
    assert same.degenerate and not same.coords.any()
    with pytest.raises(ValueError):
        pca_embed(np.zeros((2, 3)))


def test_kde_normalised_and_peaked():
    pts = np.random.default_rng(0).standard_normal((200, 2))
    d = kde_density(pts, 0.4, size=120)
    assert d.integral() == pytest.approx(1.0, abs=0.02)
    one = kde_density(np.array([[0.3, -0.2]]), 0.5, size=101)
    j, i = np.unravel_index(np.argmax(one.density), one.density.shape)
    assert abs(one.xs[i] - 0.3) < 0.05 and abs(one.ys[j] + 0.2) < 0.05
    with pytest.raises(ValueError):
        kde_density(np.zeros((0, 2)), 0.3)
    with pytest.raises(ValueError):
        kde_density(pts, 0.0)


def test_occupancy_extremes():
    rng = np.random.default_rng(0)
    wide = rng.normal(0, 5, (300, 2))
    tight = rng.normal(0, 0.1, (300, 2))
    kinds = np.array(["refuse"] * 300 + ["authentication"] * 300)
    occ = refuse_occupancy(np.concatenate([wide, tight]), kinds)
    assert occ.refuse_fraction > 0.9
    flipped = refuse_occupancy(np.concatenate([wide, tight]), kinds[::-1])
    assert flipped.refuse_fraction < 0.1


def test_profile_of_untrained_model_is_chance():
    model = build_model("tiny-mlp", seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (2000, 1, 12, 12))
    y = rng.integers(0, 10, 2000)
    prof = refuse_accuracy_profile(model, x, y)
    assert abs(prof.overall - 0.1) < 0.05
    with pytest.raises(ValueError):
        refuse_accuracy_profile(model, x[:0], y[:0])


def test_profile_per_ball():
    model = linear_net([[1.0], [-1.0]], [0.0, 0.0])
    x = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    prof = refuse_accuracy_profile(model, x, np.array([0, 0, 0, 1]), np.array([0, 0, 1, 1]))
    np.testing.assert_allclose(prof.per_ball, [1.0, 0.5])
    assert prof.max_ball == 1.0 and prof.overall == 0.75
