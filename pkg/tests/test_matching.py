import itertools

import numpy as np
import pytest

from chm import tensor as T
from chm.config import RunConfig
from chm.convengine import conv, scale_maxpool
from chm.kernels import SharedKernel
from chm.matching import (
    ChmStack,
    FeatureLevel,
    ProjectionParams,
    chmnet_forward,
    conv3x3,
    correlation_6d,
    cosine_correlation,
    init_model,
    local_vote_oracle,
    project_features,
    rhm_vote,
)


def small_cfg(**kw):
    base = dict(H=4, W=4, H_up=6, W_up=6, S=2, scale_factors=[0.75, 1.0], kernel_6d=[3, 3, 1],
                kernel_4d=[3, 3], levels=1, rho=1)
    base.update(kw)
    return RunConfig(**base)


def naive_conv3x3(x, w, b):
    c, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for y in range(h):
            for xx in range(wd):
                acc = b[o]
                for i in range(c):
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            if 0 <= y + dy < h and 0 <= xx + dx < wd:
                                acc += w[o, i, dy + 1, dx + 1] * x[i, y + dy, xx + dx]
                out[o, y, xx] = acc
    return out


def test_conv3x3_matches_loops():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    np.testing.assert_allclose(conv3x3(x, w, b), naive_conv3x3(x, w, b), atol=1e-12)


def test_identity_projection():
    cfg = small_cfg(S=1, scale_factors=[1.0])
    x = np.random.default_rng(1).normal(size=(5, 4, 4))
    (out,) = project_features(FeatureLevel("l", x), cfg, ProjectionParams.identity(5, 1))
    np.testing.assert_array_equal(out, x)


def test_zero_projection_gives_bias():
    cfg = small_cfg()
    theta = ProjectionParams([np.zeros((2, 5, 3, 3))] * 2, [np.array([1.0, -2.0])] * 2)
    for out in project_features(np.random.default_rng(2).normal(size=(5, 6, 6)), cfg, theta):
        assert out.shape == (2, 4, 4)
        np.testing.assert_allclose(out[0], 1.0)
        np.testing.assert_allclose(out[1], -2.0)


def test_projection_scale_count_checked():
    with pytest.raises(ValueError):
        project_features(np.zeros((4, 4, 4)), small_cfg(), ProjectionParams.identity(4, 1))


def test_projection_init_rho():
    theta = ProjectionParams.init(16, 3, 4, rng=0)
    assert len(theta.weights) == 3 and theta.weights[0].shape == (4, 16, 3, 3)
    with pytest.raises(ValueError):
        ProjectionParams.init(3, 1, 4)


def naive_cosine(a, b):
    out = np.zeros(a.shape[1:] + b.shape[1:])
    for y, x, yp, xp in itertools.product(*(range(n) for n in out.shape)):
        u, v = a[:, y, x], b[:, yp, xp]
        nu, nv = np.sqrt(u @ u), np.sqrt(v @ v)
        out[y, x, yp, xp] = 0.0 if nu == 0 or nv == 0 else max(0.0, (u @ v) / (nu * nv))
    return out


def test_cosine_correlation_oracle_and_range():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 2, 3))
    a[:, 0, 0] = 0.0
    c = cosine_correlation(a, b)
    np.testing.assert_allclose(c, naive_cosine(a, b), atol=1e-14)
    assert c.min() >= 0.0 and c.max() <= 1.0 + 1e-15
    assert np.all(c[0, 0] == 0.0)


def test_cosine_self_and_opposite():
    a = np.random.default_rng(4).normal(size=(6, 3, 3))
    c = cosine_correlation(a, a)
    np.testing.assert_allclose(c.reshape(9, 9).diagonal(), 1.0, atol=1e-14)
    assert np.all(cosine_correlation(a, -a).reshape(9, 9).diagonal() == 0.0)


def test_correlation_swap_is_transpose():
    rng = np.random.default_rng(5)
    src = [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 3, 3))]
    trg = [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 3, 3))]
    ab = correlation_6d(src, trg, (4, 4))
    ba = correlation_6d(trg, src, (4, 4))
    np.testing.assert_allclose(ba, ab.transpose(3, 4, 5, 0, 1, 2), atol=1e-14)
    assert ab.shape == (4, 4, 2, 4, 4, 2)
    assert ab.min() >= 0 and ab.max() <= 1 + 1e-12


def test_correlation_channel_mismatch():
    with pytest.raises(ValueError):
        correlation_6d([np.ones((3, 2, 2))], [np.ones((4, 2, 2))], (2, 2))


def _levels(rng, n_levels, c=4, hw=5):
    src = [FeatureLevel(f"l{i}", rng.normal(size=(c, hw, hw))) for i in range(n_levels)]
    trg = [FeatureLevel(f"l{i}", rng.normal(size=(c, hw, hw))) for i in range(n_levels)]
    return src, trg


def test_forward_delta_collapse():
    cfg = small_cfg()
    rng = np.random.default_rng(6)
    src, trg = _levels(rng, 1)
    theta = ProjectionParams.identity(4, 2)
    out = chmnet_forward(src, trg, ChmStack.delta(cfg), cfg, [theta])
    fs = project_features(src[0], cfg, theta)
    ft = project_features(trg[0], cfg, theta)
    pooled = correlation_6d(fs, ft, cfg.base).max(axis=(2, 5))
    np.testing.assert_allclose(out.corr, T.resize_4d(T.sigmoid(pooled), (6, 6, 6, 6)), atol=1e-14)
    assert out.corr.shape == (6, 6, 6, 6)


def test_forward_two_identical_levels_double_logits():
    cfg1, cfg2 = small_cfg(), small_cfg(levels=2)
    rng = np.random.default_rng(7)
    src, trg = _levels(rng, 1)
    theta = ProjectionParams.identity(4, 2)
    one = chmnet_forward(src, trg, ChmStack.delta(cfg1), cfg1, [theta], keep_cache=True)
    two = chmnet_forward(src * 2, trg * 2, ChmStack.delta(cfg2), cfg2, [theta, theta], keep_cache=True)
    np.testing.assert_allclose(two.cache["fused"], 2 * one.cache["fused"], atol=1e-14)


def test_forward_matches_stage_composition():
    cfg = small_cfg(levels=2, scheme="psi")
    rng = np.random.default_rng(8)
    src, trg = _levels(rng, 2)
    stack, projections = init_model(cfg, [4, 4], rng=9)
    out = chmnet_forward(src, trg, stack, cfg, projections)
    fused = 0
    for l in range(2):
        fs = project_features(src[l], cfg, projections[l])
        ft = project_features(trg[l], cfg, projections[l])
        pooled, _ = scale_maxpool(conv(correlation_6d(fs, ft, cfg.base), stack.kernels_6d[l]))
        fused = fused + pooled
    ref = conv(T.resize_4d(T.sigmoid(fused), (6, 6, 6, 6)), stack.kernel_4d)
    np.testing.assert_allclose(out.corr, ref, atol=1e-13)


def test_forward_rejects_mismatched_levels():
    cfg = small_cfg()
    rng = np.random.default_rng(10)
    src, trg = _levels(rng, 2)
    with pytest.raises(ValueError):
        chmnet_forward(src, trg, ChmStack.delta(cfg), cfg, [ProjectionParams.identity(4, 2)])


# --- global voting baseline ------------------------------------------------------------------


def rhm_oracle(c, sigma):
    """Quadruple loop: every match votes for every offset bin with a Gaussian of its distance."""
    H, W, H2, W2 = c.shape
    hough = np.zeros((H + H2 - 1, W + W2 - 1))
    for dy in range(-(H - 1), H2):
        for dx in range(-(W - 1), W2):
            acc = 0.0
            for y, x, yp, xp in itertools.product(range(H), range(W), range(H2), range(W2)):
                q = (yp - y - dy) ** 2 + (xp - x - dx) ** 2
                acc += c[y, x, yp, xp] * np.exp(-q / (2 * sigma * sigma))
            hough[dy + H - 1, dx + W - 1] = acc
    return hough


def test_rhm_matches_loop_oracle():
    c = np.random.default_rng(11).random((3, 2, 2, 3))
    hough, rescored = rhm_vote(c, 1.3)
    np.testing.assert_allclose(hough, rhm_oracle(c, 1.3), rtol=1e-12)
    y, x, yp, xp = 1, 0, 0, 2
    assert rescored[y, x, yp, xp] == pytest.approx(c[y, x, yp, xp] * hough[yp - y + 2, xp - x + 1])


def test_rhm_iso_kernel_profile():
    k = SharedKernel.delta("iso", (3, 3), 1.0)
    c = np.random.default_rng(12).random((3, 3, 3, 3))
    hough, _ = rhm_vote(c, k)
    # delta profile: each bin counts only its own offset
    for dy, dx in itertools.product(range(-2, 3), repeat=2):
        total = sum(c[y, x, y + dy, x + dx] for y, x in itertools.product(range(3), repeat=2)
                    if 0 <= y + dy < 3 and 0 <= x + dx < 3)
        assert hough[dy + 2, dx + 2] == pytest.approx(total)
    with pytest.raises(ValueError):
        rhm_vote(c, SharedKernel.delta("psi", (3, 3)))


def test_rhm_translation_invariance():
    c = np.zeros((9, 9, 9, 9))
    rng = np.random.default_rng(13)
    for y, x in itertools.product(range(2, 4), range(2, 5)):
        c[y, x, y + 1, x + 2] = rng.random() + 0.5
    c[3, 2, 5, 2] = 0.7
    moved = np.roll(c, (2, 1, 2, 1), axis=(0, 1, 2, 3))
    np.testing.assert_allclose(rhm_vote(moved)[0], rhm_vote(c)[0], atol=1e-12)


def test_local_vote_oracle_trivial():
    c = np.random.default_rng(14).random((3, 3, 3, 3))

    def delta(sq, ds):
        return ((sq == 0) & (ds == 0)).astype(float)

    # a delta weight still collects every neighbour pair sharing the match's displacement
    ref = sum(c[1 + a, 1 + b, 1 + a, 1 + b] for a, b in itertools.product((-1, 0, 1), repeat=2))
    assert local_vote_oracle(c, (1, 1), (1, 1), delta, (3, 3)) == pytest.approx(ref)
    assert local_vote_oracle(np.zeros_like(c), (1, 1), (2, 0), delta, (3, 3)) == 0.0
    assert local_vote_oracle(c, (0, 0), (0, 0), lambda sq, ds: np.zeros(sq.shape), (3, 3)) == 0.0
