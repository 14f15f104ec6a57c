import numpy as np
import pytest

from chm.config import RunConfig
from chm.matching import correlation_6d, correlation_6d_backward
from chm.synthetic import shift_sample
from chm.traincheck import (
    Adam,
    DivergenceError,
    GradReport,
    check_gradients,
    finite_difference,
    forward_backward,
    init_params,
    loss_only,
    pack,
    train,
    trainable_names,
    unpack,
)


def tiny_cfg(**kw):
    base = dict(H=4, W=4, H_up=5, W_up=5, S=2, scale_factors=[0.75, 1.0], kernel_6d=[3, 3, 1],
                kernel_4d=[3, 3], levels=2, rho=2, sigma_g=2.0, tau=1.5, init_spread=0.3)
    base.update(kw)
    return RunConfig(**base)


def tiny_sample(cfg, shift=(1, 0), rng=1):
    return shift_sample(cfg, shift, channels=4, feat_hw=(5, 5), margin=1, rng=rng)


@pytest.mark.parametrize("scheme,engine", [("psi", "dense"), ("iso", "dense"), ("cp_psi", "cp"), ("full", "dense")])
def test_gradients_match_finite_differences(scheme, engine):
    cfg = tiny_cfg(scheme=scheme, engine=engine, train_projection=True)
    if scheme == "full":
        cfg = tiny_cfg(scheme=scheme, engine=engine, train_projection=True, levels=1)
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4] * cfg.levels)
    report = check_gradients(cfg, params, sample, eps=1e-6, tol=1e-4, max_entries=12)
    assert report.passed, str(report)
    assert {r[0] for r in report.rows} == set(params)


def test_correlation_backward_fd():
    rng = np.random.default_rng(2)
    src = [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 3, 3))]
    trg = [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 3, 3))]
    probe = rng.normal(size=(4, 4, 2, 4, 4, 2))
    g_src, g_trg = correlation_6d_backward(src, trg, probe)

    def f():
        return np.vdot(correlation_6d(src, trg, (4, 4)), probe)

    for feats, grads in ((src, g_src), (trg, g_trg)):
        for s in range(2):
            fd = finite_difference(f, feats[s], eps=1e-6)
            err = np.abs(fd - grads[s].ravel()) / np.maximum(np.abs(fd), 1e-8)
            assert err.max() < 1e-4


def test_zero_signal_gives_zero_gradient():
    cfg = tiny_cfg()
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4, 4])
    # target keypoints equal to the current prediction: zero loss, zero gradient
    from chm.traincheck import predict
    pred, _, _ = predict(cfg, params, sample)
    sample.pair.trg_kps = pred
    loss, grads = forward_backward(cfg, params, sample)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_directional_derivative():
    cfg = tiny_cfg(train_projection=True)
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4, 4])
    _, grads = forward_backward(cfg, params, sample)
    rng = np.random.default_rng(3)
    direction = {n: rng.normal(size=p.shape) for n, p in grads.items()}
    eps = 1e-6

    def shifted(sign):
        return {n: p + sign * eps * direction.get(n, 0) for n, p in params.items()}

    fd = (loss_only(cfg, shifted(1), sample) - loss_only(cfg, shifted(-1), sample)) / (2 * eps)
    analytic = sum(np.vdot(grads[n], direction[n]) for n in grads)
    assert fd == pytest.approx(analytic, rel=1e-5)


def test_report_edge_cases():
    cfg = tiny_cfg()
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4, 4])
    empty = check_gradients(cfg, params, sample, names=[])
    assert empty.passed and empty.rows == []
    single = check_gradients(cfg, params, sample, names=["k4d_bias"], eps=1e-6)
    assert single.passed and [r[0] for r in single.rows] == ["k4d_bias"]
    bad = GradReport(1e-4, [("x", 3, 0.5, 1)])
    assert not bad.passed and bad.failures() == [("x", 3, 0.5, 1)]
    assert "FAIL" in str(bad)


def test_pack_unpack_round_trip():
    cfg = tiny_cfg()
    params = init_params(cfg, [4, 4])
    again = pack(*unpack(cfg, params))
    assert params.keys() == again.keys()
    assert all(np.array_equal(params[n], again[n]) for n in params)
    assert not any(".proj" in n for n in trainable_names(cfg, params))


def test_zero_steps_and_zero_lr():
    cfg = tiny_cfg()
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4, 4])
    out, trace = train(cfg, params, [sample], 0)
    assert len(trace) == 1
    assert all(np.array_equal(out[n], params[n]) for n in params)
    frozen = tiny_cfg(lr=0.0)
    _, trace = train(frozen, params, [sample], 4)
    assert len(set(trace)) == 1


def test_small_step_does_not_increase_loss():
    cfg = tiny_cfg(lr=1e-6)
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4, 4])
    _, trace = train(cfg, params, [sample], 1)
    assert trace[1] <= trace[0]


def test_training_is_deterministic():
    cfg = tiny_cfg(lr=1e-2)
    sample = tiny_sample(cfg)
    a, ta = train(cfg, init_params(cfg, [4, 4]), [sample], 3)
    b, tb = train(cfg, init_params(cfg, [4, 4]), [sample], 3)
    assert ta == tb
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_adam_first_step_size():
    opt = Adam(lr=0.1)
    params = {"w": np.array([1.0, -1.0])}
    opt.step(params, {"w": np.array([3.0, -0.5])})
    # bias-corrected first step moves every coordinate by lr in the gradient's sign
    np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-8)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    cfg = tiny_cfg()
    sample = tiny_sample(cfg)
    params = init_params(cfg, [4, 4])
    params["k4d_bias"] = np.array([np.nan])
    with pytest.raises(DivergenceError):
        forward_backward(cfg, params, sample)
    with pytest.raises(ValueError):
        train(cfg, params, [], 1)
