"""Backward pass through the whole matching pipeline, gradient checks and Adam training.

Parameters live in a flat ``ParamSet`` (name -> float64 array) so the
optimizer and the finite-difference checker can treat them uniformly:

* ``level{l}.k6d`` / ``level{l}.k6d_bias`` - 6D CHM kernel of level ``l``
* ``k4d`` / ``k4d_bias``                   - 4D refinement kernel
* ``level{l}.proj{s}.weight`` / ``.bias``  - 3x3 projection at scale ``s``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convengine import conv_backward, scale_maxpool_backward
from .flow import (
    epe_loss,
    form_flow,
    form_flow_backward,
    kernel_soft_argmax,
    kernel_soft_argmax_backward,
    transfer_keypoints,
    transfer_keypoints_backward,
)
from .kernels import SharedKernel
from .matching import (
    ChmStack,
    ProjectionParams,
    chmnet_forward,
    correlation_6d_backward,
    init_model,
    project_features_backward,
)

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


ParamSet = dict


def pack(stack, projections):
    """Flatten a stack and its projections into a ParamSet (arrays are copied)."""
    params = {}
    for l, k in enumerate(stack.kernels_6d):
        params[f"level{l}.k6d"] = k.params.copy()
        params[f"level{l}.k6d_bias"] = np.array([k.bias])
    params["k4d"] = stack.kernel_4d.params.copy()
    params["k4d_bias"] = np.array([stack.kernel_4d.bias])
    for l, theta in enumerate(projections):
        for s, (w, b) in enumerate(zip(theta.weights, theta.biases)):
            params[f"level{l}.proj{s}.weight"] = w.copy()
            params[f"level{l}.proj{s}.bias"] = b.copy()
    return params


def unpack(cfg, params):
    """Rebuild ``(stack, projections)`` from a ParamSet."""
    k6 = [
        SharedKernel(cfg.dims_6d, cfg.scheme, params[f"level{l}.k6d"], params[f"level{l}.k6d_bias"][0])
        for l in range(cfg.levels)
    ]
    k4 = SharedKernel(cfg.dims_4d, cfg.scheme, params["k4d"], params["k4d_bias"][0])
    projections = []
    for l in range(cfg.levels):
        ws = [params[f"level{l}.proj{s}.weight"] for s in range(cfg.S)]
        bs = [params[f"level{l}.proj{s}.bias"] for s in range(cfg.S)]
        projections.append(ProjectionParams(ws, bs))
    return ChmStack(k6, k4, cfg.engine), projections


def init_params(cfg, channels):
    stack, projections = init_model(cfg, channels)
    return pack(stack, projections)


def trainable_names(cfg, params):
    names = [n for n in params if ".proj" not in n]
    if cfg.train_projection:
        names += [n for n in params if ".proj" in n]
    return names


@dataclass
class Sample:
    """One training/eval pair: per-level source/target features and annotations."""

    src_levels: list
    trg_levels: list
    pair: object


def predict(cfg, params, sample):
    """Forward only: returns (predicted target keypoints in pixels, flow, ChmOutput)."""
    stack, projections = unpack(cfg, params)
    out = chmnet_forward(sample.src_levels, sample.trg_levels, stack, cfg, projections)
    flow = form_flow(kernel_soft_argmax(out.corr, cfg.sigma_g))
    return transfer_keypoints(flow, sample.pair, cfg.tau), flow, out


def loss_only(cfg, params, sample):
    pred, _, _ = predict(cfg, params, sample)
    return epe_loss(pred, sample.pair.trg_kps)[0]


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {name}")


def forward_backward(cfg, params, sample, names=None):
    """Loss of one sample and its gradient for every requested parameter.

    ``names`` defaults to ``trainable_names``. Backbone features are constants.
    """
    names = trainable_names(cfg, params) if names is None else list(names)
    stack, projections = unpack(cfg, params)
    out = chmnet_forward(sample.src_levels, sample.trg_levels, stack, cfg, projections, keep_cache=True)
    cache = out.cache
    probs = kernel_soft_argmax(out.corr, cfg.sigma_g)
    flow = form_flow(probs)
    pred, weights = transfer_keypoints(flow, sample.pair, cfg.tau, return_weights=True)
    loss, g_pred = epe_loss(pred, sample.pair.trg_kps)
    _check_finite("loss", np.array([loss]))

    grads = {}
    g_flow = transfer_keypoints_backward(weights, sample.pair, flow.shape[:2], g_pred)
    g_corr = kernel_soft_argmax_backward(out.corr, cfg.sigma_g, probs, form_flow_backward(probs, g_flow))
    g_up, grads["k4d"], b4 = conv_backward(cache["up"], stack.kernel_4d, g_corr, stack.engine)
    grads["k4d_bias"] = np.array([b4])
    act = cache["act"]
    g_fused = T.resize_4d_backward(g_up, act.shape) * act * (1.0 - act)

    want_proj = any(".proj" in n for n in names)
    for l, (lvl, k6, theta) in enumerate(zip(cache["levels"], stack.kernels_6d, projections)):
        g_c2 = scale_maxpool_backward(g_fused, lvl["argmax"], cfg.S)
        g_c1, grads[f"level{l}.k6d"], b6 = conv_backward(lvl["c1"], k6, g_c2, stack.engine)
        grads[f"level{l}.k6d_bias"] = np.array([b6])
        if want_proj:
            g_fs, g_ft = correlation_6d_backward(lvl["fs"], lvl["ft"], g_c1)
            gw_s, gb_s = project_features_backward(sample.src_levels[l], cfg, theta, g_fs)
            gw_t, gb_t = project_features_backward(sample.trg_levels[l], cfg, theta, g_ft)
            for s in range(cfg.S):
                grads[f"level{l}.proj{s}.weight"] = gw_s[s] + gw_t[s]
                grads[f"level{l}.proj{s}.bias"] = gb_s[s] + gb_t[s]
    grads = {n: grads[n] for n in names}
    for n, g in grads.items():
        _check_finite(f"gradient of {n}", g)
    return loss, grads


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def finite_difference(fn, x, eps=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of array ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        out.append((up - down) / (2 * eps))
    return np.array(out)


@dataclass
class GradReport:
    tol: float
    rows: list = field(default_factory=list)  # (name, n_checked, max_rel_err, worst_index)

    @property
    def passed(self):
        return all(r[2] < self.tol for r in self.rows)

    def failures(self):
        return [r for r in self.rows if r[2] >= self.tol]

    def __str__(self):
        lines = [f"{'parameter':<24} {'checked':>7} {'max rel err':>12}  status"]
        for name, n, err, _ in self.rows:
            lines.append(f"{name:<24} {n:>7} {err:>12.3e}  {'ok' if err < self.tol else 'FAIL'}")
        return "\n".join(lines)


def check_gradients(cfg, params, sample, names=None, eps=1e-5, tol=1e-4, max_entries=None, seed=0):
    """Compare analytic gradients with central finite differences.

    ``max_entries`` caps the number of randomly chosen entries checked per
    parameter (all entries by default).
    """
    names = trainable_names(cfg, params) if names is None else list(names)
    report = GradReport(tol)
    if not names:
        return report
    _, grads = forward_backward(cfg, params, sample, names)
    rng = np.random.default_rng(seed)
    work = {n: p.copy() for n, p in params.items()}
    for name in names:
        size = work[name].size
        idx = np.arange(size)
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        fd = finite_difference(lambda: loss_only(cfg, work, sample), work[name], eps, idx)
        err = relative_error(grads[name].reshape(-1)[idx], fd)
        worst = int(idx[err.argmax()])
        report.rows.append((name, len(idx), float(err.max()), worst))
    return report


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def batch_loss_and_grads(cfg, params, samples, names):
    total, acc = 0.0, {n: np.zeros_like(params[n]) for n in names}
    for sample in samples:
        loss, grads = forward_backward(cfg, params, sample, names)
        total += loss
        for n in names:
            acc[n] += grads[n]
    k = len(samples)
    return total / k, {n: g / k for n, g in acc.items()}


def train(cfg, params, samples, steps, optimizer=None, callback=None):
    """Full-batch Adam on the trainable parameters.

    Returns ``(params, trace)``; ``trace[i]`` is the batch loss before step i,
    with one extra entry for the final parameters.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    params = {n: p.copy() for n, p in params.items()}
    names = trainable_names(cfg, params)
    opt = optimizer or Adam.from_config(cfg)
    trace = []
    for step in range(steps):
        loss, grads = batch_loss_and_grads(cfg, params, samples, names)
        trace.append(loss)
        log.debug("step %d loss %.6f", step, loss)
        if callback is not None:
            callback(step, loss)
        opt.step(params, grads)
    final = np.mean([loss_only(cfg, params, s) for s in samples])
    if not np.isfinite(final):
        raise DivergenceError("loss diverged")
    trace.append(float(final))
    return params, trace
