"""
Finite-difference checks of every analytic gradient in the package.

The error measure is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
per checked array (the full parameter vector for whole-model checks), i.e.
the worst absolute deviation relative to the gradient's own scale. Central
differences with ``h = 1e-5``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .nn import (
    BatchNorm,
    Linear,
    Model,
    ModelConfig,
    SelfAttentivePooling,
    l2_normalize,
    l2_normalize_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

H = 1e-5
TOLERANCE = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale < 1e-8:
        # gradient is identically zero; report the absolute deviation
        return float(np.max(np.abs(analytic - numeric)))
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _batch(rng, n, d, spread=1.0):
    return rng.normal(scale=spread, size=(n, d))


def check_loss(name, fn, n, d, rng) -> CheckResult:
    """``fn(a, b)`` returns ``(value, grad_a, grad_b)``."""
    a, b = _batch(rng, n, d), _batch(rng, n, d)
    _, ga, gb = fn(a, b)
    err = max(
        rel_error(ga, numeric_grad(lambda: fn(a, b)[0], a)),
        rel_error(gb, numeric_grad(lambda: fn(a, b)[0], b)),
    )
    return CheckResult(f"{name} N={n} D={d}", err)


def _out(fn):
    def wrapped(a, b):
        o = fn(a, b)
        return o.value, o.grad_a, o.grad_b
    return wrapped


def _kink_free_variance_batch(rng, n, d, eps=1e-4):
    # stds spread across both sides of the hinge, none within 1e-3 of it
    while True:
        a = rng.normal(size=(n, d)) * rng.uniform(0.2, 2.0, size=d)
        std = np.sqrt(a.var(axis=0, ddof=1) + eps)
        if np.all(np.abs(std - 1.0) > 1e-3):
            return a


def loss_checks(rng: np.random.Generator) -> list[CheckResult]:
    cfg = L.CompositeConfig()
    literal = L.InfoNceConfig(denominator="literal_within_view")
    results = []
    for n in (4, 8):
        for d in (8, 16):
            results.append(check_loss("info_nce", _out(lambda a, b: L.info_nce(a, b, cfg.info_nce)), n, d, rng))
            results.append(check_loss("info_nce[literal]", _out(lambda a, b: L.info_nce(a, b, literal)), n, d, rng))
            results.append(check_loss("barlow_twins", _out(lambda a, b: L.barlow_twins(a, b, cfg.barlow)), n, d, rng))
            results.append(check_loss("vicreg_invariance", L.vicreg_invariance, n, d, rng))
            results.append(check_loss(
                "vicreg_covariance",
                lambda a, b: (L.vicreg_covariance(a)[0] + L.vicreg_covariance(b)[0],
                              L.vicreg_covariance(a)[1], L.vicreg_covariance(b)[1]),
                n, d, rng))

            a = _kink_free_variance_batch(rng, n, d)
            g = L.vicreg_variance(a)[1]
            results.append(CheckResult(
                f"vicreg_variance N={n} D={d}",
                rel_error(g, numeric_grad(lambda: L.vicreg_variance(a)[0], a))))

            a, b = _kink_free_variance_batch(rng, n, d), _kink_free_variance_batch(rng, n, d)
            o = L.vicreg(a, b)
            f = lambda: L.vicreg(a, b).value  # noqa: E731
            results.append(CheckResult(
                f"vicreg N={n} D={d}",
                max(rel_error(o.grad_a, numeric_grad(f, a)), rel_error(o.grad_b, numeric_grad(f, b)))))
            for reg_name, reg in (("reg_y", L.reg_y), ("reg_z", L.reg_z)):
                o = reg(a, b, cfg)
                f = lambda: reg(a, b, cfg).value  # noqa: E731
                results.append(CheckResult(
                    f"{reg_name} N={n} D={d}",
                    max(rel_error(o.grad_a, numeric_grad(f, a)), rel_error(o.grad_b, numeric_grad(f, b)))))
    return results


def layer_checks(rng: np.random.Generator) -> list[CheckResult]:
    results = []
    n, d_in, d_out = 6, 8, 5

    def param_check(name, layer, forward, inputs, weights):
        """Loss = sum(weights * forward(inputs)); check input and every parameter."""
        def f():
            return float(np.sum(weights * forward()[0]))
        layer.zero_grad()
        out, cache = forward()
        dx = layer.backward(weights, cache)
        errs = [rel_error(dx, numeric_grad(f, inputs))]
        for k, p in layer.params.items():
            errs.append(rel_error(layer.grads[k], numeric_grad(f, p)))
        results.append(CheckResult(name, max(errs)))

    lin = Linear(d_in, d_out, rng)
    x = rng.normal(size=(n, d_in))
    param_check("linear", lin, lambda: lin.forward(x), x, rng.normal(size=(n, d_out)))

    bn = BatchNorm(d_in)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, d_in)
    bn.params["beta"][:] = rng.normal(size=d_in)
    x = rng.normal(size=(n, d_in))
    param_check("batchnorm[train]", bn, lambda: bn.forward(x, True, update_stats=False), x,
                rng.normal(size=(n, d_in)))
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2.0, d_in)
    param_check("batchnorm[eval]", bn, lambda: bn.forward(x, False), x, rng.normal(size=(n, d_in)))

    sap = SelfAttentivePooling(d_in, d_in, rng)
    h = rng.normal(size=(4, 8, d_in))
    param_check("sap", sap, lambda: (sap.forward(h)[0][0], sap.forward(h)[1]), h,
                rng.normal(size=(4, d_in)))

    # ReLU: keep inputs away from 0
    x = rng.normal(size=(n, d_in))
    x[np.abs(x) < 1e-2] += 0.1
    w = rng.normal(size=(n, d_in))
    dx = relu_backward(w, x)
    results.append(CheckResult("relu", rel_error(dx, numeric_grad(lambda: float(np.sum(w * relu(x))), x))))

    v = rng.normal(size=(n, d_in))
    w = rng.normal(size=(n, d_in))
    u, norms = l2_normalize(v)
    dv = l2_normalize_backward(w, u, norms)
    results.append(CheckResult(
        "l2_normalize", rel_error(dv, numeric_grad(lambda: float(np.sum(w * l2_normalize(v)[0])), v))))

    logits = rng.normal(size=(n, d_out))
    labels = rng.integers(0, d_out, size=n)
    _, dl = softmax_cross_entropy(logits, labels)
    results.append(CheckResult(
        "softmax_cross_entropy",
        rel_error(dl, numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits))))
    return results


def model_checks(rng: np.random.Generator) -> list[CheckResult]:
    """End-to-end: every parameter of a small model under each staged loss."""
    results = []
    cfg = ModelConfig(n_mels=6, hidden=(8,), rep_dim=8, proj_dim=16, seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(4, 8, 6))
    x2 = rng.normal(size=(4, 8, 6))
    comp = L.CompositeConfig()
    for name in L.LOSSES:
        model = Model(cfg)

        def total():
            y, z, _ = model.forward(x)
            y2, z2, _ = model.forward(x2)
            return L.compute_loss(name, y, y2, z, z2, comp).value

        model.zero_grad()
        y, z, c1 = model.forward(x)
        y2, z2, c2 = model.forward(x2)
        out = L.compute_loss(name, y, y2, z, z2, comp)
        model.backward(out.grad_y, out.grad_z, c1)
        model.backward(out.grad_y2, out.grad_z2, c2)
        # parameters before a BN (and shared biases under translation-invariant
        # losses) have exactly zero gradient, so compare the whole vector
        analytic = np.concatenate([g.ravel() for _, _, g in model.parameters()])
        numeric = np.concatenate([numeric_grad(total, p).ravel() for _, p, _ in model.parameters()])
        err = rel_error(analytic, numeric)
        results.append(CheckResult(f"model[{name}]", err))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return layer_checks(rng) + loss_checks(rng) + model_checks(rng)
