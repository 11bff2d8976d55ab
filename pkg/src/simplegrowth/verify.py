"""Finite-difference verification of every differentiable component in float64.

Linear operations are probed through a fixed random projection with a large
step (central differences carry no truncation error for them), single layers
with a 2-point stencil and step 1e-5. Whole growth blocks and the model are
deep compositions whose smallest gradient entries sit near 1e-11; a 2-point
stencil cannot resolve those above its roundoff floor, so they use the
4-point stencil with step 1e-3. Ops are looked up through their modules at call time, so a
patched backward rule is picked up by the suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import growth as G
from . import layers as L
from . import tensor as T
from . import train as TR
from .model import SimpleGrowthConfig, SimpleGrowthModel
from .tensor import Tensor

LINEAR_TOL = 1e-10
LAYER_TOL = 1e-5
MODEL_TOL = 1e-4
LINEAR_STEP = 1e-3
STEP = 1e-5
DEEP_STEP = 1e-3
DEEP_ORDER = 4
DEEP_CHECKS = ("pattern_block_merge", "pattern_block_div", "convf")


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} max_rel_err={self.error:.3e} threshold={self.threshold:.0e} {status}"


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), dtype=np.float64)


def _project(y: Tensor, seed: int) -> Tensor:
    """sum(W * y) with a fixed random W: a linear scalar readout with no symmetric cancellations."""
    w = Tensor(np.random.default_rng(seed).uniform(-1, 1, y.shape), dtype=np.float64)
    return T.sum(T.mul(w, y))


def _linear_checks(rng) -> list:
    a, b = _rand(rng, 2, 3, 4, 5), _rand(rng, 2, 3, 4, 5)
    c = _rand(rng, 2, 2, 4, 5)
    return [
        ("add", lambda a, b: _project(T.add(a, b), 1), [a, b]),
        ("sub", lambda a, b: _project(T.sub(a, b), 2), [a, b]),
        ("mul_scalar", lambda a: _project(T.mul(a, 2.5), 3), [a]),
        ("sum", lambda a: T.sum(a), [a]),
        ("mean", lambda a: T.mean(a), [a]),
        ("reshape", lambda a: _project(T.reshape(a, (6, 20)), 4), [a]),
        ("transpose", lambda a: _project(T.transpose(a, (1, 0, 3, 2)), 5), [a]),
        ("roll", lambda a: _project(T.roll(T.roll(a, 2, 3), -3, 2), 6), [a]),
        ("concat", lambda a, c: _project(T.concat([a, c], 1), 7), [a, c]),
        ("slice_channels", lambda a: _project(T.slice_channels(a, 1, 3), 8), [a]),
        ("assign_channels", lambda a, c: _project(T.assign_channels(a, 0, 2, c), 9), [a, c]),
    ]


def _nonlinear_checks(rng) -> list:
    x = _rand(rng, 2, 3, 6, 6)
    y = _rand(rng, 2, 3, 6, 6)
    conv = L.init_params("conv2d", 3, 4, 3, 2, 1, seed=11, dtype=np.float64)
    convt = L.init_params("conv_transpose2d", 3, 4, 4, 2, 1, seed=12, dtype=np.float64)
    lin = L.init_params("linear", 5, 4, seed=13, dtype=np.float64)
    xl = _rand(rng, 3, 5)
    bn = L.init_params("batchnorm2d", 3, 3, dtype=np.float64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.uniform(-0.5, 0.5, 3)
    bn_eval = L.init_params("batchnorm2d", 3, 3, dtype=np.float64, mode=L.EVAL)
    bn_eval.running_mean.data[:] = rng.uniform(-0.2, 0.2, 3)
    bn_eval.running_var.data[:] = rng.uniform(0.5, 2.0, 3)

    xb = _rand(rng, 2, 4, 6, 6, lo=0.0, hi=1.0)
    merge = G.init_growth_block(G.MERGE, 4, 5, batchnorm=True, seed=21, dtype=np.float64)
    div = G.init_growth_block(G.DIV, 4, 3, batchnorm=False, seed=22, dtype=np.float64)
    env_conv = merge.compenv_conv
    convf = G.init_convf(4, 4, seed=23, dtype=np.float64)

    return [
        ("mul", lambda a, b: T.mean(T.mul(a, b)), [x, y]),
        ("tanh", lambda a: T.mean(T.tanh(T.mul(a, a))), [x]),
        ("sigmoid", lambda a: T.sum(T.sigmoid(a)), [x]),
        ("mse", lambda a, b: TR.mse(a, b), [x, y]),
        ("conv2d", lambda a, *_: _project(L.conv2d(a, conv), 31), [x, conv.weight, conv.bias]),
        ("conv_transpose2d", lambda a, *_: _project(L.conv_transpose2d(a, convt), 32),
         [x, convt.weight, convt.bias]),
        ("linear", lambda a, *_: _project(T.tanh(L.linear(a, lin)), 33), [xl, lin.weight, lin.bias]),
        ("batchnorm2d_train", lambda a, *_: _project(L.batchnorm2d(a, bn), 34), [x, bn.gamma, bn.beta]),
        ("batchnorm2d_eval", lambda a, *_: _project(L.batchnorm2d(a, bn_eval), 35),
         [x, bn_eval.gamma, bn_eval.beta]),
        ("compenv", lambda a, *_: _project(G.compenv(a, merge.topology, env_conv), 36),
         [xb, env_conv.weight, env_conv.bias]),
        ("pattern_block_merge", lambda a, *_: T.mean(G.pattern_block_forward(a, merge)),
         [xb, *merge.named_parameters().values()]),
        ("pattern_block_div", lambda a, *_: T.mean(G.pattern_block_forward(a, div)),
         [xb, *div.named_parameters().values()]),
        ("convf", lambda a, *_: _project(G.convf_forward(a, convf), 37),
         [xb, *convf.named_parameters().values()]),
    ]


def tiny_model_config(**overrides) -> SimpleGrowthConfig:
    """Smallest architecture exercising every component: 8x8 input, two levels, latent 8, f64."""
    opts = dict(image_size=8, channels=(3, 4, 4), latent_dim=8, convf_per_level=1,
                bn_enabled=True, dtype="float64", seed=5)
    opts.update(overrides)
    return SimpleGrowthConfig(**opts)


def _model_check(rng):
    model = SimpleGrowthModel(tiny_model_config())
    x = _rand(rng, 2, 3, 8, 8, lo=0.05, hi=0.95)
    target = Tensor(x.data.copy())
    f = lambda inp, *_: TR.mse(model.forward(inp, "train", seed=3), target)  # noqa: E731
    return f, [x, *model.parameters()]


def run_suite(max_model_coords: int = 12) -> list:
    """Run every check; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(20240601)
    results = []

    def timed(name, f: Callable, inputs, threshold, step, max_coords=None, order=2):
        start = time.perf_counter()
        err = T.gradcheck(f, inputs, step=step, max_coords=max_coords, order=order)
        results.append(CheckResult(name, err, threshold, time.perf_counter() - start))

    for name, f, inputs in _linear_checks(rng):
        timed(name, f, inputs, LINEAR_TOL, LINEAR_STEP)
    for name, f, inputs in _nonlinear_checks(rng):
        if name in DEEP_CHECKS:
            timed(name, f, inputs, LAYER_TOL, DEEP_STEP, order=DEEP_ORDER)
        else:
            timed(name, f, inputs, LAYER_TOL, STEP)
    f, inputs = _model_check(rng)
    timed("simplegrowth_tiny", f, inputs, MODEL_TOL, DEEP_STEP, max_coords=max_model_coords, order=DEEP_ORDER)
    return results
