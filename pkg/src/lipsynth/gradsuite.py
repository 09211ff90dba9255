"""The gradient verification suite: every layer primitive plus the
full-model micro-instance, each checked against central finite
differences.

Primitives run on random inputs of dims <= 8 at eps=1e-5.  The composed
model runs in eval mode (batch statistics held fixed; the train-mode
statistics path has its own primitive row) with parameters nudged off
their zero/one init points, at eps=2.5e-4 -- small enough to stay clear
of max-pool decision boundaries, large enough that near-zero gradient
coordinates sit above the round-off floor of the loss value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as tz
from .model import SpeechSynthesizer, loss, micro_config
from .tensor import Tensor, gradient_check

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-4


@dataclass
class CheckRow:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _corrupt_output(out):
    """Fault-injection hook: scales the upstream gradient by 1.01 so the
    analytic side of the named primitive's check is visibly wrong."""
    tensors = out if isinstance(out, tuple) else (out,)
    for t in tensors:
        if t.backward_fn is not None:
            orig = t.backward_fn
            t.backward_fn = (lambda bw: lambda g: bw(g * 1.01))(orig)
    return out


def _maybe_corrupt(name: str, corrupt: Optional[str], fn: Callable) -> Callable:
    if corrupt != name:
        return fn

    def wrapped(*args, **kwargs):
        return _corrupt_output(fn(*args, **kwargs))

    return wrapped


def _check_matmul(corrupt, rng):
    op = _maybe_corrupt("matmul", corrupt, tz.matmul)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    return gradient_check(lambda: tz.sum_(tz.mul(op(a, b), op(a, b))), [a, b])


def _check_conv3d(corrupt, rng):
    op = _maybe_corrupt("conv3d", corrupt, tz.conv3d)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
    w = Tensor(0.3 * rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    return gradient_check(
        lambda: tz.sum_(tz.mul(op(x, w, b, (1, 2, 2), (1, 0, 0)),
                               op(x, w, b, (1, 2, 2), (1, 0, 0)))), [x, w, b])


def _check_conv1d(corrupt, rng):
    op = _maybe_corrupt("conv1d", corrupt, tz.conv1d)
    x = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
    w = Tensor(0.3 * rng.standard_normal((3, 2, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    return gradient_check(
        lambda: tz.sum_(tz.mul(op(x, w, b, 1, 2), op(x, w, b, 1, 2))), [x, w, b])


def _check_maxpool3d(corrupt, rng):
    op = _maybe_corrupt("maxpool3d", corrupt, tz.maxpool3d)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    return gradient_check(
        lambda: tz.sum_(tz.mul(op(x, (1, 2, 2), (1, 2, 2)),
                               op(x, (1, 2, 2), (1, 2, 2)))), [x])


def _check_batchnorm_train(corrupt, rng):
    op = _maybe_corrupt("batchnorm-train", corrupt, tz.batchnorm)
    x = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
    gamma = Tensor(1.0 + 0.2 * rng.standard_normal(4), requires_grad=True)
    beta = Tensor(0.1 * rng.standard_normal(4), requires_grad=True)
    probe = Tensor(rng.standard_normal((4, 7)))
    return gradient_check(
        lambda: tz.sum_(tz.mul(op(x, gamma, beta, np.zeros(4), np.ones(4),
                                  training=True), probe)),
        [x, gamma, beta])


def _check_lstm_cell(corrupt, rng):
    op = _maybe_corrupt("lstm_cell", corrupt, tz.lstm_cell)
    s = 0.5
    x = Tensor(s * rng.standard_normal((1, 5)), requires_grad=True)
    h = Tensor(s * rng.standard_normal((1, 3)), requires_grad=True)
    c = Tensor(s * rng.standard_normal((1, 3)), requires_grad=True)
    w_ih = Tensor(s * rng.standard_normal((5, 12)), requires_grad=True)
    w_hh = Tensor(s * rng.standard_normal((3, 12)), requires_grad=True)
    b = Tensor(s * rng.standard_normal(12), requires_grad=True)

    def f():
        hh, cc = op(x, h, c, w_ih, w_hh, b)
        return tz.sum_(tz.mul(tz.concat([hh, cc], axis=1),
                              tz.concat([hh, cc], axis=1)))

    return gradient_check(f, [x, h, c, w_ih, w_hh, b])


def _check_activations(corrupt, rng):
    op = _maybe_corrupt("activations", corrupt, tz.activation)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    worst = 0.0
    for kind, axis in (("relu", None), ("tanh", None), ("sigmoid", None),
                       ("softmax", 1)):
        err = gradient_check(
            lambda: tz.sum_(tz.mul(op(x, kind, axis=axis), op(x, kind, axis=axis))),
            [x])
        worst = max(worst, err)
    return worst


def _check_linear(corrupt, rng):
    op = _maybe_corrupt("linear", corrupt, tz.linear)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    return gradient_check(
        lambda: tz.sum_(tz.mul(op(x, w, b), op(x, w, b))), [x, w, b])


_PRIMITIVE_CHECKS = {
    "matmul": _check_matmul,
    "conv3d": _check_conv3d,
    "conv1d": _check_conv1d,
    "maxpool3d": _check_maxpool3d,
    "batchnorm-train": _check_batchnorm_train,
    "lstm_cell": _check_lstm_cell,
    "activations": _check_activations,
    "linear": _check_linear,
}


def check_full_model(corrupt: Optional[str] = None, seed: int = 7) -> float:
    """Finite-difference check of the entire network on the micro config:
    8x8 frames, n=3 encoder steps, m=2 target frames, 64-bit, dropout off."""
    cfg = micro_config()
    cfg.seed = seed
    model = SpeechSynthesizer(cfg).eval()
    nudge = np.random.default_rng(seed + 500)
    for p in model.params.values():
        p.data = p.data + nudge.uniform(-0.02, 0.02, p.data.shape)
    frames = np.random.default_rng(seed).random((1, 3, 8, 8))
    target = 0.5 * np.random.default_rng(seed + 1).standard_normal((2, cfg.n_mels))

    loss_fn = _maybe_corrupt("full-model", corrupt, loss)

    def f():
        out = model.forward_teacher_forced(frames, target, tf_ratio=1.0)
        return loss_fn(out.o_dec, out.o_post, target)

    return gradient_check(f, list(model.params.values()), eps=2.5e-4)


def run_suite(corrupt: Optional[str] = None, seed: int = 42) -> list[CheckRow]:
    """One row per primitive plus one full-model row.

    `corrupt` names a row whose backward rule is deliberately broken
    (fault injection for testing the suite itself).
    """
    rows = []
    for name, check in _PRIMITIVE_CHECKS.items():
        rng = np.random.default_rng(seed)
        rows.append(CheckRow(name=name, error=float(check(corrupt, rng)),
                             tolerance=PRIMITIVE_TOL))
    rows.append(CheckRow(name="full-model", error=float(check_full_model(corrupt)),
                         tolerance=MODEL_TOL))
    return rows
