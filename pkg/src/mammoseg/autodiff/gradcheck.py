"""Central-difference gradient checks for every layer kind.

Each suite builds a small 64-bit problem, contracts the layer output with a
fixed random cotangent so the scalar loss exercises every output element,
and compares the tape gradient against (f(x+h) - f(x-h)) / 2h.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor

H = 1e-4


KINK_MARGIN = 1e-2


def relative_error(analytic: np.ndarray, numeric: np.ndarray, ref_scale: Optional[float] = None,
                   scale_floor: float = 1e-3, floor: float = 1e-8) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, scale_floor * ref_scale, floor).

    ``ref_scale`` defaults to the largest magnitude in either array.  The
    floor keeps structurally zero entries (e.g. a bias feeding train-mode
    batchnorm) from dividing round-off noise by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if not a.size:
        return 0.0
    if ref_scale is None:
        ref_scale = max(np.abs(a).max(), np.abs(n).max())
    scale = ref_scale * scale_floor
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(scale, floor))
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(loss_fn: Callable[[], float], arr: np.ndarray, h: float = H,
                       indices: Optional[np.ndarray] = None,
                       skip_kinks: bool = False) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``arr`` (perturbed in place).

    With ``skip_kinks`` an entry whose +h and -h evaluations take different
    relu / max-pool branches is returned as NaN: the function is not smooth
    on that segment, so the difference quotient does not estimate the
    derivative there.
    """
    flat = arr.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        with F.record_decisions() as up_branches:
            flat[i] = orig + h
            up = loss_fn()
        with F.record_decisions() as down_branches:
            flat[i] = orig - h
            down = loss_fn()
        flat[i] = orig
        if skip_kinks and up_branches != down_branches:
            grad[i] = np.nan
        else:
            grad[i] = (up - down) / (2 * h)
    return grad.reshape(arr.shape)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    h: float = H, max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None,
                    skip_kinks: bool = False) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of
    ``tensors`` and be deterministic.  With ``max_entries`` only a random
    subset of each tensor's entries is probed.  ``skip_kinks`` drops probes
    that straddle a relu / max-pool branch change (see numerical_gradient).
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    ref_scale = max(float(np.abs(a).max()) for a in analytic)
    worst, probed = 0.0, 0
    for t, a in zip(tensors, analytic):
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(t.data.size, max_entries, replace=False))
        num = numerical_gradient(lambda: loss_fn().item(), t.data, h, idx, skip_kinks)
        if idx is not None:
            a, num = a.reshape(-1)[idx], num.reshape(-1)[idx]
        probed += int(np.count_nonzero(~np.isnan(num)))
        worst = max(worst, relative_error(a, num, ref_scale))
    if not probed:
        raise ValueError("every probe straddled a kink; nothing was checked")
    return worst


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _param(rng, shape, scale=1.0, offset=0.0):
    return Parameter(rng.standard_normal(shape) * scale + offset, dtype=np.float64)


def _contract(out: Tensor, cot: np.ndarray) -> Tensor:
    return (out * Tensor(cot)).sum()


def _suite_conv2d(rng):
    x, w, b = _leaf(rng, (2, 3, 7, 7)), _param(rng, (4, 3, 4, 4), 0.3), _param(rng, (4,))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    cot = rng.standard_normal(F.conv2d(x, w, b, stride, pad).shape)
    return lambda: _contract(F.conv2d(x, w, b, stride, pad), cot), [x, w, b]


def _suite_conv_transpose2d(rng):
    x, w, b = _leaf(rng, (2, 3, 4, 4)), _param(rng, (3, 2, 4, 4), 0.3), _param(rng, (2,))
    cot = rng.standard_normal(F.conv_transpose2d(x, w, b, 2, 1).shape)
    return lambda: _contract(F.conv_transpose2d(x, w, b, 2, 1), cot), [x, w, b]


def _suite_batchnorm_train(rng):
    x = _leaf(rng, (3, 2, 4, 4))
    g, b = _param(rng, (2,), 0.2, 1.0), _param(rng, (2,))
    cot = rng.standard_normal(x.shape)

    def f():
        rm, rv = np.zeros(2), np.ones(2)
        return _contract(F.batchnorm2d(x, g, b, rm, rv, True), cot)
    return f, [x, g, b]


def _suite_batchnorm_infer(rng):
    x = _leaf(rng, (2, 2, 4, 4))
    g, b = _param(rng, (2,), 0.2, 1.0), _param(rng, (2,))
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    cot = rng.standard_normal(x.shape)
    return lambda: _contract(F.batchnorm2d(x, g, b, rm, rv, False), cot), [x, g, b]


def _away_from_zero(rng, shape):
    # finite differences are meaningless within h of a ReLU kink
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < KINK_MARGIN, x + np.sign(x + 1e-30) * 2 * KINK_MARGIN, x)


def _elementwise(fn):
    def suite(rng):
        x = Tensor(_away_from_zero(rng, (2, 2, 5, 5)), requires_grad=True)
        cot = rng.standard_normal(x.shape)
        return lambda: _contract(fn(x), cot), [x]
    return suite


def _suite_softmax(rng):
    x = _leaf(rng, (5, 4))
    cot = rng.standard_normal(x.shape)
    return lambda: _contract(F.softmax_rows(x), cot), [x]


def _suite_maxpool(rng):
    # tiled 4/4 windows plus an overlapping 3/2 pool on the same input
    x = _leaf(rng, (2, 2, 8, 8))
    cot = rng.standard_normal((2, 2, 2, 2))
    cot2 = rng.standard_normal((2, 2, 3, 3))
    return lambda: _contract(F.maxpool2d(x, 4, 4), cot) + _contract(F.maxpool2d(x, 3, 2), cot2), [x]


def _suite_dropout(rng):
    x = _leaf(rng, (2, 2, 6, 6))
    cot = rng.standard_normal(x.shape)
    seed = int(rng.integers(2**31))
    return lambda: _contract(F.dropout(x, 0.5, np.random.default_rng(seed), True), cot), [x]


def _suite_dense(rng):
    x, w, b = _leaf(rng, (4, 6)), _param(rng, (3, 6)), _param(rng, (3,))
    cot = rng.standard_normal((4, 3))
    return lambda: _contract(F.dense(x, w, b), cot), [x, w, b]


def _suite_concat(rng):
    a, b = _leaf(rng, (2, 2, 3, 3)), _leaf(rng, (2, 3, 3, 3))
    cot = rng.standard_normal((2, 5, 3, 3))
    return lambda: _contract(F.concat([a, b], axis=1), cot), [a, b]


def _suite_composite(rng):
    # conv -> batchnorm -> leaky_relu -> sum on a 1x2x6x6 input
    def pre_activation():
        y = F.conv2d(x, w, b, 1, 1)
        return F.batchnorm2d(y, g, beta, np.zeros(3), np.ones(3), True)

    while True:
        x = _leaf(rng, (1, 2, 6, 6))
        w, b = _param(rng, (3, 2, 3, 3), 0.4), _param(rng, (3,))
        g, beta = _param(rng, (3,), 0.2, 1.0), _param(rng, (3,))
        if np.abs(pre_activation().data).min() > KINK_MARGIN:
            break
    return lambda: F.leaky_relu(pre_activation()).sum(), [x, w, b, g, beta]


LAYER_SUITES: Dict[str, Callable] = {
    "conv2d": _suite_conv2d,
    "conv_transpose2d": _suite_conv_transpose2d,
    "batchnorm2d_train": _suite_batchnorm_train,
    "batchnorm2d_infer": _suite_batchnorm_infer,
    "relu": _elementwise(F.relu),
    "leaky_relu": _elementwise(F.leaky_relu),
    "tanh": _elementwise(F.tanh),
    "sigmoid": _elementwise(F.sigmoid),
    "softmax_rows": _suite_softmax,
    "maxpool2d": _suite_maxpool,
    "dropout": _suite_dropout,
    "dense": _suite_dense,
    "concat": _suite_concat,
    "conv_bn_leaky_sum": _suite_composite,
}


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def run_layer_suites(seeds: Sequence[int] = range(20), tolerance: float = 1e-4,
                     names: Optional[Sequence[str]] = None) -> List[GradcheckResult]:
    results = []
    for name in names or LAYER_SUITES:
        worst = 0.0
        for seed in seeds:
            fn, tensors = LAYER_SUITES[name](np.random.default_rng([seed, zlib.crc32(name.encode())]))
            worst = max(worst, check_gradients(fn, tensors))
        results.append(GradcheckResult(name, worst, tolerance))
    return results
