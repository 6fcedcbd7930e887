"""Adam and RMSProp-with-momentum over named parameters.

Optimizers never touch ``grad``; callers zero gradients between steps.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, List, Sequence

import numpy as np

from ..errors import ContractViolation
from .tensor import Parameter


class Optimizer:
    slots: tuple = ()

    def __init__(self, params: Sequence[Parameter]):
        self.params: List[Parameter] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ContractViolation("optimizer parameters need unique names")
        self.t = 0
        self.state: Dict[str, Dict[str, np.ndarray]] = {
            p.name: {s: np.zeros_like(p.data) for s in self.slots} for p in self.params
        }

    def _moments(self, p: Parameter) -> Dict[str, np.ndarray]:
        try:
            slots = self.state[p.name]
        except KeyError:
            raise ContractViolation(f"no optimizer state for parameter {p.name!r}") from None
        for s in self.slots:
            if s not in slots:
                raise ContractViolation(f"missing {s} moment for parameter {p.name!r}")
            if slots[s].shape != p.shape:
                raise ContractViolation(f"{s} moment shape {slots[s].shape} != {p.shape} for {p.name!r}")
        return slots

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            self._update(p, self._moments(p))

    def _update(self, p: Parameter, slots: Dict[str, np.ndarray]) -> None:  # pragma: no cover
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for p in self.params:
            for s in self.slots:
                out[f"{p.name}.{s}"] = self.state[p.name][s]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], t: int) -> None:
        for p in self.params:
            for s in self.slots:
                key = f"{p.name}.{s}"
                if key not in state:
                    raise ContractViolation(f"optimizer state lacks {key}")
                self.state[p.name][s] = np.asarray(state[key], dtype=p.dtype).copy()
        self.t = int(t)


class Adam(Optimizer):
    slots = ("m", "v")

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def _update(self, p, slots):
        g = p.grad
        m, v = slots["m"], slots["v"]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * (g * g)
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        p.data = p.data - step.astype(p.dtype, copy=False)


class RMSProp(Optimizer):
    """Squared-gradient average with a heavy-ball momentum buffer.

    v <- a*v + (1-a)*g^2;  buf <- mu*buf + g / sqrt(v + eps);  w <- w - lr*buf

    eps sits inside the root (the TensorFlow convention).  That floors the
    denominator at sqrt(eps), so a near-zero loss, which shrinks v, cannot
    turn the next larger gradient into a huge momentum-amplified step.
    """

    slots = ("square_avg", "momentum_buffer")

    def __init__(self, params, lr: float = 1e-3, alpha: float = 0.9,
                 momentum: float = 0.9, eps: float = 1e-7):
        super().__init__(params)
        self.lr, self.alpha, self.momentum, self.eps = lr, alpha, momentum, eps

    def _update(self, p, slots):
        g = p.grad
        v, buf = slots["square_avg"], slots["momentum_buffer"]
        v *= self.alpha
        v += (1 - self.alpha) * (g * g)
        buf *= self.momentum
        buf += g / np.sqrt(v + self.eps)
        p.data = p.data - (self.lr * buf).astype(p.dtype, copy=False)


def make_optimizer(kind: str, params, **hyper) -> Optimizer:
    if kind == "adam":
        return Adam(params, **hyper)
    if kind in ("rmsprop", "rmsprop_momentum"):
        return RMSProp(params, **hyper)
    raise ContractViolation(f"unknown optimizer kind {kind!r}")
