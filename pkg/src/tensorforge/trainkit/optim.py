"""Optimizers driving the backend update kernels."""

from __future__ import annotations

from ..errors import ArgumentError, StateError
from ..tensor import Tensor


class Optimizer:
    def __init__(self, params, lr: float):
        if not lr > 0:
            raise ArgumentError(f"learning rate must be positive, got {lr}")
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.step_count = 0

    def _check(self):
        for p in self.params:
            if p.grad is None or not p.grad.alive:
                raise StateError(f"parameter {p.name or list(p.shape)} has no gradient buffer")

    def update(self) -> "Optimizer":
        self._check()
        self.step_count += 1
        for p in self.params:
            self._step(p)
        return self

    def _step(self, p: Tensor) -> None:
        raise NotImplementedError

    def clear_grads(self) -> "Optimizer":
        for p in self.params:
            if p.grad is not None and p.grad.alive:
                p.engine.fill_(p.grad, 0.0)
        return self

    def state_tensors(self) -> list[Tensor]:
        return []

    def delete(self) -> int:
        return sum(t.delete() for t in self.state_tensors() if t.alive)


class SGD(Optimizer):
    def _step(self, p):
        p.engine.sgd_step(p, p.grad, self.lr)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr)
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or not eps > 0:
            raise ArgumentError(f"adam: need 0 <= beta < 1 and eps > 0, got "
                                f"{beta1}, {beta2}, {eps}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments = [(p.engine.zeros(p.shape), p.engine.zeros(p.shape)) for p in self.params]
        self._slot = {id(p): i for i, p in enumerate(self.params)}

    def _step(self, p):
        m, v = self.moments[self._slot[id(p)]]
        p.engine.adam_step(p, p.grad, m, v, self.step_count, self.lr,
                           self.beta1, self.beta2, self.eps)

    def state_tensors(self):
        return [t for mv in self.moments for t in mv]


def make_optimizer(kind: str, params, lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ArgumentError(f"unknown optimizer {kind!r} (expected adam or sgd)")
