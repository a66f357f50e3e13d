# app/tools/optim.py
from typing import Iterable

import numpy as np

from app.tools.tensor import Parameter


class Adam:
    """
    Adaptive-moment gradient descent over a fixed list of Parameters.

    Every parameter steps at lr * scale; scales default to 1 and are set per
    group with `set_scale` (a zero scale freezes the group without touching
    its moment estimates).
    """

    def __init__(self, parameters: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.parameters = list(parameters)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.parameters]
        self._v = [np.zeros_like(p.value) for p in self.parameters]
        self._scale = [1.0] * len(self.parameters)
        self._index = {p.name: i for i, p in enumerate(self.parameters)}

    def set_scale(self, parameters: Iterable[Parameter], scale: float) -> None:
        if scale < 0:
            raise ValueError(f"step scale must be >= 0, got {scale}")
        for p in parameters:
            if p.name not in self._index:
                raise KeyError(f"parameter {p.name!r} is not managed by this optimizer")
            self._scale[self._index[p.name]] = float(scale)

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v, scale in zip(self.parameters, self._m, self._v, self._scale):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if scale:
                p.value -= self.lr * scale * (m / c1) / (np.sqrt(v / c2) + self.eps)
