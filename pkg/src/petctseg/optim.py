"""Adam optimizer with bias correction.

The update is theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with
epsilon added outside the square root. The optimizer owns gradient
clearing: after a step every parameter's grad is reset, so stale gradients
can never accumulate across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta parameters must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


class Adam:
    """First/second-moment adaptive steps over a fixed parameter list.

    Moment arrays live in ``m`` and ``v`` (parameter order), the step
    counter in ``t``; all three are exposed so checkpoints can save and
    restore optimizer state exactly.
    """

    def __init__(self, params: Sequence[Tensor], config: AdamConfig = AdamConfig()):
        self.params = list(params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} has no gradient; "
                                   "run backward() before step()")
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def load_state(self, m: Sequence[np.ndarray], v: Sequence[np.ndarray],
                   t: int) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ValueError("optimizer state length does not match parameter count")
        for slot, src in zip(self.m, m):
            if slot.shape != np.asarray(src).shape:
                raise ValueError("optimizer state shape mismatch")
            slot[...] = src
        for slot, src in zip(self.v, v):
            if slot.shape != np.asarray(src).shape:
                raise ValueError("optimizer state shape mismatch")
            slot[...] = src
        self.t = int(t)
