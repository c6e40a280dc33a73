"""SGD with momentum and AdamW over named Parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Parameter


@dataclass
class OptimConfig:
    kind: str = "sgd_momentum"
    learning_rate: float = 0.02
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def build(self, params) -> "Optimizer":
        return Optimizer(self, params)


class Optimizer:
    """Stateful update rule over a fixed, ordered list of parameters.

    sgd_momentum follows the coupled form: g += wd*p; buf = mu*buf + g; p -= lr*buf.
    adamw uses decoupled decay: p -= lr*wd*p, then the bias-corrected Adam step.
    """

    def __init__(self, cfg: OptimConfig, params):
        self.cfg = cfg
        self.params: list[Parameter] = list(params)
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
        cfg = self.cfg
        self.t += 1
        for p in self.params:
            st = self.state.setdefault(p.name, {})
            g = p.grad
            if cfg.kind == "sgd_momentum":
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.data
                if cfg.momentum:
                    buf = st.get("momentum")
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    st["momentum"] = buf
                    g = buf
                if cfg.learning_rate:
                    p.data -= cfg.learning_rate * g
            else:
                m = st.get("m", np.zeros_like(p.data))
                v = st.get("v", np.zeros_like(p.data))
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                st["m"], st["v"] = m, v
                if not cfg.learning_rate:
                    continue
                m_hat = m / (1 - cfg.beta1**self.t)
                v_hat = v / (1 - cfg.beta2**self.t)
                p.data -= cfg.learning_rate * cfg.weight_decay * p.data
                p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
