"""Central finite-difference check of task-head gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .moe import HeadConfig, TaskHead


@dataclass
class GradcheckResult:
    worst_path: str
    worst_index: tuple
    worst_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error < self.tolerance

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} gradcheck: {self.checked} coordinates, worst relative error "
            f"{self.worst_error:.3e} at {self.worst_path}{list(self.worst_index)} (tolerance {self.tolerance:g})"
        )


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def head_loss(head: TaskHead, feats, labels, mode: str | None = None, step_index: int = 0) -> T.Tensor:
    logits = head.forward(feats, mode=mode, step_index=step_index, domain_id=1)
    return T.cross_entropy(T.softmax_channel(logits), labels)


def check_head(
    head: TaskHead,
    feats: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    mode: str | None = None,
    loss_fn=None,
) -> GradcheckResult:
    """Compare autodiff against (f(p+h) - f(p-h)) / 2h for every coordinate.

    Hard routing makes the loss piecewise smooth; a coordinate whose
    perturbation flips a routing decision would show a large error, so
    the default toy input keeps router margins well above h.
    """
    loss_fn = loss_fn or head_loss
    params = head.parameters()
    for p in params:
        p.zero_grad()
    loss_fn(head, feats, labels, mode).backward()
    grads = {p.name: p.grad.copy() for p in params}
    worst = ("", (), 0.0)
    n = 0
    with T.no_grad():
        for p in params:
            for idx in np.ndindex(p.data.shape):
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = loss_fn(head, feats, labels, mode).item()
                p.data[idx] = orig - h
                down = loss_fn(head, feats, labels, mode).item()
                p.data[idx] = orig
                err = relative_error((up - down) / (2 * h), grads[p.name][idx])
                n += 1
                if err > worst[2] or not np.isfinite(err):
                    worst = (p.name, idx, float(err))
    return GradcheckResult(worst[0], worst[1], worst[2], n, tol)


def kink_margin(head: TaskHead, feats: np.ndarray) -> float:
    """Smallest distance of any relu input or router top-2 gap from a kink."""
    x = feats.reshape(feats.shape[0], -1)
    gaps = []
    for e in head.moe.experts:
        gaps.append(np.abs(e.w1.data @ x + e.b1.data[:, None]).min())
    if head.cfg.num_experts > 1:
        logits = np.sort(head.moe.router.weight.data @ x + head.moe.router.bias.data[:, None], axis=0)
        gaps.append((logits[-1] - logits[-2]).min())
    return float(min(gaps))


def toy_problem(seed: int = 0, num_experts: int = 3, channels: int = 4, size: int = 4, batch: int = 2, gate_scaling: bool = True, margin: float = 1e-3):
    """A small head (well under 2k parameters) with random features and labels in [-1, 1].

    Features are redrawn until every relu input and routing decision sits at
    least ``margin`` from its kink, where finite differences are meaningless.
    """
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(in_channels=channels, num_classes=4, num_experts=num_experts, gate_scaling=gate_scaling)
    head = TaskHead(cfg, rng)
    for p in head.parameters():
        p.data[...] = rng.uniform(-1, 1, p.data.shape)
    feats = rng.uniform(-1, 1, (channels, batch, size, size))
    while kink_margin(head, feats) < margin:
        feats = rng.uniform(-1, 1, (channels, batch, size, size))
    labels = rng.integers(0, cfg.num_classes, (batch, size, size))
    return head, feats, labels


def run_gradcheck(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> list[GradcheckResult]:
    """The suite behind the gradcheck command: every routing mode on a toy head."""
    results = []
    for mode in ("top1", "dense", "domain_assigned"):
        head, feats, labels = toy_problem(seed)
        results.append(check_head(head, feats, labels, h=h, tol=tol, mode=mode))
    head, feats, labels = toy_problem(seed, gate_scaling=False)
    results.append(check_head(head, feats, labels, h=h, tol=tol, mode="top1"))
    return results
