"""Client-side pseudo-label training against a frozen teacher."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .moe import TaskHead
from .optim import OptimConfig

log = logging.getLogger(__name__)


@dataclass
class SSLConfig:
    confidence_threshold: float = 0.9
    unsup_weight: float = 4.0
    prox_mu: float = 0.0
    local_epochs: int = 1

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(f"confidence_threshold must lie in [0, 1], got {self.confidence_threshold}")
        if self.unsup_weight < 0:
            raise ValueError("unsup_weight must be non-negative")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be non-negative")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be non-negative")


@dataclass
class PseudoLabelBatch:
    targets: np.ndarray
    mask: np.ndarray
    max_prob: np.ndarray

    @property
    def coverage(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def take(self, idx) -> "PseudoLabelBatch":
        """Select samples along the batch axis (axis 0 of the spatial layout)."""
        return PseudoLabelBatch(self.targets[idx], self.mask[idx], self.max_prob[idx])


def client_mode(head: TaskHead) -> str:
    # clients always route sparsely; only domain assignment bypasses the router
    return "domain_assigned" if head.cfg.routing_mode == "domain_assigned" else "top1"


def generate_pseudo_labels(teacher: TaskHead, features, threshold: float, domain_id: int | None = None) -> PseudoLabelBatch:
    """Per-pixel argmax of the teacher's softmax, kept where max prob >= threshold.

    Thresholds above 1 are allowed and keep nothing.
    """
    if not threshold >= 0.0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    probs = teacher.predict_proba(features, mode=client_mode(teacher), domain_id=domain_id)
    max_prob = probs.max(axis=0)
    return PseudoLabelBatch(probs.argmax(axis=0), max_prob >= threshold, max_prob)


def unsupervised_loss(student_logits, batch: PseudoLabelBatch, unsup_weight: float) -> T.Tensor:
    """unsup_weight * masked mean cross-entropy against the pseudo targets (0 on an empty mask)."""
    probs = T.softmax_channel(student_logits)
    ce = T.cross_entropy(probs, batch.targets, weight=batch.mask.astype(np.float64))
    return T.scale(ce, unsup_weight)


def proximal_term(params, reference: dict, mu: float) -> T.Tensor:
    """(mu / 2) * sum of squared distances to the reference parameters."""
    total = None
    for p in params:
        d = T.add(p, -reference[p.name])
        sq = T.sum(T.mul(d, d))
        total = sq if total is None else T.add(total, sq)
    return T.scale(total, mu / 2.0)


@dataclass
class ClientReport:
    client_id: int
    coverage: float
    mean_loss: float
    steps: int
    warning: str | None = None


def client_local_train(
    global_head: TaskHead,
    features: np.ndarray,
    cfg: SSLConfig,
    opt_cfg: OptimConfig,
    rng: np.random.Generator,
    batch_size: int = 8,
    domain_id: int | None = None,
    client_id: int = -1,
) -> tuple[TaskHead, ClientReport]:
    """Train a copy of the broadcast head on pseudo-labels from the broadcast head.

    ``features`` are the client's low-resolution feature maps, C x B x H x W.
    The broadcast head itself is never modified.
    """
    student = global_head.copy()
    n = features.shape[1] if features.ndim == 4 else 0
    if n == 0:
        msg = f"client {client_id} has no data; returning the broadcast head"
        log.warning(msg)
        return student, ClientReport(client_id, 0.0, 0.0, 0, warning=msg)
    teacher = global_head
    pseudo = generate_pseudo_labels(teacher, features, cfg.confidence_threshold, domain_id)
    # pseudo arrays are B x H x W
    reference = global_head.state_dict() if cfg.prox_mu > 0 else None
    params = student.parameters()
    opt = opt_cfg.build(params)
    mode = client_mode(student)
    losses = []
    step = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start : start + batch_size])
            opt.zero_grad()
            logits = student.forward(features[:, idx], mode=mode, step_index=step, domain_id=domain_id)
            loss = unsupervised_loss(logits, pseudo.take(idx), cfg.unsup_weight)
            if reference is not None:
                loss = T.add(loss, proximal_term(params, reference, cfg.prox_mu))
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return student, ClientReport(client_id, pseudo.coverage, mean_loss, step)
