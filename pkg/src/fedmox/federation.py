"""Semi-supervised federated rounds: warm-up, sampling, local pseudo-label
training, weighted aggregation, soft mixture, server supervised training and
evaluation.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .accounting import comm_per_round, count_flops as analytic_flops
from .data import World, downsample_images, extract_features
from .moe import HeadConfig, TaskHead, expert_load
from .optim import OptimConfig
from .ssl import SSLConfig, client_local_train

log = logging.getLogger(__name__)


@dataclass
class FLConfig:
    num_clients: int = 3
    sample_ratio: float = 0.33
    rounds: int = 50
    warmup_epochs: int = 50
    server_epochs_per_round: int = 1
    alpha: float = 0.1
    aggregator: str = "fedavg"
    weighting: str = "participants"  # or "global": n_i / n over all clients
    use_clients: bool = True
    server_resolution: str = "high"
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ValueError(f"sample_ratio must lie in (0, 1], got {self.sample_ratio}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.aggregator != "fedavg":
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.weighting not in ("participants", "global"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.server_resolution not in ("high", "low"):
            raise ValueError(f"server_resolution must be 'high' or 'low', got {self.server_resolution!r}")
        if self.rounds < 0 or self.warmup_epochs < 0 or self.server_epochs_per_round < 0:
            raise ValueError("rounds and epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def clients_per_round(self) -> int:
        return num_sampled(self.num_clients, self.sample_ratio)


def num_sampled(n: int, ratio: float) -> int:
    """round-half-up(ratio * n), at least 1."""
    return max(1, int(np.floor(ratio * n + 0.5)))


# ---------------------------------------------------------------- rng streams

_INIT, _SAMPLER, _SERVER, _CLIENT, _WARMUP = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by (purpose, ...); unaffected by call order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------- state


@dataclass
class ClientRecord:
    client_id: int
    domain_id: int
    num_samples: int
    features: np.ndarray = field(repr=False)  # C x B x h x w, no labels


@dataclass
class FederationState:
    global_head: TaskHead
    prev_server_head: TaskHead
    clients: list[ClientRecord]
    server_ids: np.ndarray
    round: int = 0

    def __post_init__(self):
        ids = sorted(c.client_id for c in self.clients)
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        if any(c.num_samples <= 0 for c in self.clients):
            raise ValueError("every client needs at least one sample")

    @property
    def total_samples(self) -> int:
        return sum(c.num_samples for c in self.clients)

    def client(self, cid: int) -> ClientRecord:
        for c in self.clients:
            if c.client_id == cid:
                return c
        raise KeyError(cid)


@dataclass
class RoundMetrics:
    round: int
    per_domain_accuracy: dict
    total_accuracy: float
    server_loss: float
    mean_client_loss: float
    pseudo_coverage: dict
    expert_load: list
    params_communicated: int
    backbone_params_communicated: int
    flops_client_step: int
    participants: list
    backbone_hash: str

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_domain_accuracy"] = {str(k): v for k, v in self.per_domain_accuracy.items()}
        d["pseudo_coverage"] = {str(k): v for k, v in self.pseudo_coverage.items()}
        # NaN marks "no value this round" (no clients, no server epochs); JSON gets null
        for k in ("server_loss", "mean_client_loss"):
            if d[k] != d[k]:
                d[k] = None
        return d


METRIC_FIELDS = list(RoundMetrics.__dataclass_fields__)


# ---------------------------------------------------------------- server side


def _majority_pool(labels: np.ndarray, num_classes: int) -> np.ndarray:
    B, H, W = labels.shape
    blocks = labels.reshape(B, H // 2, 2, W // 2, 2)
    counts = np.stack([(blocks == c).sum(axis=(2, 4)) for c in range(num_classes)])
    return counts.argmax(axis=0).astype(np.uint8)


def supervised_train(
    head: TaskHead,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    opt_cfg: OptimConfig,
    rng: np.random.Generator,
    batch_size: int = 8,
    domain_id: int = 0,
) -> list[float]:
    """Cross-entropy training in place; returns the mean loss of each epoch.

    A fresh optimizer is built for every call.
    """
    n = features.shape[1]
    if n == 0:
        raise ValueError("server data is empty")
    opt = opt_cfg.build(head.parameters())
    epoch_losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = np.sort(order[start : start + batch_size])
            opt.zero_grad()
            logits = head.forward(features[:, idx], step_index=step, domain_id=domain_id)
            loss = T.cross_entropy(T.softmax_channel(logits), labels[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def warmup(head: TaskHead, features, labels, epochs: int, opt_cfg: OptimConfig, rng, batch_size: int = 8) -> tuple[TaskHead, list[float]]:
    """Supervised warm-up on labeled server data; returns (w0, per-epoch losses)."""
    if np.shape(features)[1] == 0:
        raise ValueError("server data is empty")
    w0 = head.copy()
    losses = supervised_train(w0, features, labels, epochs, opt_cfg, rng, batch_size)
    return w0, losses


def sample_clients(client_ids, sample_ratio: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement; independent of registration order."""
    ids = sorted(int(c) for c in client_ids)
    m = num_sampled(len(ids), sample_ratio)
    picked = rng.choice(len(ids), size=m, replace=False)
    return sorted(ids[i] for i in picked)


def _check_same_shapes(heads):
    ref = heads[0].state_dict()
    for h in heads[1:]:
        st = h.state_dict()
        for name, arr in ref.items():
            if name not in st:
                raise ValueError(f"parameter {name} missing from a model")
            if st[name].shape != arr.shape:
                raise ValueError(f"parameter {name}: shape {st[name].shape} vs {arr.shape}")
        if set(st) != set(ref):
            raise ValueError(f"unexpected parameters {sorted(set(st) - set(ref))}")


def aggregate_fedavg(heads, sizes, total: float | None = None) -> TaskHead:
    """Sample-weighted parameter average. Weights are n_i / sum(sizes), or
    n_i / ``total`` when given (the all-clients reading)."""
    heads = list(heads)
    sizes = [float(s) for s in sizes]
    if not heads or len(heads) != len(sizes):
        raise ValueError("need one size per model")
    if any(s <= 0 for s in sizes):
        raise ValueError("sizes must be positive")
    _check_same_shapes(heads)
    denom = float(sum(sizes)) if total is None else float(total)
    out = OrderedDict()
    states = [h.state_dict() for h in heads]
    for name in states[0]:
        acc = np.zeros_like(states[0][name])
        for st, n in zip(states, sizes):
            acc += (n / denom) * st[name]
        out[name] = acc
    return heads[0].copy().load_state_dict(out)


def soft_mixture(prev_server: TaskHead, aggregated: TaskHead, alpha: float) -> TaskHead:
    """alpha * prev_server + (1 - alpha) * aggregated, coordinatewise.

    The endpoints return exact copies of the corresponding input.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_same_shapes([prev_server, aggregated])
    if alpha == 0.0:
        return aggregated.copy()
    if alpha == 1.0:
        return prev_server.copy()
    a, b = prev_server.state_dict(), aggregated.state_dict()
    mixed = OrderedDict((k, alpha * a[k] + (1.0 - alpha) * b[k]) for k in a)
    return aggregated.copy().load_state_dict(mixed)


def evaluate(head, features: np.ndarray, labels: np.ndarray, domain_ids, domains=None) -> tuple[dict, float]:
    """Per-pixel accuracy per domain and pooled.

    ``head`` is a TaskHead or any callable mapping (features, domain_id) to a
    B x H x W class map. Domains listed in ``domains`` but absent from the
    data are omitted from the result rather than reported as 0.
    """
    domain_ids = np.asarray(domain_ids)
    wanted = sorted(set(domain_ids.tolist()) if domains is None else domains)
    per_domain, correct, total = {}, 0, 0
    for d in wanted:
        sel = np.flatnonzero(domain_ids == d)
        if sel.size == 0:
            continue
        f = features[:, sel]
        if isinstance(head, TaskHead):
            mode = "domain_assigned" if head.cfg.routing_mode == "domain_assigned" else "top1"
            pred = head.predict(f, mode=mode, domain_id=int(d))
        else:
            pred = head(f, int(d))
        hit = int((pred == labels[sel]).sum())
        per_domain[int(d)] = hit / labels[sel].size
        correct += hit
        total += labels[sel].size
    return per_domain, (correct / total if total else float("nan"))


# ---------------------------------------------------------------- the loop


@dataclass
class Federation:
    """Everything a run needs: configs, cached features, state."""

    fl: FLConfig
    ssl: SSLConfig
    head_cfg: HeadConfig
    opt: OptimConfig
    world: World
    state: FederationState
    server_feats: np.ndarray
    server_labels: np.ndarray
    test_feats: np.ndarray
    metrics: list = field(default_factory=list)
    warmup_losses: list = field(default_factory=list)


def build_federation(fl: FLConfig, ssl: SSLConfig, head_cfg: HeadConfig, opt: OptimConfig, world: World, client_order=None) -> Federation:
    """Extract features once, warm up the head and register clients.

    ``client_order`` permutes client registration (for order-independence checks).
    """
    if len(world.clients) != fl.num_clients:
        raise ValueError(f"world has {len(world.clients)} clients, config says {fl.num_clients}")
    bb = world.backbone
    if fl.server_resolution == "low":
        server_feats = extract_features(bb, downsample_images(world.server.images))
        server_labels = _majority_pool(world.server.labels, head_cfg.num_classes)
    else:
        server_feats = extract_features(bb, world.server.images)
        server_labels = world.server.labels
    test_feats = extract_features(bb, world.test.images)
    records = [
        ClientRecord(i, world.client_domains[i], len(c), extract_features(bb, c.images)) for i, c in enumerate(world.clients)
    ]
    if client_order is not None:
        records = [records[i] for i in client_order]
    init = TaskHead(head_cfg, stream(fl.seed, _INIT))
    w0, losses = warmup(init, server_feats, server_labels, fl.warmup_epochs, opt, stream(fl.seed, _WARMUP), fl.batch_size)
    state = FederationState(w0, w0.copy(), records, world.server.sample_ids)
    fed = Federation(fl, ssl, head_cfg, opt, world, state, server_feats, server_labels, test_feats, warmup_losses=losses)
    return fed


def _evaluate_metrics(fed: Federation, round_idx, server_loss, client_loss, coverage, participants, comm, backbone_comm) -> RoundMetrics:
    head = fed.state.global_head
    per_domain, total = evaluate(head, fed.test_feats, fed.world.test.labels, fed.world.test.domain_ids)
    _, load = expert_load([head.route(fed.test_feats)])
    low = fed.state.clients[0].features.shape[-2:] if fed.state.clients else fed.test_feats.shape[-2:]
    flops = analytic_flops(head, (head.cfg.in_channels, *low), "client").total_head
    return RoundMetrics(
        round=round_idx,
        per_domain_accuracy=per_domain,
        total_accuracy=total,
        server_loss=server_loss,
        mean_client_loss=client_loss,
        pseudo_coverage=coverage,
        expert_load=[float(v) for v in load],
        params_communicated=comm,
        backbone_params_communicated=backbone_comm,
        flops_client_step=int(flops),
        participants=participants,
        backbone_hash=fed.world.backbone.param_hash(),
    )


def initial_metrics(fed: Federation) -> RoundMetrics:
    """Round-0 record: evaluation of w0; the backbone is shipped once to every client."""
    loss = fed.warmup_losses[-1] if fed.warmup_losses else float("nan")
    bb = fed.world.backbone.num_params() * len(fed.state.clients)
    return _evaluate_metrics(fed, 0, loss, float("nan"), {}, [], 0, bb)


def run_round(fed: Federation) -> RoundMetrics:
    """One round: sample, local training, aggregation, soft mixture, server training, evaluation."""
    st, fl = fed.state, fed.fl
    t = st.round
    stage = "sample"
    try:
        coverage, client_losses, participants = {}, [], []
        if fl.use_clients:
            participants = sample_clients([c.client_id for c in st.clients], fl.sample_ratio, stream(fl.seed, _SAMPLER, t))
            stage = "local training"
            trained, sizes = [], []
            for cid in participants:
                rec = st.client(cid)
                head_i, rep = client_local_train(
                    st.global_head,
                    rec.features,
                    fed.ssl,
                    fed.opt,
                    stream(fl.seed, _CLIENT, cid, t),
                    batch_size=fl.batch_size,
                    domain_id=rec.domain_id,
                    client_id=cid,
                )
                trained.append(head_i)
                sizes.append(rec.num_samples)
                coverage[cid] = rep.coverage
                client_losses.append(rep.mean_loss)
            stage = "aggregation"
            total = st.total_samples if fl.weighting == "global" else None
            aggregated = aggregate_fedavg(trained, sizes, total=total)
            stage = "soft mixture"
            mixed = soft_mixture(st.prev_server_head, aggregated, fl.alpha)
        else:
            mixed = st.global_head.copy()
        stage = "server training"
        losses = supervised_train(
            mixed, fed.server_feats, fed.server_labels, fl.server_epochs_per_round, fed.opt, stream(fl.seed, _SERVER, t), fl.batch_size
        )
    except Exception as exc:
        raise RuntimeError(f"round {t + 1} failed during {stage}: {exc}") from exc
    st.global_head = mixed
    st.prev_server_head = mixed.copy()
    st.round = t + 1
    comm = comm_per_round(mixed, len(participants)) if participants else 0
    m = _evaluate_metrics(
        fed,
        st.round,
        losses[-1] if losses else float("nan"),
        float(np.mean(client_losses)) if client_losses else float("nan"),
        coverage,
        participants,
        comm,
        0,
    )
    fed.metrics.append(m)
    return m


@dataclass
class FederationResult:
    metrics: list
    head: TaskHead
    federation: Federation


def run_federation(fl: FLConfig, ssl: SSLConfig, head_cfg: HeadConfig, opt: OptimConfig, world: World, client_order=None, on_round=None) -> FederationResult:
    """Warm-up then ``fl.rounds`` rounds. Metrics start with the round-0 evaluation of w0."""
    fed = build_federation(fl, ssl, head_cfg, opt, world, client_order)
    m0 = initial_metrics(fed)
    fed.metrics.append(m0)
    if on_round:
        on_round(m0)
    for _ in range(fl.rounds):
        m = run_round(fed)
        log.debug("round %d total accuracy %.4f", m.round, m.total_accuracy)
        if on_round:
            on_round(m)
    return FederationResult(fed.metrics, fed.state.global_head, fed)
