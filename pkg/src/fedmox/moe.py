"""Sparse spatial mixture-of-experts task head.

A head is K identical experts (two pointwise conv layers with a relu between)
under a per-pixel router, followed by a shared pointwise output layer. The
router is a 1x1 convolution over channels, so it accepts any H x W; the
optional global router works on a flattened map of one fixed size and is kept
only to show why that does not work across resolutions.
"""
from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

ROUTING_MODES = ("top1", "dense", "dense_plus_top1", "domain_assigned")


@dataclass
class HeadConfig:
    in_channels: int = 8
    num_classes: int = 4
    num_experts: int = 3
    hidden: int | None = None  # default 2 * in_channels
    expert_out: int | None = None  # default in_channels
    routing_mode: str = "top1"
    gate_scaling: bool = True
    domain_experts: dict[int, int] = field(default_factory=dict)
    global_router_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.routing_mode not in ROUTING_MODES:
            raise ValueError(f"routing_mode must be one of {ROUTING_MODES}, got {self.routing_mode!r}")
        if self.hidden is None:
            self.hidden = 2 * self.in_channels
        if self.expert_out is None:
            self.expert_out = self.in_channels
        self.domain_experts = {int(k): int(v) for k, v in dict(self.domain_experts).items()}
        for d, e in self.domain_experts.items():
            if not 0 <= e < self.num_experts:
                raise ValueError(f"domain {d} assigned to expert {e}, but K={self.num_experts}")
        if self.global_router_size is not None:
            self.global_router_size = tuple(int(v) for v in self.global_router_size)

    def expert_for_domain(self, domain_id: int) -> int:
        """Assigned expert; domains without an explicit entry map to domain_id mod K."""
        return self.domain_experts.get(int(domain_id), int(domain_id) % self.num_experts)


def _init(rng: np.random.Generator, fan_out: int, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


class Expert:
    def __init__(self, prefix: str, c_in: int, hidden: int, c_out: int, rng):
        w1, b1 = _init(rng, hidden, c_in)
        w2, b2 = _init(rng, c_out, hidden)
        self.w1 = Parameter(w1, f"{prefix}.fc1.weight")
        self.b1 = Parameter(b1, f"{prefix}.fc1.bias")
        self.w2 = Parameter(w2, f"{prefix}.fc2.weight")
        self.b2 = Parameter(b2, f"{prefix}.fc2.bias")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x):
        return T.conv1x1(T.relu(T.conv1x1(x, self.w1, self.b1)), self.w2, self.b2)


class SpatialRouter:
    def __init__(self, prefix: str, c_in: int, k: int, rng):
        w, b = _init(rng, k, c_in)
        self.weight = Parameter(w, f"{prefix}.weight")
        self.bias = Parameter(b, f"{prefix}.bias")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight, self.bias]

    def logits(self, x):
        x = T.as_tensor(x)
        if x.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"router expects {self.weight.shape[1]} channels, input has shape {x.shape}")
        return T.conv1x1(x, self.weight, self.bias)


class GlobalRouter:
    """One routing decision per input from a flattened C*H0*W0 vector."""

    def __init__(self, prefix: str, size: int, k: int, rng):
        w, b = _init(rng, k, size)
        self.weight = Parameter(w, f"{prefix}.weight")
        self.bias = Parameter(b, f"{prefix}.bias")

    @property
    def input_size(self) -> int:
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class RoutingMap:
    """Per-pixel hard top-1 assignment. Arrays are K x (spatial...)."""

    onehot: np.ndarray
    probs: np.ndarray
    resolution_tag: str | None = None

    @property
    def num_experts(self) -> int:
        return self.onehot.shape[0]

    @property
    def index(self) -> np.ndarray:
        return self.onehot.argmax(axis=0)


def _hardmax(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # np.argmax returns the first maximum: ties go to the lowest expert index
    sel = scores.argmax(axis=0)
    onehot = np.zeros_like(scores)
    np.put_along_axis(onehot, sel[None], 1.0, axis=0)
    return sel, onehot


def route_spatial(x, router: SpatialRouter, resolution_tag: str | None = None) -> RoutingMap:
    """Route each pixel of a C x H x W (or C x B x H x W) map to one expert."""
    with T.no_grad():
        logits = router.logits(x)
        probs = T.softmax_channel(logits).data
    _, onehot = _hardmax(logits.data)
    return RoutingMap(onehot, probs, resolution_tag)


def route_global(x_flat, router: GlobalRouter) -> tuple[np.ndarray, np.ndarray]:
    """Return (onehot K, probs K) for one flattened input."""
    x = np.asarray(x_flat.data if isinstance(x_flat, Tensor) else x_flat, dtype=np.float64).ravel()
    if x.size != router.input_size:
        raise ShapeError(f"global router expects a flattened size of {router.input_size}, got {x.size}")
    scores = router.weight.data @ x + router.bias.data
    z = np.exp(scores - scores.max())
    _, onehot = _hardmax(scores[:, None])
    return onehot[:, 0], z / z.sum()


class MoELayer:
    def __init__(self, cfg: HeadConfig, rng):
        self.cfg = cfg
        self.experts = [
            Expert(f"moe.experts.{i}", cfg.in_channels, cfg.hidden, cfg.expert_out, rng) for i in range(cfg.num_experts)
        ]
        self.router = SpatialRouter("moe.router", cfg.in_channels, cfg.num_experts, rng)

    def parameters(self):
        out = []
        for e in self.experts:
            out.extend(e.parameters())
        return out + self.router.parameters()


def effective_mode(mode: str, step_index: int) -> str:
    if mode == "dense_plus_top1":
        return "dense" if step_index % 2 == 0 else "top1"
    return mode


def moe_forward(x, layer: MoELayer, step_index: int = 0, domain_id: int | None = None, mode: str | None = None) -> Tensor:
    """Mixture output, C_out x (spatial...), for channel-first input ``x``.

    top1 runs each expert only on the pixels routed to it; with gate scaling
    the selected output is multiplied by its router probability. dense mixes
    all experts by router probability. dense_plus_top1 alternates by step
    parity (dense on even). domain_assigned ignores the router.
    """
    cfg = layer.cfg
    x = T.as_tensor(x)
    if x.shape[0] != cfg.in_channels:
        raise ShapeError(f"MoE layer expects {cfg.in_channels} channels, input has shape {x.shape}")
    mode = effective_mode(mode or cfg.routing_mode, step_index)
    spatial = x.shape[1:]
    if mode == "domain_assigned":
        if domain_id is None:
            raise ValueError("domain_assigned routing needs a domain_id")
        with T.flop_scope("selected_expert"):
            return layer.experts[cfg.expert_for_domain(domain_id)](x)

    X = T.reshape(x, (x.shape[0], -1))
    P = X.shape[1]
    with T.flop_scope("routing"):
        logits = layer.router.logits(X)
    probs = T.softmax_channel(logits)
    K = cfg.num_experts

    if mode == "dense":
        out = None
        with T.flop_scope("dense_all_experts"):
            for k, expert in enumerate(layer.experts):
                term = T.mul(expert(X), T.row(probs, k))
                out = term if out is None else T.add(out, term)
        return T.reshape(out, (cfg.expert_out,) + spatial)

    sel = logits.data.argmax(axis=0)
    parts, idxs = [], []
    with T.flop_scope("selected_expert"):
        for k in range(K):
            idx = np.flatnonzero(sel == k)
            if idx.size == 0:
                continue
            if idx.size == P:
                y = layer.experts[k](X)
            else:
                y = layer.experts[k](T.take_columns(X, idx))
            if cfg.gate_scaling:
                y = T.mul(y, T.take_columns(T.row(probs, k), idx))
            parts.append(y)
            idxs.append(idx)
    if len(parts) == 1:
        out = parts[0]
    else:
        out = T.scatter_columns(parts, idxs, P)
    return T.reshape(out, (cfg.expert_out,) + spatial)


class TaskHead:
    """MoE layer + shared pointwise classifier; the only communicated model."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator | int | None = None):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.moe = MoELayer(cfg, rng)
        w, b = _init(rng, cfg.num_classes, cfg.expert_out)
        self.out_weight = Parameter(w, "out.weight")
        self.out_bias = Parameter(b, "out.bias")
        self.global_router = None
        if cfg.global_router_size is not None:
            h0, w0 = cfg.global_router_size
            self.global_router = GlobalRouter("global_router", cfg.in_channels * h0 * w0, cfg.num_experts, rng)

    def parameters(self) -> list[Parameter]:
        params = self.moe.parameters() + [self.out_weight, self.out_bias]
        if self.global_router is not None:
            params += self.global_router.parameters()
        return params

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((p.name, p.data.copy()) for p in self.parameters())

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != params[name].shape:
                raise ShapeError(f"{name}: expected shape {params[name].shape}, got {arr.shape}")
            params[name].data = arr.copy()
        return self

    def copy(self) -> "TaskHead":
        return TaskHead(self.cfg, rng=0).load_state_dict(self.state_dict())

    def forward(self, feats, mode: str | None = None, step_index: int = 0, domain_id: int | None = None) -> Tensor:
        """Class logits, num_classes x (spatial...)."""
        h = moe_forward(feats, self.moe, step_index=step_index, domain_id=domain_id, mode=mode)
        with T.flop_scope("shared"):
            return T.conv1x1(h, self.out_weight, self.out_bias)

    __call__ = forward

    def predict_proba(self, feats, mode: str | None = None, domain_id: int | None = None) -> np.ndarray:
        with T.no_grad():
            return T.softmax_channel(self.forward(feats, mode=mode, domain_id=domain_id)).data

    def predict(self, feats, mode: str | None = None, domain_id: int | None = None) -> np.ndarray:
        return self.predict_proba(feats, mode=mode, domain_id=domain_id).argmax(axis=0)

    def route(self, feats, resolution_tag: str | None = None) -> RoutingMap:
        return route_spatial(feats, self.moe.router, resolution_tag)

    def save(self, path):
        meta = asdict(self.cfg)
        meta["domain_experts"] = {str(k): v for k, v in self.cfg.domain_experts.items()}
        np.savez(path, __config__=np.array(json.dumps(meta)), **{k: v for k, v in self.state_dict().items()})

    @classmethod
    def load(cls, path) -> "TaskHead":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__config__"]))
            head = cls(HeadConfig(**meta), rng=0)
            head.load_state_dict({k: z[k] for k in z.files if k != "__config__"})
        return head


# ---------------------------------------------------------------- routing analysis


def expert_load(maps) -> tuple[np.ndarray, np.ndarray]:
    """Pixel counts and fractions per expert over a collection of maps."""
    maps = list(maps)
    if not maps:
        raise ValueError("expert_load needs at least one routing map")
    K = maps[0].num_experts
    counts = np.zeros(K, dtype=np.int64)
    for m in maps:
        if m.num_experts != K:
            raise ValueError(f"inconsistent expert counts: {K} vs {m.num_experts}")
        counts += m.onehot.reshape(K, -1).sum(axis=1).astype(np.int64)
    return counts, counts / counts.sum()


def expert_mean_location(maps) -> dict[str, list[tuple[float, float] | None]]:
    """Mean normalized pixel-centre location per expert, grouped by resolution tag.

    Pixel (h, w) of an H x W map sits at ((w + 0.5) / W, (h + 0.5) / H).
    Experts that received no pixels in a group are reported as None.
    Untagged maps are grouped by their ``HxW`` size.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("expert_mean_location needs at least one routing map")
    K = maps[0].num_experts
    acc: dict[str, np.ndarray] = {}
    for m in maps:
        if m.num_experts != K:
            raise ValueError(f"inconsistent expert counts: {K} vs {m.num_experts}")
        H, W = m.onehot.shape[-2:]
        tag = m.resolution_tag or f"{H}x{W}"
        ys = (np.arange(H) + 0.5) / H
        xs = (np.arange(W) + 0.5) / W
        oh = m.onehot.reshape(K, -1, H, W)
        a = acc.setdefault(tag, np.zeros((K, 3)))
        a[:, 0] += oh.sum(axis=(1, 2, 3))
        a[:, 1] += (oh * xs[None, None, None, :]).sum(axis=(1, 2, 3))
        a[:, 2] += (oh * ys[None, None, :, None]).sum(axis=(1, 2, 3))
    out = {}
    for tag, a in acc.items():
        out[tag] = [None if a[k, 0] == 0 else (float(a[k, 1] / a[k, 0]), float(a[k, 2] / a[k, 0])) for k in range(K)]
    return out


ROUTING_CSV_HEADER = "# fedmox routing v1"
ROUTING_COLUMNS = ["resolution_tag", "expert_id", "mean_x", "mean_y", "pixel_fraction"]


def routing_rows(maps) -> list[dict]:
    maps = list(maps)
    locs = expert_mean_location(maps)
    rows = []
    for tag, per_expert in locs.items():
        group = [m for m in maps if (m.resolution_tag or "{}x{}".format(*m.onehot.shape[-2:])) == tag]
        _, frac = expert_load(group)
        for k, loc in enumerate(per_expert):
            if loc is None:
                continue
            rows.append(
                {"resolution_tag": tag, "expert_id": k, "mean_x": float(loc[0]), "mean_y": float(loc[1]), "pixel_fraction": float(frac[k])}
            )
    return rows


def write_routing_csv(path, maps) -> list[dict]:
    rows = routing_rows(maps)
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(ROUTING_CSV_HEADER + "\n")
        w = csv.DictWriter(fh, fieldnames=ROUTING_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean_x": repr(r["mean_x"]), "mean_y": repr(r["mean_y"]), "pixel_fraction": repr(r["pixel_fraction"])})
    return rows


def read_routing_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append(
            {
                "resolution_tag": r["resolution_tag"],
                "expert_id": int(r["expert_id"]),
                "mean_x": float(r["mean_x"]),
                "mean_y": float(r["mean_y"]),
                "pixel_fraction": float(r["pixel_fraction"]),
            }
        )
    return rows
