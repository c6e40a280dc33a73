"""Synthetic multi-domain dense-prediction world.

Ground truth is a 4-class per-pixel label map whose class regions follow
position priors (class 0 favours the top, 1 the bottom, 2 the left, 3 the
right) perturbed by smooth random fields. Pixels are coloured by class with
texture and noise, then pushed through a per-domain affine shift. Domain 0
belongs to the server; client domains are 1..D-1. Clients only ever see
2x2-average-pooled images with the labels dropped.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HIGH = "high"
LOW = "low"


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    scale: tuple[float, ...]
    bias: tuple[float, ...]
    noise: float

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = np.asarray(self.scale)[:, None, None]
        b = np.asarray(self.bias)[:, None, None]
        return s * image + b + self.noise * rng.standard_normal(image.shape)


# hand-picked "weather" shifts; domain 0 is the clean server domain.
# The client domains darken and tint towards blue by different amounts.
DEFAULT_SHIFTS = [
    ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
    ((0.9, 0.9, 0.9), (-0.1, -0.05, 0.12)),
    ((0.86, 0.86, 0.86), (-0.14, -0.02, 0.1)),
    ((0.93, 0.93, 0.93), (-0.06, -0.1, 0.15)),
]


def default_domains(num_domains: int, shift_strength: float = 1.0, noise: float = 0.25, seed: int = 0) -> list[DomainSpec]:
    """Domain specs; beyond the four presets, shifts are drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0xD0])
    out = []
    for d in range(num_domains):
        if d < len(DEFAULT_SHIFTS):
            sc, bi = DEFAULT_SHIFTS[d]
        else:
            sc = tuple(rng.uniform(0.5, 1.0, 3))
            bi = tuple(rng.uniform(-0.3, 0.5, 3))
        sc = tuple(1.0 + shift_strength * (v - 1.0) for v in sc)
        bi = tuple(shift_strength * v for v in bi)
        out.append(DomainSpec(d, sc, bi, noise))
    return out


@dataclass
class LabeledSample:
    sample_id: int
    domain_id: int
    image: np.ndarray
    label: np.ndarray
    resolution_tag: str = HIGH


@dataclass
class UnlabeledSample:
    sample_id: int
    domain_id: int
    image: np.ndarray
    resolution_tag: str = LOW


class LabeledSet:
    """Stacked labeled samples: images B x C x H x W, labels B x H x W."""

    def __init__(self, sample_ids, domain_ids, images, labels, resolution_tag=HIGH):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.domain_ids = np.asarray(domain_ids, dtype=np.int64)
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.resolution_tag = resolution_tag

    def __len__(self):
        return len(self.sample_ids)

    def subset(self, mask) -> "LabeledSet":
        return LabeledSet(self.sample_ids[mask], self.domain_ids[mask], self.images[mask], self.labels[mask], self.resolution_tag)

    def samples(self):
        for i in range(len(self)):
            yield LabeledSample(int(self.sample_ids[i]), int(self.domain_ids[i]), self.images[i], self.labels[i], self.resolution_tag)


class UnlabeledSet:
    """What a client holds: images and ids only. There is no label accessor."""

    def __init__(self, sample_ids, domain_ids, images, resolution_tag=LOW):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.domain_ids = np.asarray(domain_ids, dtype=np.int64)
        self.images = np.asarray(images, dtype=np.float64)
        self.resolution_tag = resolution_tag

    def __len__(self):
        return len(self.sample_ids)

    def samples(self):
        for i in range(len(self)):
            yield UnlabeledSample(int(self.sample_ids[i]), int(self.domain_ids[i]), self.images[i], self.resolution_tag)


# ---------------------------------------------------------------- frozen backbone


class FrozenBackbone:
    """Pointwise conv, relu, pointwise conv, then a frozen per-channel
    standardization. Everything is fixed at construction from ``seed``; the
    standardization statistics come from a seed-derived calibration batch of
    uniform random colours, not from any split of the data.

    Features keep the input's spatial size.
    """

    def __init__(self, in_channels: int = 3, out_channels: int = 8, hidden: int = 16, seed: int = 1234, zero_bias: bool = False):
        rng = np.random.default_rng([seed, 0xBB])
        self.seed = seed
        self.w1 = rng.standard_normal((hidden, in_channels)) * np.sqrt(2.0 / in_channels)
        self.b1 = np.zeros(hidden) if zero_bias else rng.uniform(-0.5, 0.5, hidden)
        self.w2 = rng.standard_normal((out_channels, hidden)) * np.sqrt(2.0 / hidden)
        self.b2 = np.zeros(out_channels) if zero_bias else rng.uniform(-0.5, 0.5, out_channels)
        self.shift = np.zeros(out_channels)
        self.gain = np.ones(out_channels)
        if not zero_bias:
            calib = rng.uniform(-0.5, 1.5, (in_channels, 4096))
            raw = self.w2 @ np.maximum(self.w1 @ calib + self.b1[:, None], 0.0) + self.b2[:, None]
            self.shift = -raw.mean(axis=1)
            self.gain = 1.0 / raw.std(axis=1)
        for a in self.arrays():
            a.setflags(write=False)

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w2.shape[0]

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.shift, self.gain]

    def num_params(self) -> int:
        return int(np.sum([a.size for a in self.arrays()]))

    def flops(self, height: int, width: int) -> int:
        px = height * width
        return 2 * px * (self.w1.size + self.w2.size)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def __call__(self, images) -> np.ndarray:
        return extract_features(self, images)


def extract_features(backbone: FrozenBackbone, images) -> np.ndarray:
    """C_in x H x W -> C x H x W, or B x C_in x H x W -> C x B x H x W."""
    x = np.asarray(images, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[1] != backbone.in_channels:
        raise ValueError(f"backbone expects {backbone.in_channels} input channels, got image shape {np.shape(images)}")
    B, C, H, W = x.shape
    flat = x.transpose(1, 0, 2, 3).reshape(C, -1)
    h = np.maximum(backbone.w1 @ flat + backbone.b1[:, None], 0.0)
    f = backbone.w2 @ h + backbone.b2[:, None]
    f = (f + backbone.shift[:, None]) * backbone.gain[:, None]
    f = f.reshape(backbone.out_channels, B, H, W)
    return f if batched else f[:, 0]


# ---------------------------------------------------------------- generation


@dataclass
class WorldConfig:
    num_domains: int = 4
    num_clients: int = 3
    server_size: int = 24
    client_size: int = 128
    test_per_domain: int = 16
    image_size: int = 16
    in_channels: int = 3
    feature_channels: int = 8
    num_classes: int = 4
    shift_strength: float = 1.0
    noise: float = 0.06
    texture: float = 0.08
    shade: float = 0.15
    seed: int = 0
    backbone_seed: int = 1234


@dataclass
class World:
    cfg: WorldConfig
    domains: list[DomainSpec]
    backbone: FrozenBackbone
    server: LabeledSet
    clients: list[UnlabeledSet]
    test: LabeledSet
    client_domains: list[int] = field(default_factory=list)


def _smooth_field(rng, n_fields, size, n_waves=3, max_freq=2.0):
    y, x = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    out = np.zeros((n_fields, size, size))
    for f in range(n_fields):
        for _ in range(n_waves):
            fy, fx = rng.uniform(-max_freq, max_freq, 2)
            ph = rng.uniform(0, 2 * np.pi)
            out[f] += np.cos(2 * np.pi * (fy * y + fx * x) + ph)
    return out / np.sqrt(n_waves)


# class colours in RGB-like space; well separated in domain 0
CLASS_COLOURS = np.array(
    [
        [0.2, 0.5, 1.0],
        [0.4, 0.35, 0.3],
        [1.0, 0.3, 0.2],
        [0.3, 0.9, 0.3],
    ]
)


def label_map(rng: np.random.Generator, size: int, num_classes: int = 4, prior: float = 2.0, wiggle: float = 0.9) -> np.ndarray:
    """Hidden position-dependent rule shared across domains."""
    if num_classes != 4:
        raise ValueError("the synthetic rule is defined for 4 classes")
    y, x = np.meshgrid((np.arange(size) + 0.5) / size - 0.5, (np.arange(size) + 0.5) / size - 0.5, indexing="ij")
    priors = prior * np.stack([-y, y, -x, x])
    scores = priors + wiggle * _smooth_field(rng, num_classes, size)
    return scores.argmax(axis=0).astype(np.uint8)


def render(rng: np.random.Generator, label: np.ndarray, texture: float = 0.15, shade: float = 0.3) -> np.ndarray:
    """Clean (domain-0) image for a label map: class colour + texture + vertical shading."""
    size = label.shape[0]
    img = CLASS_COLOURS[label].transpose(2, 0, 1).copy()
    img += texture * _smooth_field(rng, 3, size, max_freq=4.0)
    ys = (np.arange(size) + 0.5) / size - 0.5
    img += shade * ys[None, :, None]
    return img


def _make_labeled(rng, ids, domain: DomainSpec, cfg: WorldConfig):
    imgs, labs = [], []
    for _ in ids:
        lab = label_map(rng, cfg.image_size, cfg.num_classes)
        imgs.append(domain.apply(render(rng, lab, cfg.texture, cfg.shade), rng))
        labs.append(lab)
    return LabeledSet(ids, [domain.domain_id] * len(ids), np.stack(imgs), np.stack(labs), HIGH)


def downsample(sample):
    """2x2 average pooling of a high-res sample; labels are dropped."""
    if sample.resolution_tag != HIGH:
        raise ValueError("downsample expects a high-resolution sample")
    img = np.asarray(sample.image, dtype=np.float64)
    C, H, W = img.shape
    if H % 2 or W % 2:
        raise ValueError(f"downsample needs even spatial dims, got {H}x{W}")
    low = img.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
    return UnlabeledSample(sample.sample_id, sample.domain_id, low, LOW)


def downsample_images(images: np.ndarray) -> np.ndarray:
    B, C, H, W = images.shape
    if H % 2 or W % 2:
        raise ValueError(f"downsample needs even spatial dims, got {H}x{W}")
    return images.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def generate_world(cfg: WorldConfig | None = None, domains: list[DomainSpec] | None = None) -> World:
    """Server (domain 0, labeled, high-res), clients (one client domain each,
    round-robin, unlabeled, low-res), and a labeled high-res test set over all
    domains. Sample ids are globally unique.
    """
    cfg = cfg or WorldConfig()
    if cfg.num_domains < 2:
        raise ValueError("need at least 2 domains (one server, one client)")
    if min(cfg.server_size, cfg.client_size, cfg.test_per_domain, cfg.num_clients) < 1:
        raise ValueError("all split sizes must be positive")
    if cfg.image_size % 2:
        raise ValueError("image_size must be even")
    domains = domains or default_domains(cfg.num_domains, cfg.shift_strength, cfg.noise, cfg.seed)
    root = np.random.SeedSequence(cfg.seed)
    server_ss, test_ss, *client_ss = root.spawn(2 + cfg.num_clients)
    next_id = 0

    def ids(n):
        nonlocal next_id
        out = np.arange(next_id, next_id + n)
        next_id += n
        return out

    server = _make_labeled(np.random.default_rng(server_ss), ids(cfg.server_size), domains[0], cfg)
    clients, client_domains = [], []
    for i in range(cfg.num_clients):
        d = 1 + i % (cfg.num_domains - 1)
        hi = _make_labeled(np.random.default_rng(client_ss[i]), ids(cfg.client_size), domains[d], cfg)
        clients.append(UnlabeledSet(hi.sample_ids, hi.domain_ids, downsample_images(hi.images), LOW))
        client_domains.append(d)
    test_rng = np.random.default_rng(test_ss)
    parts = [_make_labeled(test_rng, ids(cfg.test_per_domain), domains[d], cfg) for d in range(cfg.num_domains)]
    test = LabeledSet(
        np.concatenate([p.sample_ids for p in parts]),
        np.concatenate([p.domain_ids for p in parts]),
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        HIGH,
    )
    backbone = FrozenBackbone(cfg.in_channels, cfg.feature_channels, seed=cfg.backbone_seed)
    return World(cfg, domains, backbone, server, clients, test, client_domains)


# ---------------------------------------------------------------- flat binary dump

MAGIC = b"FMXW"
VERSION = 1


def _write_set(buf, name: str, s):
    labeled = isinstance(s, LabeledSet)
    B, C, H, W = s.images.shape
    nb = name.encode()
    buf.write(struct.pack("<B", len(nb)) + nb)
    buf.write(struct.pack("<BBIIII", int(labeled), 1 if s.resolution_tag == HIGH else 0, B, C, H, W))
    buf.write(s.sample_ids.astype("<i8").tobytes())
    buf.write(s.domain_ids.astype("<i8").tobytes())
    buf.write(np.ascontiguousarray(s.images, dtype="<f8").tobytes())
    if labeled:
        buf.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def _read_set(buf):
    (n,) = struct.unpack("<B", buf.read(1))
    name = buf.read(n).decode()
    labeled, high, B, C, H, W = struct.unpack("<BBIIII", buf.read(18))
    sid = np.frombuffer(buf.read(8 * B), dtype="<i8").astype(np.int64)
    did = np.frombuffer(buf.read(8 * B), dtype="<i8").astype(np.int64)
    imgs = np.frombuffer(buf.read(8 * B * C * H * W), dtype="<f8").reshape(B, C, H, W).astype(np.float64)
    tag = HIGH if high else LOW
    if labeled:
        labs = np.frombuffer(buf.read(B * H * W), dtype=np.uint8).reshape(B, H, W).copy()
        return name, LabeledSet(sid, did, imgs, labs, tag)
    return name, UnlabeledSet(sid, did, imgs, tag)


def dump_world(world: World, path):
    """Layout (little-endian): magic "FMXW", u32 version, u64 backbone seed,
    u32 backbone hidden width, u32 set count; per set: u8 name length + name,
    u8 labeled, u8 high-res, u32 B, C, H, W, i64 sample ids[B], i64 domain
    ids[B], f64 images[B*C*H*W] row-major, then u8 labels[B*H*W] if labeled.
    Domain specs and world settings follow as a u32-length-prefixed repr.
    """
    buf = io.BytesIO()
    sets = [("server", world.server), ("test", world.test)] + [(f"client{i}", c) for i, c in enumerate(world.clients)]
    buf.write(MAGIC + struct.pack("<IQII", VERSION, world.backbone.seed, world.backbone.w1.shape[0], len(sets)))
    for name, s in sets:
        _write_set(buf, name, s)
    meta = repr({"cfg": vars(world.cfg), "domains": [vars(d) for d in world.domains], "client_domains": world.client_domains}).encode()
    buf.write(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(buf.getvalue())


def load_world(path) -> World:
    import ast

    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != MAGIC:
        raise ValueError(f"{path}: not a world dump")
    version, bb_seed, bb_hidden, nsets = struct.unpack("<IQII", buf.read(20))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    sets = dict(_read_set(buf) for _ in range(nsets))
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = ast.literal_eval(buf.read(mlen).decode())
    cfg = WorldConfig(**meta["cfg"])
    domains = [DomainSpec(**d) for d in meta["domains"]]
    backbone = FrozenBackbone(cfg.in_channels, cfg.feature_channels, hidden=bb_hidden, seed=bb_seed)
    clients = [sets[f"client{i}"] for i in range(nsets - 2)]
    return World(cfg, domains, backbone, sets["server"], clients, sets["test"], list(meta["client_domains"]))
