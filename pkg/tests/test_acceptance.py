"""End-to-end acceptance checks, one test per criterion.

The directional checks (7, 8, 11) train many small federations; expect a few
minutes on one core. Each test prints a single PASS/FAIL line.
"""

import functools
import itertools
import json
import time

import numpy as np
import pytest

from fedmox import tensor as T
from fedmox.accounting import count_flops, measure_flops
from fedmox.data import FrozenBackbone, WorldConfig, generate_world
from fedmox.federation import (
    FLConfig,
    aggregate_fedavg,
    build_federation,
    run_federation,
    run_round,
    soft_mixture,
)
from fedmox.gradcheck import check_head, toy_problem
from fedmox.moe import GlobalRouter, HeadConfig, SpatialRouter, TaskHead, moe_forward, route_global, route_spatial
from fedmox.optim import OptimConfig
from fedmox.ssl import SSLConfig, generate_pseudo_labels
from fedmox.tensor import ShapeError

SEEDS = range(5)


@functools.lru_cache(maxsize=None)
def world(seed):
    return generate_world(WorldConfig(seed=seed))


@functools.lru_cache(maxsize=None)
def final_accuracy(seed, data_seed, rounds, num_experts=3, alpha=0.1, use_clients=True, resolution="high"):
    fl = FLConfig(rounds=rounds, alpha=alpha, use_clients=use_clients, server_resolution=resolution, seed=seed)
    res = run_federation(fl, SSLConfig(), HeadConfig(num_experts=num_experts), OptimConfig(), world(data_seed))
    return res.metrics[-1].total_accuracy


def median_acc(rounds, fixed_data_seed=None, **kw):
    return float(np.median([final_accuracy(s, s if fixed_data_seed is None else fixed_data_seed, rounds, **kw) for s in SEEDS]))


# 1


def test_c01_gradient_fidelity(verdict):
    t = time.time()
    head, feats, labels = toy_problem(0, num_experts=3, channels=8)
    results = [check_head(head, feats, labels, mode=m) for m in ("top1", "dense", "domain_assigned")]
    elapsed = time.time() - t
    worst = max(results, key=lambda r: r.worst_error)
    ok = head.num_params() <= 2000 and all(r.passed for r in results) and elapsed < 120
    verdict("1 gradient fidelity", ok, f"{head.num_params()} params, worst {worst.worst_error:.2e} at {worst.worst_path}, {elapsed:.1f}s")
    assert ok


# 2


def test_c02_fedavg_oracle(verdict):
    rng = np.random.default_rng(2)
    cfg = HeadConfig(num_experts=3)
    heads = [TaskHead(cfg, int(s)) for s in rng.integers(0, 10**6, 5)]
    sizes = rng.integers(1, 500, 5)
    out = aggregate_fedavg(heads, sizes).state_dict()
    total = 0
    for s in sizes:
        total += int(s)
    worst = 0.0
    for key in out:
        arrays = [h.state_dict()[key] for h in heads]
        for idx in np.ndindex(out[key].shape):
            ref = 0.0
            for a, s in zip(arrays, sizes):
                ref += float(a[idx]) * int(s) / total
            worst = max(worst, abs(out[key][idx] - ref))
    ok = worst <= 1e-12
    verdict("2 fedavg oracle", ok, f"max |diff| {worst:.1e}")
    assert ok


# 3


def test_c03_soft_mixture_endpoints(verdict):
    cfg = HeadConfig(num_experts=2)
    prev, agg = TaskHead(cfg, 1), TaskHead(cfg, 2)

    def same(a, b):
        return all(a.state_dict()[k].tobytes() == b.state_dict()[k].tobytes() for k in a.state_dict())

    def const(v):
        h = TaskHead(cfg, 0)
        return h.load_state_dict({k: np.full_like(x, v) for k, x in h.state_dict().items()})

    mid = soft_mixture(const(2.0), const(4.0), 0.5)
    ok = same(soft_mixture(prev, agg, 0.0), agg) and same(soft_mixture(prev, agg, 1.0), prev)
    ok = ok and all(np.all(v == 3.0) for v in mid.state_dict().values())
    verdict("3 soft mixture endpoints", ok)
    assert ok


# 4


def test_c04_routing_invariants(verdict):
    rng = np.random.default_rng(4)
    C, K = 8, 4
    router = SpatialRouter("router", C, K, rng)
    W, b = router.weight.data, router.bias.data
    ok = True
    for hw in ((16, 16), (32, 32)):
        x = rng.standard_normal((C, 1000) + hw)
        rmap = route_spatial(x, router)
        oh = rmap.onehot
        ok &= bool(np.all((oh == 0) | (oh == 1)) and np.all(oh.sum(axis=0) == 1))
        logits = np.einsum("kc,c...->k...", W, x) + b.reshape((K,) + (1,) * 3)
        # brute force: first index attaining the max
        mx = logits.max(axis=0)
        brute = np.full(mx.shape, -1)
        for k in reversed(range(K)):
            brute[logits[k] == mx] = k
        ok &= bool(np.array_equal(rmap.index, brute))
        for scale in (1e-3, 0.5, 7.0, 1e3):
            _, scaled = _onehot(scale * logits)
            ok &= bool(np.array_equal(scaled, oh))
    grouter = GlobalRouter("grouter", C * 16 * 16, K, rng)
    route_global(rng.standard_normal((C, 16, 16)), grouter)
    with pytest.raises(ShapeError):
        route_global(rng.standard_normal((C, 32, 32)), grouter)
    verdict("4 routing invariants", ok, "2 x 1000 inputs, global router rejects 32x32")
    assert ok


def _onehot(scores):
    sel = scores.argmax(axis=0)
    oh = np.zeros_like(scores)
    np.put_along_axis(oh, sel[None], 1.0, axis=0)
    return sel, oh


# 5


def test_c05_k1_degeneracy(verdict):
    rng = np.random.default_rng(5)
    head = TaskHead(HeadConfig(num_experts=1, gate_scaling=False), 5)
    layer = head.moe
    worst = 0.0
    with T.no_grad():
        for i in range(100):
            hw = tuple(rng.integers(2, 20, 2))
            x = rng.standard_normal((8,) + hw)
            got = moe_forward(x, layer, mode="top1").data
            want = layer.experts[0](T.as_tensor(x)).data
            worst = max(worst, float(np.max(np.abs(got - want))))
    ok = worst <= 1e-12
    verdict("5 K=1 degeneracy", ok, f"max |diff| {worst:.1e} over 100 inputs")
    assert ok


# 6


def test_c06_sparse_cost_identity(verdict):
    ok = True
    for K, hw, C in itertools.product([1, 2, 3, 4], [(4, 4), (8, 8), (16, 16), (6, 10)], [2, 8]):
        h = TaskHead(HeadConfig(in_channels=C, num_experts=K, domain_experts={1: K - 1}), 0)
        top1 = count_flops(h, (C,) + hw, "top1")
        single = count_flops(h, (C,) + hw, "single")
        ok &= top1.total_head - single.total_head == top1.flops_forward_by_component["routing"]
        x = np.random.default_rng(K + C).standard_normal((C,) + hw)
        for mode in ("top1", "dense", "single"):
            rep = count_flops(h, (C,) + hw, mode)
            got = measure_flops(h, x, mode, domain_id=1)
            ok &= all(got[k] == rep.flops_forward_by_component[k] for k in got)
            ok &= sum(got.values()) == rep.total_head
    rep = count_flops(TaskHead(HeadConfig(), 0), (8, 16, 16), "top1", FrozenBackbone())
    share = rep.flops_forward_by_component["routing"] / rep.total_forward
    ok &= share < 0.05
    verdict("6 sparse cost identity", ok, f"routing share of forward FLOPs {share:.2%}")
    assert ok


# 7


def test_c07_directional_end_to_end(verdict):
    t = time.time()
    fedmox = median_acc(30)
    fedavg = median_acc(30, num_experts=1, alpha=0.0)
    server = median_acc(30, num_experts=1, use_clients=False)
    ok = fedmox >= fedavg >= server
    verdict("7 fedmox >= fedavg >= server-only", ok, f"{fedmox:.4f} / {fedavg:.4f} / {server:.4f} ({time.time() - t:.0f}s)")
    assert ok


# 8


def test_c08_alpha_interior_optimum(verdict):
    alphas = [a / 10 for a in range(11)]
    # default round count; the fixed data seed is 0
    meds = [median_acc(FLConfig().rounds, fixed_data_seed=0, alpha=a) for a in alphas]
    best = alphas[int(np.argmax(meds))]
    ok = best not in (0.0, 1.0)
    verdict("8 alpha interior optimum", ok, f"best alpha {best} ({max(meds):.4f}); alpha=0 {meds[0]:.4f}, alpha=1 {meds[-1]:.4f}")
    assert ok


# 9


def test_c09_pseudo_label_monotone(verdict):
    rng = np.random.default_rng(9)
    head = TaskHead(HeadConfig(), 9)
    head.out_weight.data *= 40  # spread the confidences
    feats = rng.standard_normal((8, 6, 8, 8))
    cov = [generate_pseudo_labels(head, feats, th).coverage for th in (0.0, 0.5, 0.7, 0.9, 0.99, 1.01)]
    ok = cov[0] == 1.0 and cov[-1] == 0.0 and all(a >= b for a, b in zip(cov, cov[1:]))
    verdict("9 pseudo-label monotonicity", ok, " ".join(f"{c:.3f}" for c in cov))
    assert ok


# 10


def test_c10_determinism_and_order(verdict):
    w = world(0)
    fl = FLConfig(rounds=4, warmup_epochs=5, seed=10, sample_ratio=0.67)

    def stream(order=None):
        res = run_federation(fl, SSLConfig(), HeadConfig(), OptimConfig(), w, client_order=order)
        return "\n".join(json.dumps(m.to_json(), sort_keys=True) for m in res.metrics).encode()

    a, b = stream(), stream()
    perms = [stream(p) for p in ([2, 0, 1], [1, 2, 0], [2, 1, 0])]
    ok = a == b and all(p == a for p in perms)
    verdict("10 determinism and order independence", ok)
    assert ok


# 11


def test_c11_low_res_server(verdict):
    high = median_acc(30)
    low = median_acc(30, resolution="low")
    ok = low <= high
    verdict("11 low-res server <= high-res", ok, f"{low:.4f} <= {high:.4f}")
    assert ok


# 12


def test_c12_frozen_backbone_and_comm(verdict):
    w = world(1)
    fl = FLConfig(rounds=5, warmup_epochs=3, seed=12, sample_ratio=0.67)
    fed = build_federation(fl, SSLConfig(), HeadConfig(), OptimConfig(), w)
    h0 = w.backbone.param_hash()
    P = fed.state.global_head.num_params()
    M = fl.clients_per_round
    res = run_federation(fl, SSLConfig(), HeadConfig(), OptimConfig(), w)
    ok = all(m.backbone_hash == h0 for m in res.metrics) and w.backbone.param_hash() == h0
    ok &= res.metrics[0].backbone_params_communicated == fl.num_clients * w.backbone.num_params()
    ok &= all(m.params_communicated == 2 * M * P and m.backbone_params_communicated == 0 for m in res.metrics[1:])
    ok &= all(len(m.participants) == M for m in res.metrics[1:])
    m = run_round(fed)
    ok &= m.params_communicated == 2 * M * P
    verdict("12 frozen backbone and comm accounting", ok, f"M={M}, P={P}, per round {2 * M * P}")
    assert ok
