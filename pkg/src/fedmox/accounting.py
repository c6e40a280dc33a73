"""Parameter, FLOP and communication accounting for task heads.

FLOPs are forward-pass only and count a multiply-add as 2 FLOPs; only the
pointwise convolutions are counted (bias adds are folded into the
multiply-adds, elementwise ops are ignored). Backward cost is reported as
2x forward and is an estimate, not a measurement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T

FLOP_MODES = ("top1", "dense", "single", "domain_assigned", "client")


@dataclass
class CostReport:
    params_by_component: dict = field(default_factory=dict)
    flops_forward_by_component: dict = field(default_factory=dict)
    mode: str = "top1"
    comm_per_round: int = 0

    @property
    def total_params(self) -> int:
        return sum(self.params_by_component.values())

    @property
    def total_head(self) -> int:
        """Forward FLOPs of the head in ``mode`` (backbone excluded)."""
        f = self.flops_forward_by_component
        if self.mode == "dense":
            return f["routing"] + f["dense_all_experts"] + f["shared"]
        if self.mode in ("single", "domain_assigned"):
            return f["selected_expert"] + f["shared"]
        return f["routing"] + f["selected_expert"] + f["shared"]

    @property
    def total_forward(self) -> int:
        """Head plus backbone: the whole model's forward cost."""
        return self.total_head + self.flops_forward_by_component.get("backbone", 0)

    @property
    def backward_estimate(self) -> int:
        return 2 * self.total_head

    def to_json(self) -> dict:
        return {
            "params_by_component": dict(self.params_by_component),
            "total_params": self.total_params,
            "flops_forward_by_component": dict(self.flops_forward_by_component),
            "mode": self.mode,
            "flops_forward_head": self.total_head if self.flops_forward_by_component else None,
            "flops_forward_total": self.total_forward if self.flops_forward_by_component else None,
            "comm_per_round": self.comm_per_round,
        }


def _expert_params(cfg) -> int:
    return cfg.hidden * cfg.in_channels + cfg.hidden + cfg.expert_out * cfg.hidden + cfg.expert_out


def count_params(head) -> CostReport:
    cfg = head.cfg
    K = cfg.num_experts
    glob = 0
    if head.global_router is not None:
        glob = head.global_router.weight.size + head.global_router.bias.size
    return CostReport(
        params_by_component={
            "experts_total": K * _expert_params(cfg),
            "router_spatial": K * cfg.in_channels + K,
            "router_global": int(glob),
            "shared": cfg.num_classes * cfg.expert_out + cfg.num_classes,
        }
    )


def count_flops(head, dims, mode: str = "top1", backbone=None) -> CostReport:
    """Analytic forward FLOPs for one C x H x W feature map.

    ``mode`` "client" resolves to the routing a client uses (top1, or
    domain_assigned for domain-assigned heads).
    """
    if mode not in FLOP_MODES:
        raise ValueError(f"mode must be one of {FLOP_MODES}")
    C, H, W = (int(v) for v in dims)
    if min(C, H, W) <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    cfg = head.cfg
    if mode == "client":
        mode = "domain_assigned" if cfg.routing_mode == "domain_assigned" else "top1"
    px = H * W
    K = cfg.num_experts
    expert = 2 * px * (cfg.hidden * C + cfg.expert_out * cfg.hidden)
    flops = {
        "routing": 2 * K * C * px,
        "selected_expert": expert,
        "dense_all_experts": K * expert,
        "shared": 2 * px * cfg.num_classes * cfg.expert_out,
        "backbone": backbone.flops(H, W) if backbone is not None else 0,
    }
    rep = count_params(head)
    rep.flops_forward_by_component = flops
    rep.mode = mode
    return rep


def measure_flops(head, features, mode: str = "top1", domain_id: int = 0) -> dict:
    """Instrumented FLOPs of one forward pass, by component."""
    fwd_mode = "domain_assigned" if mode == "single" else mode
    with T.no_grad(), T.count_flops() as counter:
        head.forward(features, mode=fwd_mode, domain_id=domain_id)
    return dict(counter.by_scope)


def comm_per_round(head, num_participants: int) -> int:
    """Parameters moved per round: one download and one upload per participant."""
    if num_participants < 1:
        raise ValueError("need at least one participant")
    return 2 * num_participants * head.num_params()


def cumulative_comm(head, participants_per_round, backbone=None, num_clients: int = 0) -> int:
    """Total parameters moved over a run; the backbone goes out once, before round 1."""
    total = backbone.num_params() * num_clients if backbone is not None else 0
    return total + sum(comm_per_round(head, m) for m in participants_per_round)


def format_cost_report(rep: CostReport) -> str:
    lines = [f"{'component':<22}{'parameters':>14}"]
    for k, v in rep.params_by_component.items():
        lines.append(f"{k:<22}{v:>14,d}")
    lines.append(f"{'total':<22}{rep.total_params:>14,d}")
    if rep.flops_forward_by_component:
        lines.append("")
        lines.append(f"{'forward FLOPs (' + rep.mode + ')':<22}{'FLOPs':>14}")
        for k, v in rep.flops_forward_by_component.items():
            lines.append(f"{k:<22}{v:>14,d}")
        lines.append(f"{'head total':<22}{rep.total_head:>14,d}")
        lines.append(f"{'model total':<22}{rep.total_forward:>14,d}")
        lines.append(f"{'backward (estimate)':<22}{rep.backward_estimate:>14,d}")
    if rep.comm_per_round:
        lines.append("")
        lines.append(f"{'comm per round':<22}{rep.comm_per_round:>14,d}")
    return "\n".join(lines) + "\n"
