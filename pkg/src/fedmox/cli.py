"""Command-line front end.

    fedmox run          one federation, written to <out>/<config-hash>-seed<seed>/
    fedmox ablate       a method x alpha x K x routing grid into one CSV
    fedmox viz-routing  per-expert mean locations and loads for a checkpoint
    fedmox gradcheck    finite-difference check of the head's gradients
    fedmox make-data    dump the synthetic world to the flat binary format

Output root: --out, else $RUN_OUT_ROOT, else ./runs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .accounting import count_flops, format_cost_report
from .config import ConfigError, RunConfig, dump, load_config, parse_config, parse_overrides
from .data import HIGH, LOW, downsample_images, dump_world, extract_features, generate_world, load_world
from .federation import run_federation
from .gradcheck import run_gradcheck
from .moe import TaskHead, expert_load, write_routing_csv

log = logging.getLogger("fedmox")

METHODS = ("fedavg", "fedprox", "fedmox", "server_only", "low_res_server")
# what each method pins; anything not listed comes from the config
METHOD_OVERRIDES = {
    "fedavg": {"moe.num_experts": "1", "federation.alpha": "0.0"},
    "fedprox": {"moe.num_experts": "1", "federation.alpha": "0.0", "ssl.prox_mu": "0.001"},
    "fedmox": {},
    "server_only": {"moe.num_experts": "1", "federation.use_clients": "false"},
    "low_res_server": {"federation.server_resolution": "low"},
}
SUMMARY_VERSION = "# fedmox summary v1"
ABLATION_VERSION = "# fedmox ablation v1"


class UsageError(Exception):
    pass


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("RUN_OUT_ROOT") or "runs")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["federation.seed"] = str(args.seed)
    return cfg.with_overrides(overrides) if overrides else cfg


def _domains(cfg: RunConfig) -> list[int]:
    return list(range(cfg.data.num_domains))


def summary_rows(cfg: RunConfig, metrics) -> tuple[list[str], list[list]]:
    cols = ["round", "total_accuracy"] + [f"domain_{d}" for d in _domains(cfg)]
    rows = [[m.round, repr(m.total_accuracy)] + [repr(m.per_domain_accuracy.get(d, float("nan"))) for d in _domains(cfg)] for m in metrics]
    return cols, rows


def _write_csv(path: Path, header: str, cols, rows):
    with path.open("w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerows(rows)


def routing_maps(head: TaskHead, world):
    """Routing of the test images at full and at half resolution."""
    hi = extract_features(world.backbone, world.test.images)
    lo = extract_features(world.backbone, downsample_images(world.test.images))
    return [head.route(hi, HIGH), head.route(lo, LOW)]


def execute(cfg: RunConfig, run_dir: Path | None = None):
    """Run one federation; write the run directory when ``run_dir`` is given."""
    world = generate_world(cfg.data)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(dump(cfg))
        fh = (run_dir / "metrics.jsonl").open("w")
    else:
        fh = None

    def on_round(m):
        if fh is not None:
            fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")
            fh.flush()

    try:
        result = run_federation(cfg.federation, cfg.ssl, cfg.moe, cfg.optim, world, on_round=on_round)
    finally:
        if fh is not None:
            fh.close()
    if run_dir is not None:
        cols, rows = summary_rows(cfg, result.metrics)
        _write_csv(run_dir / "summary.csv", SUMMARY_VERSION, cols, rows)
        write_routing_csv(run_dir / "routing.csv", routing_maps(result.head, world))
        rep = count_flops(result.head, (cfg.data.feature_channels, cfg.data.image_size, cfg.data.image_size), "top1", world.backbone)
        rep.comm_per_round = 2 * cfg.federation.clients_per_round * result.head.num_params()
        (run_dir / "cost_report.txt").write_text(format_cost_report(rep))
        (run_dir / "cost_report.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n")
        result.head.save(run_dir / "head.npz")
    return result


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    run_dir = out_root(args.out) / cfg.run_name()
    t0 = time.time()
    result = execute(cfg, run_dir)
    last = result.metrics[-1]
    print(f"{run_dir}  rounds={last.round}  total_accuracy={last.total_accuracy:.4f}  ({time.time() - t0:.1f}s)")
    return 0


def grid_cells(args, cfg: RunConfig) -> list[dict]:
    methods = _split_list(args.method, str) or ["fedmox"]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    alphas = _split_list(args.alpha, float) or [None]
    ks = _split_list(args.experts, int) or [None]
    modes = _split_list(args.routing_mode, str) or [None]
    seeds = _split_list(args.seeds, int) or [cfg.seed]
    cells = []
    for m, a, k, r, s in itertools.product(methods, alphas, ks, modes, seeds):
        ov = dict(METHOD_OVERRIDES[m])
        if a is not None:
            ov["federation.alpha"] = repr(a)
        if k is not None:
            ov["moe.num_experts"] = str(k)
        if r is not None:
            ov["moe.routing_mode"] = r
        ov["federation.seed"] = str(s)
        cells.append({"method": m, "overrides": ov})
    if not cells:
        raise UsageError("empty grid")
    return cells


def _split_list(text, typ):
    if not text:
        return []
    return [typ(v) for v in text.split(",") if v.strip()]


def _run_cell(payload):
    base_text, cell = payload
    try:
        cfg = parse_config(base_text, require=False).with_overrides(cell["overrides"])
        res = execute(cfg)
        last = res.metrics[-1]
        return cfg, last, None
    except Exception as exc:  # a failed cell is reported, the sweep goes on
        return None, None, f"{type(exc).__name__}: {exc}"


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    cells = grid_cells(args, base)
    text = dump(base)
    payloads = [(text, c) for c in cells]
    jobs = max(1, args.jobs or 1)
    if jobs == 1:
        results = [_run_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_cell, payloads))  # grid order, whatever finishes first
    domains = _domains(base)
    cols = ["method", "alpha", "num_experts", "routing_mode", "seed", "status", "total_accuracy"]
    cols += [f"domain_{d}" for d in domains] + ["error"]
    rows = []
    failed = 0
    for cell, (cfg, last, err) in zip(cells, results):
        if err is None:
            rows.append(
                [cell["method"], repr(cfg.federation.alpha), cfg.moe.num_experts, cfg.moe.routing_mode, cfg.seed, "ok", repr(last.total_accuracy)]
                + [repr(last.per_domain_accuracy.get(d, float("nan"))) for d in domains]
                + [""]
            )
        else:
            failed += 1
            ov = cell["overrides"]
            rows.append(
                [cell["method"], ov.get("federation.alpha", ""), ov.get("moe.num_experts", ""), ov.get("moe.routing_mode", ""), ov["federation.seed"], "failed", ""]
                + [""] * len(domains)
                + [err]
            )
    tag = hashlib.sha256((text + json.dumps([c["overrides"] for c in cells], sort_keys=True)).encode()).hexdigest()[:12]
    out_dir = out_root(args.out) / f"ablate-{tag}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(text)
    _write_csv(out_dir / "ablation.csv", ABLATION_VERSION, cols, rows)
    print(f"{out_dir / 'ablation.csv'}  cells={len(cells)}  failed={failed}")
    return 1 if failed else 0


def cmd_viz_routing(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    head = TaskHead.load(ckpt)
    if args.data:
        world = load_world(args.data)
    else:
        world = generate_world(resolve_config(args).data)
    maps = routing_maps(head, world)
    out = Path(args.out) if args.out else ckpt.with_name("routing.csv")
    rows = write_routing_csv(out, maps)
    counts, frac = expert_load(maps)
    print(f"{'expert':>6}{'pixels':>10}{'fraction':>10}")
    for k, (c, f) in enumerate(zip(counts, frac)):
        print(f"{k:>6}{c:>10d}{f:>10.3f}")
    print(f"{len(rows)} rows -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed or 0)
    for r in results:
        print(r.describe())
    worst = max(results, key=lambda r: r.worst_error)
    if not all(r.passed for r in results):
        print(f"worst: {worst.worst_path}{list(worst.worst_index)} relative error {worst.worst_error:.3e}", file=sys.stderr)
        return 1
    return 0


def cmd_make_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out) if args.out else out_root(None) / f"world-seed{cfg.data.seed}.fmxw"
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_world(generate_world(cfg.data), out)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmox", description="Semi-supervised federated MoE simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", metavar="PATH", help="INI config; defaults are used when omitted")
        sp.add_argument("--seed", type=int, help="training seed (federation.seed)")
        sp.add_argument("--out", metavar="DIR", help=out_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. federation.alpha=0.3 (repeatable)")

    sp = sub.add_parser("run", help="run one federation")
    common(sp, "output root (default $RUN_OUT_ROOT or ./runs)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="sweep methods and settings into one CSV")
    common(sp, "output root (default $RUN_OUT_ROOT or ./runs)")
    sp.add_argument("--method", help=f"comma list from {{{', '.join(METHODS)}}} (default fedmox)")
    sp.add_argument("--alpha", help="comma list of soft-mixture weights")
    sp.add_argument("--experts", help="comma list of expert counts K")
    sp.add_argument("--routing-mode", help="comma list of routing modes")
    sp.add_argument("--seeds", help="comma list of training seeds (default: --seed or the config's)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("viz-routing", help="export per-expert mean locations for a checkpoint")
    common(sp, "CSV path (default: routing.csv next to the checkpoint)")
    sp.add_argument("--checkpoint", required=True, metavar="PATH", help="head.npz from a run directory")
    sp.add_argument("--data", metavar="PATH", help="world dump from make-data (default: regenerate from config)")
    sp.set_defaults(func=cmd_viz_routing)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("make-data", help="write the synthetic world as a flat binary file")
    common(sp, "file path")
    sp.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
