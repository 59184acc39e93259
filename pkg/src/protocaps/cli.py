"""Command-line surface: train, eval, cost, report.

Exit codes: 0 success, 1 validation/input error, 2 runtime or numeric
failure. Every command writes machine-readable CSV/JSON next to any text
it prints.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import ablation_csv, ablation_report, ablation_svg, \
    activation_profile
from .charts import line_chart
from .config import ConfigError, dataset_from_config, dump_config, \
    infer_network_dims, load_config_file, network_config_from_section, \
    output_dir_for, train_config_from_section
from .costmodel import network_cost, scaling_curve
from .network import build
from .train import TrainingDiverged, evaluate, load_checkpoint, run_training


def cmd_train(args) -> int:
    try:
        cfg = load_config_file(args.config)
        out_dir = output_dir_for(cfg, args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        train_set, test_set, tag = dataset_from_config(cfg["dataset"],
                                                       cache_dir=out_dir)
        infer_network_dims(cfg, train_set)
        net_cfg = network_config_from_section(cfg["network"])
        tr_cfg = train_config_from_section(cfg["training"],
                                           cfg["dataset"]["augment"])
        (out_dir / "config.resolved.yaml").write_text(dump_config(cfg))
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    model = build(net_cfg, np.random.default_rng(tr_cfg.seed),
                  dtype=tr_cfg.dtype)
    report = network_cost(net_cfg)
    try:
        metrics = run_training(model, train_set, test_set, tr_cfg,
                               out_dir=out_dir)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        meta = {"status": "diverged", "epoch": e.epoch,
                "batch_index": e.batch_index}
        (out_dir / "run.json").write_text(json.dumps(meta, indent=2,
                                                     sort_keys=True))
        return 2

    meta = {
        "status": "ok",
        "dataset_tag": tag,
        "variant": args.variant or cfg["output"]["name"],
        "train_samples": len(train_set),
        "test_samples": len(test_set),
        "macs_total": report.total_macs,
        "flops_total": report.total_flops,
        "routing_elements_total": report.total_routing_elements,
        "parameters": model.parameter_count(),
        "class_logits": net_cfg.class_logits,
        "routing": net_cfg.routing,
        "residual": net_cfg.residual,
        "layers": [layer.describe(m) for _, layer, m in
                   model.routing_layers],
        "summary": metrics.summary,
        "resolved_defaults": cfg,
    }
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2,
                                                 sort_keys=True))
    final = metrics.rows[-1].test_acc if metrics.rows else None
    print(f"run complete: {out_dir}  final_test_acc="
          f"{final if final is not None else 'n/a'}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
        cfg = load_config_file(args.config)
        _, test_set, tag = dataset_from_config(cfg["dataset"])
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        acc = evaluate(model, test_set, cfg["training"]["eval_batch_size"])
    except T.ShapeError as e:
        print(f"error: checkpoint does not match dataset: {e}",
              file=sys.stderr)
        return 1
    print(f"test_accuracy={acc!r}")
    out = {"checkpoint": str(args.checkpoint), "dataset_tag": tag,
           "test_accuracy": acc, "samples": len(test_set)}
    out_path = Path(args.out or "eval.json")
    out_path.write_text(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_cost(args) -> int:
    try:
        cfg = load_config_file(args.config)
        net = cfg["network"]
        if net["stem"]["in_channels"] is None or \
                net["stem"]["in_hw"] is None:
            net["stem"]["in_channels"] = net["stem"]["in_channels"] or 1
            net["stem"]["in_hw"] = net["stem"]["in_hw"] or [28, 28]
        if net["classes"] is None:
            net["classes"] = 10
        net_cfg = network_config_from_section(net)
        sizes = [int(s) for s in args.sizes] if args.sizes else \
            [net_cfg.stem.in_hw[0]]
        curve = scaling_curve(net_cfg, sizes)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out_dir = Path(args.out or "cost-report")
    out_dir.mkdir(parents=True, exist_ok=True)
    base = curve[0][1]
    lines = [",".join(map(str, row)) for row in base.csv_rows()]
    (out_dir / "layers.csv").write_text("\n".join(lines) + "\n")
    totals = ["input_side,macs,flops,routing_elements,params"]
    for size, rep in curve:
        totals.append(f"{size},{rep.total_macs},{rep.total_flops},"
                      f"{rep.total_routing_elements},{rep.total_params}")
    (out_dir / "scaling.csv").write_text("\n".join(totals) + "\n")
    if len(curve) > 1:
        svg = line_chart([s for s, _ in curve],
                         {"total FLOPs": [r.total_flops for _, r in curve]},
                         title="forward cost vs input size",
                         x_label="input side", y_label="FLOPs",
                         log_y=args.log_y)
        (out_dir / "scaling.svg").write_text(svg)
        ratio = curve[-1][1].total_flops / curve[0][1].total_flops
        print(f"flops[{curve[-1][0]}] / flops[{curve[0][0]}] = {ratio:.2f}")
    print(f"cost report written to {out_dir} "
          f"(total {base.total_flops} FLOPs at {curve[0][0]}px)")
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out or f"report-{args.kind}")
    if args.kind == "ablation":
        try:
            table = ablation_report(args.runs, baseline=args.baseline)
        except (ValueError, FileNotFoundError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.csv").write_text(ablation_csv(table))
        (out_dir / "ablation.svg").write_text(ablation_svg(table))
        print(f"ablation report over {len(table)} runs -> {out_dir}")
        return 0
    # activations
    if len(args.runs) != 1:
        print("error: kind=activations takes exactly one run dir",
              file=sys.stderr)
        return 1
    run_dir = Path(args.runs[0])
    try:
        ckpt = run_dir / "best.npz"
        if not ckpt.exists():
            ckpt = run_dir / "last.npz"
        if not ckpt.exists():
            raise FileNotFoundError(f"no checkpoint in {run_dir}")
        model = load_checkpoint(ckpt)
        cfg = load_config_file(run_dir / "config.resolved.yaml")
        _, test_set, _ = dataset_from_config(cfg["dataset"],
                                             cache_dir=run_dir)
        profile = activation_profile(model, test_set, layer=args.layer)
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "activations.csv").write_text(profile.csv_text())
    (out_dir / "activations.svg").write_text(profile.svg_text())
    print(f"activation profile for layer {profile.layer} -> {out_dir}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protocaps",
        description="capsule networks with non-iterative prototype routing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config", help="YAML run config")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--variant", help="label recorded in run metadata")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("config", help="config providing the dataset section")
    p.add_argument("--out", help="eval JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="analytical FLOP/memory report")
    p.add_argument("config")
    p.add_argument("--sizes", nargs="*", help="input sides to sweep")
    p.add_argument("--out", help="report directory")
    p.add_argument("--log-y", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", help="ablation or activation reports")
    p.add_argument("kind", choices=["ablation", "activations"])
    p.add_argument("runs", nargs="*", help="run directories")
    p.add_argument("--baseline", help="baseline run name (ablation)")
    p.add_argument("--layer", help="layer to profile (activations)")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:      # numeric/unexpected failures
        print(f"fatal: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
