"""Command-line entry point.

Every training hyperparameter is a flag named after its config field
(``--num-queries``, ``--no-cq`` ...). Flags override a JSON config file given
with ``--config``, which overrides the built-in defaults. Outputs land under
``$AGGDETR_OUTPUT_ROOT`` (default ``runs``) unless a path is given.

Exit status: 0 on success, 1 on a contract or configuration error, 2 on a
numeric failure such as a non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import TrainConfig
from .errors import ContractError, NumericError

log = logging.getLogger("aggdetr")

OUTPUT_ROOT_ENV = "AGGDETR_OUTPUT_ROOT"
_TYPES = {"int": int, "float": float, "str": str}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    g = p.add_argument_group("training config (overrides --config)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                           help=f"(default {f.default})")
        else:
            g.add_argument(flag, dest=f.name, type=_TYPES[f.type], default=argparse.SUPPRESS, help=f"(default {f.default})")


def config_from_args(args) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if getattr(args, "config", None) else TrainConfig().to_dict()
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    base.update({k: v for k, v in vars(args).items() if k in names})
    return TrainConfig.from_dict(base)


def _emit(rows: list[dict], out=None) -> None:
    """Tab-separated table with a header line."""
    out = out or sys.stdout
    if not rows:
        return
    cols = list(rows[0])
    print("\t".join(cols), file=out)
    for r in rows:
        print("\t".join(_fmt(r[c]) for c in cols), file=out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


# ----------------------------------------------------------------------
# subcommands


def cmd_dataset_build(args) -> int:
    from .data import DEFAULT_COUNTS, SceneSpec, ShiftConfig, dataset_build

    spec = SceneSpec(image_size=args.image_size, num_classes=args.num_classes, seed=args.seed)
    counts = dict(DEFAULT_COUNTS)
    for key in counts:
        v = getattr(args, key.replace("/", "_"))
        if v is not None:
            counts[key] = v
    root = args.root or output_root() / "dataset"
    dataset_build(spec, counts, root, ShiftConfig())
    _emit([{"split": k, "count": n, "root": str(root)} for k, n in sorted(counts.items())])
    return 0


def _dataset_root(args) -> Path:
    return Path(args.dataset) if args.dataset else output_root() / "dataset"


def cmd_train(args) -> int:
    from .data import load_benchmark
    from .evaluate import evaluate_map
    from .plotting import loss_curves
    from .train import train

    config = config_from_args(args)
    samples = load_benchmark(_dataset_root(args))
    out = Path(args.out) if args.out else output_root() / "train" / config.fingerprint()
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    result = train(config, samples=samples, out_dir=out)
    loss_curves(result.loss_log, out / "loss_curves.png")
    rows = []
    for split in ("source_test", "target_test"):
        ev = evaluate_map(result.model, samples[split])
        rows.append({"split": split, "mean_ap": ev.mean_ap, "samples": ev.sample_count, "fingerprint": ev.config_fingerprint})
    (out / "eval.json").write_text(json.dumps(rows, indent=2))
    _emit(rows)
    print(f"# checkpoint\t{result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_split
    from .evaluate import evaluate_map
    from .train import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    domain, split = _split_arg(args.split)
    samples = load_split(_dataset_root(args), domain, split, with_eval_boxes=True)
    ev = evaluate_map(model, samples, args.iou)
    names = json.loads((_dataset_root(args) / "manifest.json").read_text())["class_names"]
    rows = [{"class": n, "ap": a} for n, a in zip(names, ev.per_class_ap)]
    rows.append({"class": "mean", "ap": ev.mean_ap})
    _emit(rows)
    if args.out:
        Path(args.out).write_text(json.dumps(ev.to_dict(), indent=2))
    return 0


def _split_arg(s: str) -> tuple[str, str]:
    parts = s.split("/")
    if len(parts) != 2 or parts[0] not in ("source", "target") or parts[1] not in ("train", "test"):
        raise ContractError(f"split must look like target/test, got {s!r}")
    return parts[0], parts[1]


def cmd_ablate(args) -> int:
    from .ablation import ROW_SETS, format_table, run_ablation
    from .data import load_benchmark
    from .plotting import ablation_bars

    config = config_from_args(args)
    rows = ROW_SETS.get(args.rows, None) or args.rows.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out) if args.out else output_root() / "ablation"
    result = run_ablation(config, load_benchmark(_dataset_root(args)), rows, seeds, out_dir=out)
    ablation_bars(result, out / "ablation.png")
    config.save(out / "base_config.json")
    _emit([r.to_dict() | {"per_class_ap": None} for r in result.results])
    print()
    print(format_table(result))
    return 0


def cmd_attn_dump(args) -> int:
    from .attention import dump_attention
    from .data import load_split
    from .plotting import attention_overlay
    from .train import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    domain, split = _split_arg(args.split)
    samples = load_split(_dataset_root(args), domain, split)
    if not 0 <= args.sample < len(samples):
        raise ContractError(f"sample {args.sample} out of range for {len(samples)} images")
    sample = samples[args.sample]
    out = Path(args.out) if args.out else output_root() / "attention" / f"{args.which}{args.index}_block{args.block}_{args.sample}.pgm"
    amap = dump_attention(model, sample, args.which, args.index, args.block, out)
    if args.overlay:
        attention_overlay(sample.image, amap.as_grid(), out.with_suffix(".png"), f"{args.which} {args.index}, block {args.block}")
    _emit([{"file": str(out), "grid": f"{amap.grid[0]}x{amap.grid[1]}", "row_sum": float(amap.row.sum()), "max": float(amap.row.max())}])
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import CASES, run_suite

    names = args.cases.split(",") if args.cases else list(CASES)
    unknown = sorted(set(names) - set(CASES))
    if unknown:
        raise ContractError(f"unknown gradient cases {unknown}")
    results = run_suite(args.instances, args.seed, names)
    _emit([{"case": r.name, "instances": r.instances, "checked": r.checked, "max_rel_error": f"{r.max_rel_error:.2e}",
            "failures": r.failures, "ok": r.ok, "seconds": round(r.seconds, 2)} for r in results])
    if not all(r.ok for r in results):
        raise NumericError("gradient check failed for " + ", ".join(r.name for r in results if not r.ok))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aggdetr", description=__doc__.split("\n\n")[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic benchmark")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    b = ds_sub.add_parser("build", help="render all splits to disk")
    b.add_argument("--root", type=Path)
    b.add_argument("--image-size", type=int, default=64)
    b.add_argument("--num-classes", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    for key in ("source_train", "source_test", "target_train", "target_test"):
        b.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    b.set_defaults(func=cmd_dataset_build)

    t = sub.add_parser("train", help="two-step training; writes checkpoint, loss log, curves")
    t.add_argument("--dataset", type=Path)
    t.add_argument("--out", type=Path)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class AP and mAP of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--split", default="target/test")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate toggle rows over seeds")
    a.add_argument("--dataset", type=Path)
    a.add_argument("--out", type=Path)
    a.add_argument("--rows", default="default", help="row set name (default, modules, all) or comma list")
    a.add_argument("--seeds", default="0,1,2")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("attn-dump", help="write one query's attention map as a graymap")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--dataset", type=Path)
    d.add_argument("--split", default="target/test")
    d.add_argument("--sample", type=int, default=0)
    d.add_argument("--which", choices=("class_query", "foreground", "object"), required=True)
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--block", type=int, default=-1)
    d.add_argument("--out", type=Path)
    d.add_argument("--overlay", action="store_true", help="also write a PNG overlay")
    d.set_defaults(func=cmd_attn_dump)

    g = sub.add_parser("grad-check", help="finite-difference gradient suite at 64-bit")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", help="comma list; default all")
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ContractError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
