"""flattenkit command line.

Exit codes: 0 success, 2 usage or contract violation, 3 IO / file format.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ContractError, FlattenKitError, FormatError, NonFiniteError
from .grid import FlattenPlan, GridSpec, Kind, flatten, square_grid_for, unflatten
from .ingest import read_clip, read_tensor, write_composite_png, write_frame_dir, write_tensor
from .learner.net import flops_estimate
from .learner.train import TrainConfig, evaluate, load_checkpoint, load_clips, train
from .sampler import make_views, parse_view_spec, uniform_sample_indices
from .synth import DEFAULT_CLASSES, STATIC_CLASS, SynthDataset, generate_dataset

log = logging.getLogger("flattenkit")

VARIANTS = ("row-major", "nested", "random")
EXIT_CONTRACT, EXIT_IO = 2, 3


def _default_seed() -> int:
    raw = os.environ.get("FLATTENKIT_SEED")
    if raw is None:
        return 1
    try:
        return int(raw, 0)
    except ValueError:
        raise ContractError(f"FLATTENKIT_SEED must be an integer, got {raw!r}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ContractError(f"config {args.config} must hold a JSON object")
    return cfg


def _pick(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config value, else default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _plan_from(args, cfg: dict, t: int) -> FlattenPlan:
    kind = Kind.parse(_pick(args, cfg, "kind", "row-major"))
    grid_text = _pick(args, cfg, "grid")
    grid = GridSpec.parse(grid_text) if grid_text else GridSpec(*square_grid_for(t))
    if grid.blocks != t:
        raise ContractError(f"grid {grid} holds {grid.blocks} frames, clip has {t}")
    seed = _pick(args, cfg, "seed")
    seed = _default_seed() if seed is None else seed
    nested_n = _pick(args, cfg, "nested_n")
    transpose = bool(_pick(args, cfg, "transpose", False))
    if kind is Kind.NESTED:
        return FlattenPlan(kind, grid, nested_n=nested_n, transpose=transpose)
    if kind is Kind.RANDOM:
        return FlattenPlan(kind, grid, seed=seed, transpose=transpose)
    return FlattenPlan(kind, grid, transpose=transpose)


def cmd_flatten(args) -> int:
    cfg = _load_config(args)
    clip = read_clip(args.input, args.pattern)
    frames = _pick(args, cfg, "frames")
    if frames is not None and frames != clip.shape[0]:
        clip = clip[uniform_sample_indices(clip.shape[0], frames)]
    plan = _plan_from(args, cfg, clip.shape[0])
    img = flatten(clip, plan)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".png":
        write_composite_png(img, out, args.normalization)
    else:
        write_tensor(out, img.pixels)
    if args.png:
        write_composite_png(img, args.png, args.normalization)
    _write_json(_plan_path(out), img.plan.to_dict())
    t, c, h, w = clip.shape
    print(f"{plan.kind.value} grid {plan.grid} ({t} frames of {c}x{h}x{w}) -> composite "
          f"{c}x{img.pixels.shape[1]}x{img.pixels.shape[2]}")
    if plan.kind is Kind.NESTED:
        inner, outer = plan.levels()
        print(f"nested: {plan.nested_n} sub-sequences, inner {inner}, outer {outer}")
    if plan.kind is Kind.RANDOM:
        print("permutation: " + " ".join(map(str, img.plan.permutation)))
    return 0


def _plan_path(out: Path) -> Path:
    return out.with_name(out.name + ".plan.json")


def cmd_unflatten(args) -> int:
    src = Path(args.input)
    plan_file = Path(args.plan) if args.plan else _plan_path(src)
    try:
        plan = FlattenPlan.from_dict(json.loads(plan_file.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"plan {plan_file}: {exc}") from exc
    frames = unflatten(read_tensor(src), plan)
    out = Path(args.out)
    if args.frames_dir:
        write_frame_dir(frames, out, args.pattern)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_tensor(out, frames)
    print(f"{frames.shape[0]} frames of {'x'.join(map(str, frames.shape[1:]))} -> {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    spec = parse_view_spec(_pick(args, cfg, "views"))
    clip = read_clip(args.input, args.pattern)
    views = make_views(clip, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in views:
        name = f"view_t{v.temporal_index}_s{v.crop_index}.fltn"
        write_tensor(out / name, np.ascontiguousarray(v.frames))
        rows.append({"file": name, "temporal_index": v.temporal_index, "crop_index": v.crop_index})
    _write_json(out / "views.json", {"views": str(spec), "source": str(args.input), "clips": rows})
    print(f"{len(views)} views ({spec}) -> {out}")
    return 0


def _class_table(n: int) -> tuple:
    if 1 <= n <= len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES[:n]
    if n == len(DEFAULT_CLASSES) + 1:
        return DEFAULT_CLASSES + (STATIC_CLASS,)
    raise ContractError(f"--classes must be 1..{len(DEFAULT_CLASSES) + 1}, got {n}")


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    seed = _pick(args, cfg, "seed")
    definition = SynthDataset(
        classes=_class_table(_pick(args, cfg, "classes", 8)),
        train_per_class=_pick(args, cfg, "train", 64),
        val_per_class=_pick(args, cfg, "val", 16),
        seed=_default_seed() if seed is None else seed,
        canvas=(_pick(args, cfg, "canvas", 32),) * 2,
        t=_pick(args, cfg, "frames", 16),
        size=_pick(args, cfg, "sprite_size", 2),
        shape=_pick(args, cfg, "shape", "square"),
        noise=_pick(args, cfg, "noise", 0.05),
    )
    manifest = generate_dataset(definition, args.out, workers=args.workers)
    print(f"{definition.count('train')} train + {definition.count('val')} val clips -> {manifest.parent}")
    return 0


def _train_config(args, cfg: dict) -> TrainConfig:
    values = {}
    for f in fields(TrainConfig):
        v = _pick(args, cfg, f.name)
        if v is not None:
            values[f.name] = v
    values.setdefault("seed", _default_seed())
    if "stages" in values:
        values["stages"] = tuple(tuple(s) if isinstance(s, list) else s for s in values["stages"])
    return TrainConfig(**values)


def _manifests(args, cfg: dict) -> tuple[Path, Path]:
    data = _pick(args, cfg, "data")
    train_m = _pick(args, cfg, "train_manifest") or (Path(data) / "train.csv" if data else None)
    val_m = _pick(args, cfg, "val_manifest") or (Path(data) / "val.csv" if data else None)
    if train_m is None or val_m is None:
        raise ContractError("pass --data DIR or both --train-manifest and --val-manifest")
    return Path(train_m), Path(val_m)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    config = _train_config(args, cfg)
    train_m, val_m = _manifests(args, cfg)
    history = train(config, train_m, val_m, out_dir=args.out)
    last = history[-1]
    print(f"{len(history)} epochs -> {Path(args.out) / 'history.csv'}; final loss "
          f"{last['train_loss']:.4f}, val top1 {last['val_top1']:.4f}, top5 {last['val_top5']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    run = Path(args.run)
    model = load_checkpoint(run / "checkpoint" if (run / "checkpoint").is_dir() else run)
    resolved_path = run / "config.json"
    plan = None
    if resolved_path.exists() and args.kind is None:
        plan = FlattenPlan.from_dict(json.loads(resolved_path.read_text(encoding="utf-8"))["plan"])
    manifest = Path(_pick(args, cfg, "manifest") or _manifests(args, cfg)[1])
    data = load_clips(manifest, model.spec.n_classes)
    views = _pick(args, cfg, "views")
    t = parse_view_spec(views).frames if views else data.clip_shape[0]
    if plan is None:
        plan = _plan_from(args, cfg, t)
    res = evaluate(model, data, views, plan)
    out = Path(args.out) if args.out else run / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["manifest", "views", "variant", "top1", "top5"])
        w.writerow([str(manifest), views or f"{data.clip_shape[2]}x{t}x1x1", plan.kind.value,
                    repr(res.top1), repr(res.top5)])
    np.savetxt(out.with_suffix(".confusion.csv"), res.confusion, fmt="%d", delimiter=",")
    print(f"top1 {res.top1:.4f} top5 {res.top5:.4f} -> {out}")
    return 0


def _direction_top1(confusion: np.ndarray, classes) -> float:
    """Top-1 over classes that move (speed > 0)."""
    moving = [i for i, (_, s) in enumerate(classes) if s > 0 and i < len(confusion)]
    total = confusion[moving].sum()
    return float(np.trace(confusion[np.ix_(moving, moving)]) / total) if total else float("nan")


def _ablation_run(job) -> dict:
    variant, seed, base, train_m, val_m, out_dir, classes = job
    config = TrainConfig(**{**base, "kind": variant, "seed": seed})
    run_dir = Path(out_dir) / f"{variant}_seed{seed}"
    start = time.perf_counter()
    history = train(config, train_m, val_m, out_dir=run_dir)
    seconds = time.perf_counter() - start
    model = load_checkpoint(run_dir / "checkpoint")
    plan = FlattenPlan.from_dict(json.loads((run_dir / "config.json").read_text())["plan"])
    res = evaluate(model, val_m, config.views, plan)
    return {
        "variant": variant, "seed": seed, "top1": res.top1, "top5": res.top5,
        "direction_top1": _direction_top1(res.confusion, classes),
        "final_train_loss": history[-1]["train_loss"], "train_seconds": seconds,
    }


def run_ablation(train_m, val_m, out_dir, seeds=(1, 2, 3), base: dict | None = None, workers: int = 1,
                 classes=DEFAULT_CLASSES) -> list[dict]:
    """Train every variant under identical budgets and seeds.

    Returns one row per (variant, seed); the checkpoint scored is each run's
    best-validation one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = dict(base or {})
    jobs = [(v, s, base, Path(train_m), Path(val_m), out_dir, tuple(classes)) for s in seeds for v in VARIANTS]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_ablation_run, jobs))
    return [_ablation_run(j) for j in jobs]


def summarize_ablation(rows: list[dict]) -> list[dict]:
    out = []
    for v in VARIANTS:
        sel = [r for r in rows if r["variant"] == v]
        out.append({k: (v if k == "variant" else float(np.mean([r[k] for r in sel])))
                    for k in ("variant", "top1", "top5", "direction_top1", "final_train_loss")})
    return out


def write_ablation_report(rows: list[dict], out_dir) -> list[dict]:
    out_dir = Path(out_dir)
    summary = summarize_ablation(rows)
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "top1", "top5"])
        for r in summary:
            w.writerow([r["variant"], repr(r["top1"]), repr(r["top5"])])
    keys = ["variant", "seed", "top1", "top5", "direction_top1", "final_train_loss", "train_seconds"]
    with open(out_dir / "ablation_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    by = {r["variant"]: r for r in summary}
    with open(out_dir / "ablation_gaps.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "delta_top1", "delta_top5"])
        for a, b in (("row-major", "nested"), ("row-major", "random"), ("nested", "random")):
            w.writerow([f"{a}-{b}", repr(by[a]["top1"] - by[b]["top1"]), repr(by[a]["top5"] - by[b]["top5"])])
    return summary


def _dataset_classes(train_m: Path):
    meta = train_m.parent / "dataset.json"
    if meta.exists():
        d = json.loads(meta.read_text(encoding="utf-8"))
        return tuple((c["direction"], c["speed"]) for c in d["dataset"]["classes"])
    return DEFAULT_CLASSES


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    config = _train_config(args, cfg)
    train_m, val_m = _manifests(args, cfg)
    seeds = args.seeds or cfg.get("seeds") or [config.seed, config.seed + 1, config.seed + 2]
    base = config.to_dict()
    base.pop("kind"), base.pop("seed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablate.json", {"train_manifest": str(train_m), "val_manifest": str(val_m),
                                      "seeds": list(seeds), "train": base, "variants": list(VARIANTS)})
    rows = run_ablation(train_m, val_m, out, seeds, base, args.workers, _dataset_classes(train_m))
    summary = write_ablation_report(rows, out)
    print("variant    top1    top5")
    for r in summary:
        print(f"{r['variant']:<10} {100 * r['top1']:6.2f}  {100 * r['top5']:6.2f}")
    by = {r["variant"]: r for r in summary}
    print(f"row-major - nested: {100 * (by['row-major']['top1'] - by['nested']['top1']):+.2f}")
    print(f"row-major - random: {100 * (by['row-major']['top1'] - by['random']['top1']):+.2f}")
    return 0


def cmd_flops(args) -> int:
    from .learner.net import ConvNetSpec

    c, h, w = args.input_shape
    spec = ConvNetSpec((c, h, w), args.classes)
    macs = flops_estimate(spec)
    print(f"MACs {macs} FLOPs {2 * macs}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flattenkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def plan_flags(p, with_seed=True):
        p.add_argument("--kind", choices=[k.value for k in Kind])
        p.add_argument("--grid", help="explicit RxC block grid")
        p.add_argument("--nested-n", type=int, dest="nested_n")
        p.add_argument("--transpose", action="store_true", default=None,
                       help="place consecutive frames top-to-bottom first")
        if with_seed:
            p.add_argument("--seed", type=int)

    def common(p):
        p.add_argument("--config", help="JSON file; flags override its values")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("flatten", help="tile a clip into one composite")
    p.add_argument("input", help="frame directory or tensor file")
    p.add_argument("--out", required=True, help=".fltn tensor or .png")
    p.add_argument("--frames", type=int, help="uniformly resample the clip to this many frames")
    p.add_argument("--png", help="also write a PNG preview")
    p.add_argument("--normalization", choices=["clip01", "minmax"], default="clip01")
    p.add_argument("--pattern", default="frame_%05d.png")
    plan_flags(p)
    common(p)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("unflatten", help="recover the clip from a composite tensor")
    p.add_argument("input")
    p.add_argument("--plan", help="plan JSON (default: <input>.plan.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--frames-dir", action="store_true", help="write PNG frames instead of a tensor")
    p.add_argument("--pattern", default="frame_%05d.png")
    p.set_defaults(func=cmd_unflatten)

    p = sub.add_parser("sample", help="cut AxBxCxD evaluation views from a clip")
    p.add_argument("input")
    p.add_argument("--views")
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="frame_%05d.png")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("synth", help="generate the moving-sprite dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--train", type=int, help="clips per class")
    p.add_argument("--val", type=int, help="clips per class")
    p.add_argument("--seed", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--sprite-size", type=int, dest="sprite_size")
    p.add_argument("--shape", choices=["square", "cross"])
    p.add_argument("--noise", type=float)
    common(p)
    p.set_defaults(func=cmd_synth)

    def train_flags(p):
        p.add_argument("--data", help="directory holding train.csv and val.csv")
        p.add_argument("--train-manifest", dest="train_manifest")
        p.add_argument("--val-manifest", dest="val_manifest")
        p.add_argument("--out", required=True)
        p.add_argument("--kind", "--flatten", dest="kind", choices=[k.value for k in Kind])
        p.add_argument("--grid")
        p.add_argument("--nested-n", type=int, dest="nested_n")
        p.add_argument("--epochs", type=int)
        p.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
        p.add_argument("--lr", type=float, dest="base_lr")
        p.add_argument("--batch", type=int)
        p.add_argument("--weight-decay", type=float, dest="weight_decay")
        p.add_argument("--views")
        p.add_argument("--augment", action="store_true", default=None)
        common(p)

    p = sub.add_parser("train", help="train the conv net on flattened clips")
    train_flags(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="multi-view evaluation of a trained run")
    p.add_argument("--run", required=True, help="train output directory or checkpoint directory")
    p.add_argument("--manifest")
    p.add_argument("--data")
    p.add_argument("--views")
    p.add_argument("--out", help="metrics CSV (default: <run>/metrics.csv)")
    plan_flags(p)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="row-major vs nested vs random under one budget")
    train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("flops", help="MAC count of the default net for an input shape")
    p.add_argument("input_shape", type=int, nargs=3, metavar=("C", "H", "W"))
    p.add_argument("--classes", type=int, default=8)
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"flattenkit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FlattenKitError, ValueError, NonFiniteError) as exc:
        print(f"flattenkit: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
