"""``order-verify``: one executable over the corpus/sampling/training pipeline.

Subcommands: gen, sample, pretrain, finetune, eval, nn, fill, pck,
activations, plot. Every subcommand is deterministic given (config, seed),
writes its effective configuration JSON next to its artifacts, and exits 0
on success, 1 on domain/validation errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .corpus import KINDS, SynthConfig, gen_corpus, load_clip, load_manifest
from .errors import OrderVerifyError
from .model import BackboneConfig
from .motion import MotionConfig
from .pipeline import (
    ModelBundle,
    TrainConfig,
    TuplePool,
    build_fill_trials,
    classify_pool,
    eval_classify,
    eval_pose_pck,
    eval_tuple_accuracy,
    fill_accuracy,
    finetune,
    line_plot_svg,
    nn_retrieve,
    pck_curve,
    pose_pool,
    predict_keypoint_sets,
    pretrain,
    top_activations,
)
from .sampler import SamplerConfig, build_shards

log = logging.getLogger("order_verify")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _merged(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _echo_config(out_dir: Path, command: str, effective: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}_config.json").write_text(json.dumps(effective, indent=2, sort_keys=True))


def _clips_by_split(manifest_path: Path, splits: tuple[str, ...]):
    entries = load_manifest(manifest_path)
    root = manifest_path.parent
    return {s: [load_clip(root, e) for e in entries if e["split"] == s] for s in splits}


def _train_config(section: dict) -> TrainConfig:
    known = {f: section[f] for f in TrainConfig().to_dict() if f in section}
    return TrainConfig(**known)


def _alpha_grid(spec: str) -> list[float]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise OrderVerifyError(f"alphas: expected start:stop:step, got {spec!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise OrderVerifyError(f"alphas: bad grid {spec!r}")
    return [float(a) for a in np.arange(start, stop + step / 2, step)]


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_gen(args, cfg_file: dict) -> int:
    mix: dict[str, float] = {}
    kinds = args.kind or ["pendulum"]
    explicit = [k for k in kinds if "=" in k]
    if explicit and len(explicit) != len(kinds):
        raise OrderVerifyError("kind: mix fractions must be given for all kinds or none")
    if explicit:
        for item in kinds:
            name, frac = item.split("=", 1)
            mix[name] = float(frac)
    else:
        for name in kinds:
            mix[name] = 1.0 / len(kinds)
    synth = _merged(
        cfg_file.get("synth", {}),
        {
            "n_frames": args.frames,
            "size": args.size,
            "object_size": args.object_size,
            "amplitude": args.amplitude,
            "noise_std": args.noise_std,
            "fps": args.fps,
        },
    )
    base = SynthConfig(kind="static", **synth)
    out = Path(args.out)
    entries = gen_corpus(out, args.n, mix, args.seed, base)
    _echo_config(out, "gen", {"mix": mix, "n": args.n, "seed": args.seed, "synth": synth})
    print(f"wrote {len(entries)} clips and manifest to {out / 'manifest.jsonl'}")
    return 0


def _cmd_sample(args, cfg_file: dict) -> int:
    section = _merged(
        cfg_file.get("sampler", {}),
        {
            "tau_max": args.tau_max,
            "tau_min": args.tau_min,
            "ssd_min": args.ssd_min,
            "close_tau": args.close_tau,
            "seed": args.seed,
        },
    )
    cfg = SamplerConfig(**{k: v for k, v in section.items() if k in SamplerConfig().__dict__})
    manifest = Path(args.manifest)
    entries = load_manifest(manifest)
    out = Path(args.out)
    stats = build_shards(
        manifest.parent,
        entries,
        cfg,
        out,
        draws_per_clip=args.draws_per_clip,
        task=args.task,
        motion_cfg=MotionConfig(),
        balance_eval=not args.no_balance_eval,
    )
    _echo_config(out, "sample", {"sampler": section, "task": args.task, "draws_per_clip": args.draws_per_clip})
    for split, agg in stats["splits"].items():
        print(
            f"{split}: {agg['samples_written']} samples "
            f"({agg['positives']} pos / {agg['negatives']} neg, "
            f"rejection rate {agg['filter_rejection_rate']:.3f})"
        )
    return 0


def _cmd_pretrain(args, cfg_file: dict) -> int:
    train_section = _merged(
        cfg_file.get("train", {}),
        {
            "task": args.task,
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "neg_fraction": args.neg_fraction,
            "base_lr": args.lr,
            "optimizer": args.optimizer,
            "eval_every": args.eval_every,
            "seed": args.seed,
        },
    )
    cfg = _train_config(train_section)
    backbone_cfg = BackboneConfig.from_dict(cfg_file["backbone"]) if "backbone" in cfg_file else BackboneConfig()
    shards = Path(args.shards)
    train_pool = TuplePool.from_shards([shards / "train.tupl"])
    heldout_path = shards / "heldout.tupl"
    heldout_pool = TuplePool.from_shards([heldout_path]) if heldout_path.exists() else None
    bundle, metrics = pretrain(cfg, backbone_cfg, train_pool, heldout_pool)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle.save(out / "model.ckpt")
    metrics.to_csv(out / "metrics.csv")
    _echo_config(out, "pretrain", {"train": cfg.to_dict(), "backbone": backbone_cfg.to_dict()})
    final = metrics.final_metric()
    print(f"pretrained {cfg.task} for {cfg.iterations} iterations; final {metrics.metric_name} = {final:.4f}")
    return 0


def _cmd_finetune(args, cfg_file: dict) -> int:
    train_section = _merged(
        cfg_file.get("train", {}),
        {
            "task": args.task,
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "base_lr": args.lr,
            "optimizer": args.optimizer,
            "eval_every": args.eval_every,
            "seed": args.seed,
        },
    )
    cfg = _train_config(train_section)
    init = None
    if args.init != "random":
        init = ModelBundle.load(args.init)
    backbone_cfg = init.backbone.cfg if init else (
        BackboneConfig.from_dict(cfg_file["backbone"]) if "backbone" in cfg_file else BackboneConfig()
    )
    manifest = Path(args.manifest)
    clips = _clips_by_split(manifest, ("train", "heldout", "test"))
    if args.task == "classify":
        train_data = classify_pool(clips["train"], args.frames_per_clip, cfg.seed)
        bundle, metrics = finetune(
            init, "classify", cfg, train_data, eval_clips=clips["heldout"], backbone_cfg=backbone_cfg
        )
        final_eval = eval_classify(bundle, clips["test"])
        metric_desc = "test accuracy"
    else:
        train_data = pose_pool(clips["train"], args.frames_per_clip, cfg.seed)
        eval_data = pose_pool(clips["heldout"], args.frames_per_clip, cfg.seed)
        bundle, metrics = finetune(
            init, "pose", cfg, train_data, eval_data=eval_data, backbone_cfg=backbone_cfg
        )
        final_eval = eval_pose_pck(bundle, pose_pool(clips["test"], args.frames_per_clip, cfg.seed))
        metric_desc = "test PCK@0.2"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle.save(out / "model.ckpt")
    metrics.to_csv(out / "metrics.csv")
    _echo_config(
        out,
        "finetune",
        {"train": cfg.to_dict(), "init": args.init, "backbone": backbone_cfg.to_dict()},
    )
    print(f"finetuned {args.task}; {metric_desc} = {final_eval:.4f}")
    (out / "eval.json").write_text(json.dumps({metric_desc: final_eval}, sort_keys=True))
    return 0


def _cmd_eval(args, cfg_file: dict) -> int:
    bundle = ModelBundle.load(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results: dict = {"task": bundle.task}
    if args.shards:
        pool = TuplePool.from_shards([Path(args.shards)])
        results["tuple_accuracy"] = eval_tuple_accuracy(bundle, pool)
    elif args.manifest:
        clips = _clips_by_split(Path(args.manifest), (args.split,))[args.split]
        if bundle.task == "classify":
            results["accuracy"] = eval_classify(bundle, clips, args.frames_per_clip)
        elif bundle.task == "pose":
            pool = pose_pool(clips, args.frames_per_clip, 0)
            results["pck@0.2"] = eval_pose_pck(bundle, pool)
        else:
            raise OrderVerifyError(f"eval with a manifest needs a classify/pose checkpoint, got {bundle.task!r}")
    else:
        raise OrderVerifyError("eval: provide --shards or --manifest")
    _echo_config(out, "eval", {"ckpt": args.ckpt, "shards": args.shards, "manifest": args.manifest})
    (out / "eval.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    print(json.dumps(results, sort_keys=True))
    return 0


def _corpus_frames(manifest: Path, splits: tuple[str, ...]):
    clips_by_split = _clips_by_split(manifest, splits)
    corpus = []
    for split in splits:
        for clip in clips_by_split[split]:
            stack = clip.pixel_stack().astype(np.float32)
            for i in range(len(clip)):
                corpus.append((clip.id, i, stack[i]))
    return corpus


def _cmd_nn(args, cfg_file: dict) -> int:
    bundle = ModelBundle.load(args.ckpt)
    manifest = Path(args.manifest)
    clip_id, frame_idx = args.query.rsplit(":", 1)
    corpus = _corpus_frames(manifest, tuple(args.split))
    query_pixels = None
    for cid, idx, pixels in corpus:
        if cid == clip_id and idx == int(frame_idx):
            query_pixels = pixels
            break
    if query_pixels is None:
        raise OrderVerifyError(f"query frame {args.query!r} not found in splits {args.split}")
    hits = nn_retrieve(
        bundle,
        (clip_id, query_pixels),
        corpus,
        k=args.k,
        dedup_ssd_threshold=args.dedup_ssd,
    )
    out = Path(args.out)
    _echo_config(out, "nn", {"ckpt": args.ckpt, "query": args.query, "k": args.k, "dedup_ssd": args.dedup_ssd})
    payload = [
        {"clip_id": h.clip_id, "frame_index": h.frame_index, "distance": h.distance} for h in hits
    ]
    (out / "retrieval.json").write_text(json.dumps(payload, indent=2))
    for h in hits:
        print(f"{h.clip_id}:{h.frame_index}  d={h.distance:.4f}")
    return 0


def _cmd_fill(args, cfg_file: dict) -> int:
    bundle = ModelBundle.load(args.ckpt)
    manifest = Path(args.manifest)
    clips = _clips_by_split(manifest, (args.split,))[args.split]
    sampler_cfg = SamplerConfig(
        tau_max=args.tau_max, tau_min=args.tau_min, seed=args.seed
    )
    trials = build_fill_trials(clips, sampler_cfg, args.trials, args.candidates, args.seed)
    acc = fill_accuracy(bundle, trials)
    out = Path(args.out)
    _echo_config(out, "fill", {"trials": args.trials, "candidates": args.candidates, "seed": args.seed})
    result = {"accuracy": acc, "chance": 1.0 / args.candidates, "trials": args.trials}
    (out / "fill.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_pck(args, cfg_file: dict) -> int:
    bundle = ModelBundle.load(args.ckpt)
    if bundle.task != "pose":
        raise OrderVerifyError(f"pck needs a pose checkpoint, got {bundle.task!r}")
    clips = _clips_by_split(Path(args.manifest), (args.split,))[args.split]
    pool = pose_pool(clips, args.frames_per_clip, 0)
    preds, gts = predict_keypoint_sets(bundle, pool)
    alphas = _alpha_grid(args.alphas)
    rows = pck_curve(preds, gts, alphas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "pck.csv"
    names = [k for k in rows[0] if k not in ("alpha", "mean")]
    with open(csv_path, "w") as fh:
        fh.write(",".join(["alpha"] + names + ["mean"]) + "\n")
        for row in rows:
            fh.write(",".join(f"{row[k]:.6g}" for k in ["alpha"] + names + ["mean"]) + "\n")
    series = {name: ([r["alpha"] for r in rows], [r[name] for r in rows]) for name in names + ["mean"]}
    line_plot_svg(series, out / "pck.svg", title="PCK vs alpha", xlabel="alpha", ylabel="PCK")
    _echo_config(out, "pck", {"ckpt": args.ckpt, "alphas": args.alphas, "split": args.split})
    print(f"wrote {csv_path} ({len(rows)} rows) and {out / 'pck.svg'}")
    return 0


def _cmd_activations(args, cfg_file: dict) -> int:
    bundle = ModelBundle.load(args.ckpt)
    corpus = _corpus_frames(Path(args.manifest), tuple(args.split))
    frames = [(f"{cid}:{idx}", pixels) for cid, idx, pixels in corpus]
    hits = top_activations(bundle, args.layer, args.unit, frames, k=args.k)
    out = Path(args.out)
    _echo_config(out, "activations", {"layer": args.layer, "unit": args.unit, "k": args.k})
    payload = [
        {
            "frame": h.frame_id,
            "location": list(h.location),
            "receptive_field": list(h.box),
            "activation": h.activation,
        }
        for h in hits
    ]
    (out / "activations.json").write_text(json.dumps(payload, indent=2))
    for h in hits:
        print(f"{h.frame_id} @{h.location} rf={h.box} act={h.activation:.4f}")
    return 0


def _cmd_plot(args, cfg_file: dict) -> int:
    import csv as _csv

    with open(args.csv) as fh:
        reader = _csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise OrderVerifyError(f"plot: {args.csv} has no data rows")
    columns = args.y or [c for c in rows[0] if c != args.x]
    series = {}
    for col in columns:
        xs, ys = [], []
        for row in rows:
            try:
                x, y = float(row[args.x]), float(row[col])
            except (TypeError, ValueError):
                continue
            xs.append(x)
            ys.append(y)
        if xs:
            series[col] = (xs, ys)
    if not series:
        raise OrderVerifyError("plot: no numeric series found")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    line_plot_svg(series, out, title=args.title, xlabel=args.x, ylabel="")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="order-verify",
        description="Temporal-order-verification pretext training and evaluation on synthetic video.",
    )
    parser.add_argument("--log-level", default="WARNING", help="logging level name")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file mirroring module configs")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--kind", action="append", help=f"kind or kind=fraction; one of {KINDS} (repeatable)")
    p.add_argument("--n", type=int, default=10, help="number of clips")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--object-size", type=int, default=None)
    p.add_argument("--amplitude", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--fps", type=float, default=None)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("sample", help="sample tuples/pairs into training shards")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", default="three_order", choices=["three_order", "two_close", "two_order"])
    p.add_argument("--tau-max", type=int, default=None)
    p.add_argument("--tau-min", type=int, default=None)
    p.add_argument("--ssd-min", type=float, default=None)
    p.add_argument("--close-tau", type=int, default=None)
    p.add_argument("--draws-per-clip", type=int, default=12)
    p.add_argument("--no-balance-eval", action="store_true")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("pretrain", help="pretext training on shards")
    common(p)
    p.add_argument("--task", default=None, choices=list(pipeline.PRETEXT_TASKS))
    p.add_argument("--shards", required=True, help="directory with train.tupl / heldout.tupl")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--neg-fraction", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", default=None, choices=["sgd", "adagrad"])
    p.add_argument("--eval-every", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised transfer from a checkpoint or random init")
    common(p)
    p.add_argument("--task", required=True, choices=["classify", "pose"])
    p.add_argument("--init", default="random", help="checkpoint path or 'random'")
    p.add_argument("--manifest", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", default=None, choices=["sgd", "adagrad"])
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--frames-per-clip", type=int, default=12)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on shards or a manifest")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--shards", default=None, help="a .tupl shard file for tuple accuracy")
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--frames-per-clip", type=int, default=5)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("nn", help="nearest-neighbor frame retrieval in embedding space")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--query", required=True, help="clip_id:frame_index")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--dedup-ssd", type=float, default=0.0)
    p.add_argument("--split", action="append", default=None, help="corpus splits (repeatable)")
    p.set_defaults(func=_cmd_nn)

    p = sub.add_parser("fill", help="middle-frame selection accuracy")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--candidates", type=int, default=5)
    p.add_argument("--tau-max", type=int, default=12)
    p.add_argument("--tau-min", type=int, default=3)
    p.set_defaults(func=_cmd_fill)

    p = sub.add_parser("pck", help="PCK curve for a pose checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--alphas", default="0.05:0.5:0.05", help="start:stop:step grid")
    p.add_argument("--frames-per-clip", type=int, default=12)
    p.set_defaults(func=_cmd_pck)

    p = sub.add_parser("activations", help="top activating frames for a unit, with receptive fields")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", action="append", default=None)
    p.add_argument("--layer", required=True, help="conv<i> or pool<i>")
    p.add_argument("--unit", type=int, required=True)
    p.add_argument("--k", type=int, default=9)
    p.set_defaults(func=_cmd_activations)

    p = sub.add_parser("plot", help="render a CSV as an SVG line plot")
    common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--x", default="iteration")
    p.add_argument("--y", action="append", default=None)
    p.add_argument("--title", default="")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    if getattr(args, "split", "unset") is None:
        args.split = ["train", "heldout", "test"]
    try:
        cfg_file = _load_config_file(getattr(args, "config", None))
        return args.func(args, cfg_file)
    except (OrderVerifyError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
