#!/usr/bin/env python3
"""Keypoint regression with PCK curves, plus receptive-field inspection.

Pose finetuning regresses the pendulum bob center and rod midpoint from a
single frame (AdaGrad, Euclidean loss on [0,1]-normalized coordinates). A
keypoint counts as correct at threshold alpha when its error is within
alpha times the object's bounding-box diagonal.
"""

from pathlib import Path

import numpy as np

from order_verify import ModelBundle, TrainConfig, gen_corpus
from order_verify.corpus import load_clip, load_manifest
from order_verify.pipeline import (
    eval_pose_pck,
    finetune,
    line_plot_svg,
    pck_curve,
    pose_pool,
    predict_keypoint_sets,
    top_activations,
)

HERE = Path(__file__).parent / "output"
CKPT = HERE / "pretrain" / "model.ckpt"
OUT = HERE / "pose"


def main():
    if not CKPT.exists():
        raise SystemExit("run demos/03_pretrain_order_verification.py first")
    pretext = ModelBundle.load(CKPT)

    corpus = OUT / "corpus"
    if not (corpus / "manifest.jsonl").exists():
        gen_corpus(corpus, 40, {"pendulum": 1.0}, seed=31)
    entries = load_manifest(corpus / "manifest.jsonl")
    clips = {s: [load_clip(corpus, e) for e in entries if e["split"] == s] for s in ("train", "heldout", "test")}

    train_data = pose_pool(clips["train"], frames_per_clip=10, seed=0)
    eval_data = pose_pool(clips["test"] + clips["heldout"], frames_per_clip=10, seed=0)
    cfg = TrainConfig(task="pose", iterations=400, batch_size=16, base_lr=5e-4,
                      optimizer="adagrad", weight_decay=0.0, seed=0, eval_every=0)

    print("pose finetuning (bob center + rod midpoint), PCK@0.2:")
    bundles = {}
    for name, init in (("pretext init", pretext), ("random init", None)):
        bundle, _ = finetune(init, "pose", cfg, train_data, backbone_cfg=pretext.backbone.cfg)
        bundles[name] = bundle
        print(f"  {name:13s} {eval_pose_pck(bundle, eval_data):.3f}")

    # PCK curve for the pretext-initialized model
    preds, gts = predict_keypoint_sets(bundles["pretext init"], eval_data)
    alphas = [0.05 * i for i in range(1, 11)]
    rows = pck_curve(preds, gts, alphas)
    print("\nalpha -> mean PCK:", "  ".join(f"{r['alpha']:.2f}:{r['mean']:.2f}" for r in rows))
    OUT.mkdir(parents=True, exist_ok=True)
    names = [k for k in rows[0] if k not in ("alpha", "mean")]
    series = {n: ([r["alpha"] for r in rows], [r[n] for r in rows]) for n in names + ["mean"]}
    line_plot_svg(series, OUT / "pck.svg", title="PCK vs alpha", xlabel="alpha", ylabel="PCK")
    print(f"curve -> {OUT / 'pck.svg'}")

    # top-activating frames for a mid-stack unit, with receptive fields
    frames = []
    for clip in clips["test"]:
        stack = clip.pixel_stack().astype(np.float32)
        frames.extend((f"{clip.id}:{i}", stack[i]) for i in range(0, len(clip), 6))
    hits = top_activations(bundles["pretext init"], "pool2", unit=3, corpus=frames, k=3)
    print("\ntop pool2/unit3 activations (frame, location, input-space box):")
    for h in hits:
        print(f"  {h.frame_id:18s} at {h.location} box rows {h.box[0]}..{h.box[1]} cols {h.box[2]}..{h.box[3]}")


if __name__ == "__main__":
    main()
