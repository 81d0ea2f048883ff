#!/usr/bin/env python3
"""What the pretext features buy you: transfer, retrieval, fill-in-the-blank.

Run demos/03_pretrain_order_verification.py first; this script loads its
checkpoint. It then:
  1. finetunes a 4-class motion classifier from that checkpoint vs from
     random init at the same small budget,
  2. retrieves nearest-neighbor frames in embedding space (with SSD dedup),
  3. picks the middle frame between two endpoints among distractors --
     including on static clips, where the task is expected to fail (no
     motion, nothing to order).
"""

from pathlib import Path

import numpy as np

from order_verify import ModelBundle, TrainConfig, gen_corpus
from order_verify.corpus import load_clip, load_manifest
from order_verify.pipeline import (
    build_fill_trials,
    classify_pool,
    eval_classify,
    fill_accuracy,
    finetune,
    nn_retrieve,
)
from order_verify.sampler import SamplerConfig

HERE = Path(__file__).parent / "output"
CKPT = HERE / "pretrain" / "model.ckpt"


def main():
    if not CKPT.exists():
        raise SystemExit("run demos/03_pretrain_order_verification.py first")
    pretext = ModelBundle.load(CKPT)

    corpus = HERE / "transfer_corpus"
    if not (corpus / "manifest.jsonl").exists():
        gen_corpus(corpus, 48, {"pendulum": 0.25, "linear": 0.25, "bounce": 0.25, "static": 0.25}, seed=21)
    entries = load_manifest(corpus / "manifest.jsonl")
    clips = {s: [load_clip(corpus, e) for e in entries if e["split"] == s] for s in ("train", "heldout", "test")}

    # --- 1. transfer: pretext init vs random init, same budget ------------
    by_kind = {}
    for c in clips["train"]:
        by_kind.setdefault(c.label, []).append(c)
    subset = [c for k in sorted(by_kind) for c in sorted(by_kind[k], key=lambda c: c.id)[:4]]
    train_data = classify_pool(subset, frames_per_clip=8, seed=0)
    cfg = TrainConfig(task="classify", iterations=200, batch_size=16, base_lr=1e-3, seed=0, eval_every=0)
    results = {}
    for name, init in (("pretext init", pretext), ("random init", None)):
        bundle, _ = finetune(init, "classify", cfg, train_data, backbone_cfg=pretext.backbone.cfg)
        results[name] = eval_classify(bundle, clips["test"] + clips["heldout"])
    print("4-class accuracy at a 200-iteration budget:")
    for name, acc in results.items():
        print(f"  {name:13s} {acc:.3f}")

    # --- 2. nearest neighbors in embedding space --------------------------
    frames = []
    for clip in clips["test"] + clips["heldout"]:
        stack = clip.pixel_stack().astype(np.float32)
        frames.extend((clip.id, i, stack[i]) for i in range(0, len(clip), 4))
    query_clip, query_idx, query_pixels = frames[0]
    hits = nn_retrieve(pretext, (query_clip, query_pixels), frames, k=5, dedup_ssd_threshold=5.0)
    print(f"\nnearest neighbors of {query_clip}:{query_idx} (own clip excluded, SSD-dedup on):")
    for h in hits:
        print(f"  {h.clip_id}:{h.frame_index:<3d} d={h.distance:.3f}")

    # --- 3. fill in the blank ---------------------------------------------
    moving = [c for c in clips["test"] + clips["heldout"] if c.label != "static"]
    static = [c for c in clips["test"] + clips["heldout"] if c.label == "static"]
    trials = build_fill_trials(moving, SamplerConfig(tau_max=12, tau_min=4, seed=0), 40, 5, seed=3)
    print(f"\nfill-in-the-blank, 5 candidates (chance 0.20):")
    print(f"  moving clips: {fill_accuracy(pretext, trials):.2f}")
    if static:
        trials_s = build_fill_trials(static, SamplerConfig(tau_max=12, tau_min=4, seed=0), 20, 5, seed=3)
        print(f"  static clips: {fill_accuracy(pretext, trials_s):.2f}  <- expected failure: no motion, all candidates look alike")


if __name__ == "__main__":
    main()
