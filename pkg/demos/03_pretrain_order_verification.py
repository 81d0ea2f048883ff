#!/usr/bin/env python3
"""Pretrain the shared-weight tuple-order classifier on synthetic clips.

Three frames go through one backbone (identical parameter tensors, not
copies); the concatenated embeddings feed a single linear layer that says
"in order" or "shuffled". Budgets here are trimmed so the demo finishes in
a couple of minutes; the acceptance suite runs the full desk-scale recipe.
"""

from pathlib import Path

from order_verify import BackboneConfig, SamplerConfig, TrainConfig, TuplePool, gen_corpus
from order_verify.corpus import load_manifest
from order_verify.pipeline import line_plot_svg, pretrain
from order_verify.sampler import build_shards

OUT = Path(__file__).parent / "output" / "pretrain"


def main():
    corpus = OUT / "corpus"
    if not (corpus / "manifest.jsonl").exists():
        gen_corpus(corpus, 60, {"pendulum": 1 / 3, "linear": 1 / 3, "bounce": 1 / 3}, seed=11)
    entries = load_manifest(corpus / "manifest.jsonl")

    shards = OUT / "shards"
    if not (shards / "train.tupl").exists():
        stats = build_shards(
            corpus, entries, SamplerConfig(tau_max=12, tau_min=4, seed=0), shards, draws_per_clip=8
        )
        for split, agg in stats["splits"].items():
            print(f"{split}: {agg['samples_written']} samples, rejection {agg['filter_rejection_rate']:.2%}")

    train_pool = TuplePool.from_shards([shards / "train.tupl"])
    heldout_pool = TuplePool.from_shards([shards / "heldout.tupl"])
    print(f"train {len(train_pool)} tuples / heldout {len(heldout_pool)} (balanced)")

    cfg = TrainConfig(
        task="three_order", iterations=300, batch_size=32, base_lr=1e-3,
        neg_fraction=0.75, eval_every=50, seed=0,
    )
    bundle, log = pretrain(cfg, BackboneConfig(dropout_p=0.0), train_pool, heldout_pool)

    print("\niteration  train_loss  heldout_accuracy")
    for it, loss, acc in log.rows:
        print(f"{it:9d}  {loss:10.4f}  {acc:16.4f}")

    bundle.save(OUT / "model.ckpt")
    log.to_csv(OUT / "metrics.csv")
    xs = [r[0] for r in log.rows]
    line_plot_svg(
        {"train_loss": (xs, [r[1] for r in log.rows]), "heldout_acc": (xs, [r[2] for r in log.rows])},
        OUT / "metrics.svg",
        title="order-verification pretraining",
        xlabel="iteration",
    )
    print(f"\ncheckpoint -> {OUT / 'model.ckpt'}")
    print(f"curves     -> {OUT / 'metrics.svg'}")


if __name__ == "__main__":
    main()
