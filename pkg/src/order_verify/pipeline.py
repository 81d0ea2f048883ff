"""Batch construction, pretraining/finetuning loops, and evaluation.

Training is deterministic given (config, seed): data order, dropout masks,
and parameter init all come from per-purpose seeded streams, and gradient
reductions happen in fixed order. Metrics are recorded as (iteration,
train_loss, heldout_metric) rows, CSV-serializable.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import KeypointSet, VideoClip, frame_ssd
from .errors import ConfigError
from .model import (
    Backbone,
    BackboneConfig,
    LinearHead,
    TASKS,
    config_hash,
    contrastive_loss,
    pair_embeddings,
    pair_logits,
    triplet_logits,
)
from .motion import motion_profile
from .sampler import SamplerConfig, draw_five, read_shard_arrays
from .tensor import OptimState, Tensor, no_grad, optimizer_step, softmax, softmax_xent, save_checkpoint, load_checkpoint

PRETEXT_TASKS = ("three_order", "two_close", "two_order", "drlim", "tempcoh")


# ---------------------------------------------------------------------------
# Pools and batching
# ---------------------------------------------------------------------------


@dataclass
class TuplePool:
    """In-memory shard contents: (M, V, h, w, c) float32 frames + labels."""

    frames: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_shards(cls, paths: list[str | Path]) -> "TuplePool":
        frames, labels = [], []
        for p in paths:
            f, l = read_shard_arrays(p)
            frames.append(f)
            labels.append(l)
        return cls(np.concatenate(frames), np.concatenate(labels))


@dataclass
class FramePool:
    """Single-frame pool for classify/pose: (M, h, w, c) + targets."""

    frames: np.ndarray
    labels: np.ndarray  # (M,) int class ids, or (M, 2K) float targets
    class_names: list[str] | None = None
    keypoint_names: list[str] | None = None
    ref_lengths: np.ndarray | None = None


@dataclass
class BatchSpec:
    batch_size: int = 64
    neg_fraction: float = 0.75
    seed: int = 0
    shards: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")
        if not 0.0 < self.neg_fraction < 1.0:
            raise ConfigError("neg_fraction", "must be in (0, 1)")


class ClassBalancedBatcher:
    """Exact per-batch class counts via per-class shuffled queues.

    Each class is sampled without replacement until its pool is exhausted,
    then reshuffled (a warning is emitted once). Per-batch negative count is
    round(neg_fraction * batch_size) exactly.
    """

    def __init__(self, pool: TuplePool, spec: BatchSpec):
        spec.validate()
        self.pool = pool
        self.spec = spec
        self.rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xBA7C)))
        self.by_class = {
            0: np.flatnonzero(pool.labels == 0),
            1: np.flatnonzero(pool.labels == 1),
        }
        if len(self.by_class[0]) == 0 or len(self.by_class[1]) == 0:
            raise ValueError("batcher needs both classes present in the pool")
        self.queues = {c: list(self.rng.permutation(idx)) for c, idx in self.by_class.items()}
        self.n_neg = int(round(spec.neg_fraction * spec.batch_size))
        self.n_pos = spec.batch_size - self.n_neg
        self._warned = False

    def _take(self, cls: int, count: int) -> list[int]:
        out: list[int] = []
        q = self.queues[cls]
        while len(out) < count:
            if not q:
                if not self._warned:
                    warnings.warn("class pool exhausted mid-epoch; reshuffling remainder")
                    self._warned = True
                self.queues[cls] = q = list(self.rng.permutation(self.by_class[cls]))
            out.append(int(q.pop()))
        return out

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self._take(0, self.n_neg) + self._take(1, self.n_pos)
        order = self.rng.permutation(len(idx))
        idx = np.array(idx)[order]
        return self.pool.frames[idx], self.pool.labels[idx].astype(np.int64)


def make_batch(batcher: ClassBalancedBatcher) -> tuple[np.ndarray, np.ndarray]:
    """One (frames, labels) mini-batch with exact class counts."""
    return batcher.next_batch()


class ShuffledBatcher:
    """Uniform without-replacement batches over a FramePool (classify/pose)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0x50FF)))
        self.queue: list[int] = []

    def next_indices(self) -> np.ndarray:
        while len(self.queue) < self.batch_size:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        out, self.queue = self.queue[: self.batch_size], self.queue[self.batch_size :]
        return np.array(out)


# ---------------------------------------------------------------------------
# Train configuration and metrics
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    task: str = "three_order"
    iterations: int = 3000
    base_lr: float = 1e-3
    lr_decay: float = 0.1
    decay_steps: list[int] = field(default_factory=list)
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    neg_fraction: float = 0.75
    eval_every: int = 100
    seed: int = 0
    margin: float = 1.0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError("task", f"unknown task {self.task!r}")
        if self.iterations < 0:
            raise ConfigError("iterations", "must be >= 0")
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ConfigError("decay_steps", "must be strictly increasing")
        if self.optimizer not in ("sgd", "adagrad"):
            raise ConfigError("optimizer", "must be 'sgd' or 'adagrad'")

    def lr_at(self, iteration: int) -> float:
        lr = self.base_lr
        for step in self.decay_steps:
            if iteration > step:
                lr *= self.lr_decay
        return lr

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "iterations": self.iterations,
            "base_lr": self.base_lr,
            "lr_decay": self.lr_decay,
            "decay_steps": list(self.decay_steps),
            "optimizer": self.optimizer,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "neg_fraction": self.neg_fraction,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "margin": self.margin,
        }


@dataclass
class MetricsLog:
    metric_name: str = "heldout_metric"
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    aborted: bool = False

    def add(self, iteration: int, train_loss: float, metric: float) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("MetricsLog iterations must be monotone increasing")
        self.rows.append((iteration, train_loss, metric))

    def final_metric(self) -> float:
        return self.rows[-1][2] if self.rows else float("nan")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", self.metric_name])
            for row in self.rows:
                writer.writerow(row)


@dataclass
class ModelBundle:
    """A trained (or initialized) backbone + task head + provenance meta."""

    backbone: Backbone
    head: LinearHead | None
    task: str
    meta: dict = field(default_factory=dict)
    opt_state: OptimState | None = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.backbone.state_arrays()
        if self.head is not None:
            arrays.update({f"{k}": v.data for k, v in self.head.params.items()})
        if self.opt_state is not None:
            arrays.update({f"opt/{k}": v for k, v in self.opt_state.buffers.items()})
        return arrays

    def trainable_params(self) -> dict[str, Tensor]:
        params = {f"backbone/{k}": v for k, v in self.backbone.params.items()}
        if self.head is not None:
            params.update(self.head.params)
        return params

    def save(self, path: str | Path) -> None:
        meta = dict(self.meta)
        meta.update({"task": self.task, "backbone": self.backbone.cfg.to_dict()})
        if self.head is not None:
            meta["head_shape"] = list(self.head.w.data.shape)
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        arrays, meta = load_checkpoint(path)
        cfg = BackboneConfig.from_dict(meta["backbone"])
        backbone = Backbone.init(cfg, np.random.default_rng(0))
        backbone.load_state_arrays(arrays)
        head = None
        if "head_shape" in meta:
            in_dim, out_dim = meta["head_shape"]
            head = LinearHead(
                Tensor(arrays["head/w"].copy(), requires_grad=True),
                Tensor(arrays["head/b"].copy(), requires_grad=True),
            )
        opt = None
        buffers = {k[len("opt/") :]: v.copy() for k, v in arrays.items() if k.startswith("opt/")}
        if buffers:
            opt = OptimState(kind=meta.get("optimizer", "sgd"), buffers=buffers)
        return cls(backbone=backbone, head=head, task=meta.get("task", ""), meta=meta, opt_state=opt)


def _snapshot(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in bundle.state_arrays().items()}


def _restore(bundle: ModelBundle, arrays: dict[str, np.ndarray]) -> None:
    bundle.backbone.load_state_arrays(arrays)
    if bundle.head is not None:
        bundle.head.w.data = arrays["head/w"].copy()
        bundle.head.b.data = arrays["head/b"].copy()
    if bundle.opt_state is not None:
        bundle.opt_state.buffers = {
            k[len("opt/") :]: v.copy() for k, v in arrays.items() if k.startswith("opt/")
        }


# ---------------------------------------------------------------------------
# Task forward/loss dispatch
# ---------------------------------------------------------------------------


def _head_dims(task: str, backbone_cfg: BackboneConfig, out_classes: int | None = None) -> tuple[int, int] | None:
    e = backbone_cfg.embed_dim
    if task == "three_order":
        return 3 * e, 2
    if task in ("two_close", "two_order"):
        return 2 * e, 2
    if task in ("drlim", "tempcoh"):
        return None
    if task in ("classify", "pose"):
        # out_classes carries n_classes (classify) or 2K (pose); the head is
        # attached later when it is not known yet
        return None if out_classes is None else (e, int(out_classes))
    raise ConfigError("task", f"unknown task {task!r}")


def _task_loss(
    bundle: ModelBundle,
    cfg: TrainConfig,
    frames: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> Tensor:
    task = bundle.task
    if task == "three_order":
        logits = triplet_logits(bundle.backbone, bundle.head, frames, True, rng)
        return softmax_xent(logits, labels)
    if task in ("two_close", "two_order"):
        logits = pair_logits(bundle.backbone, bundle.head, frames[:, :2], True, rng)
        return softmax_xent(logits, labels)
    if task in ("drlim", "tempcoh"):
        e1, e2 = pair_embeddings(bundle.backbone, frames[:, :2], True, rng)
        dist = "l2" if task == "drlim" else "l1"
        return contrastive_loss(e1, e2, labels, cfg.margin, dist)
    if task == "classify":
        x = Tensor(bundle.backbone.preprocess(frames))
        e = bundle.backbone.forward(x, True, rng)
        return softmax_xent(bundle.head.forward(e), labels)
    if task == "pose":
        x = Tensor(bundle.backbone.preprocess(frames))
        e = bundle.backbone.forward(x, True, rng)
        pred = bundle.head.forward(e)
        diff = pred - Tensor(np.asarray(labels, dtype=np.float64))
        return (diff * diff).sum(axis=1).mean()
    raise ConfigError("task", f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def eval_tuple_accuracy(bundle: ModelBundle, pool: TuplePool, batch: int = 256) -> float:
    """Argmax-vs-label accuracy of the order (or pair) classifier on a pool."""
    if len(pool) == 0:
        raise ValueError("eval_tuple_accuracy: empty evaluation pool")
    correct = 0
    with no_grad():
        for lo in range(0, len(pool), batch):
            frames = pool.frames[lo : lo + batch]
            labels = pool.labels[lo : lo + batch]
            if bundle.task in ("two_close", "two_order"):
                logits = pair_logits(bundle.backbone, bundle.head, frames[:, :2]).data
            else:
                logits = triplet_logits(bundle.backbone, bundle.head, frames).data
            correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(pool)


def _contrastive_eval_loss(bundle: ModelBundle, pool: TuplePool, margin: float, batch: int = 256) -> float:
    dist = "l2" if bundle.task == "drlim" else "l1"
    total, n = 0.0, 0
    with no_grad():
        for lo in range(0, len(pool), batch):
            frames = pool.frames[lo : lo + batch]
            labels = pool.labels[lo : lo + batch]
            e1, e2 = pair_embeddings(bundle.backbone, frames[:, :2])
            loss = contrastive_loss(e1, e2, labels, margin, dist)
            total += float(loss.data) * len(labels)
            n += len(labels)
    return total / n


def embed_frames(backbone: Backbone, frames: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(frames), batch):
        out.append(backbone.embed(frames[lo : lo + batch]))
    return np.concatenate(out)


def eval_classify(bundle: ModelBundle, clips: list[VideoClip], frames_per_clip: int = 5) -> float:
    """Per-clip softmax averaged over K uniformly spaced frames, argmax vs label."""
    if frames_per_clip < 1:
        raise ConfigError("frames_per_clip", "must be >= 1")
    class_names = bundle.meta.get("classes")
    if not class_names:
        raise ValueError("eval_classify: bundle has no class mapping")
    index = {name: i for i, name in enumerate(class_names)}
    correct = 0
    for clip in clips:
        n = len(clip)
        k = min(frames_per_clip, n)
        picks = np.unique(np.linspace(0, n - 1, k).round().astype(int))
        batch = np.stack([clip.frames[i].pixels for i in picks])
        e = embed_frames(bundle.backbone, batch)
        probs = softmax(e @ bundle.head.w.data + bundle.head.b.data).mean(axis=0)
        if class_names[int(probs.argmax())] == clip.label:
            correct += 1
    return correct / len(clips)


def pck(
    preds: list[KeypointSet], gts: list[KeypointSet], alpha: float
) -> tuple[dict[str, float], float]:
    """Fraction of keypoints within alpha * ref_length of ground truth.

    Returns (per-keypoint-name PCK, mean over names). Names are matched per
    sample; every gt must carry a positive ref_length.
    """
    if len(preds) != len(gts):
        raise ValueError(f"pck: {len(preds)} predictions vs {len(gts)} ground truths")
    hits: dict[str, list[int]] = {}
    for p, g in zip(preds, gts):
        if g.ref_length is None or g.ref_length <= 0:
            raise ValueError("pck: ground truth missing positive ref_length")
        pmap = {name: (x, y) for name, x, y in p.points}
        for name, gx, gy in g.points:
            if name not in pmap:
                raise ValueError(f"pck: prediction missing keypoint {name!r}")
            px, py = pmap[name]
            ok = math.hypot(px - gx, py - gy) <= alpha * g.ref_length
            hits.setdefault(name, []).append(int(ok))
    per_kp = {name: float(np.mean(v)) for name, v in sorted(hits.items())}
    return per_kp, float(np.mean(list(per_kp.values())))


def pck_curve(
    preds: list[KeypointSet], gts: list[KeypointSet], alphas: list[float]
) -> list[dict]:
    """PCK at each alpha: rows of {alpha, <per-keypoint values>, mean}."""
    rows = []
    for a in alphas:
        per_kp, mean = pck(preds, gts, a)
        row = {"alpha": a}
        row.update(per_kp)
        row["mean"] = mean
        rows.append(row)
    return rows


@dataclass
class RetrievalHit:
    clip_id: str
    frame_index: int
    distance: float


def nn_retrieve(
    bundle: ModelBundle,
    query: tuple[str, np.ndarray],
    corpus: list[tuple[str, int, np.ndarray]],
    k: int = 5,
    dedup_ssd_threshold: float = 0.0,
    corpus_embeddings: np.ndarray | None = None,
) -> list[RetrievalHit]:
    """Nearest neighbors by embedding l2 distance, same-clip frames excluded.

    Results whose pixel SSD to an earlier-kept result is below the threshold
    are suppressed. ``corpus`` entries are (clip_id, frame_index, pixels);
    pass ``corpus_embeddings`` to reuse a cached embedding matrix.
    """
    if not corpus:
        raise ValueError("nn_retrieve: empty corpus")
    query_id, query_pixels = query
    if corpus_embeddings is None:
        corpus_embeddings = embed_frames(bundle.backbone, np.stack([c[2] for c in corpus]))
    qe = bundle.backbone.embed(query_pixels)
    dists = np.sqrt(((corpus_embeddings - qe) ** 2).sum(axis=1))
    order = sorted(
        (i for i in range(len(corpus)) if corpus[i][0] != query_id),
        key=lambda i: (dists[i], corpus[i][0], corpus[i][1]),
    )
    kept: list[RetrievalHit] = []
    kept_pixels: list[np.ndarray] = []
    for i in order:
        if len(kept) >= k:
            break
        pixels = corpus[i][2]
        if dedup_ssd_threshold > 0.0 and any(
            frame_ssd(pixels, prev) < dedup_ssd_threshold for prev in kept_pixels
        ):
            continue
        kept.append(RetrievalHit(corpus[i][0], corpus[i][1], float(dists[i])))
        kept_pixels.append(pixels)
    return kept


def order_scores(bundle: ModelBundle, f_start: np.ndarray, f_end: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """P(correct order) for each candidate placed between f_start and f_end."""
    n = len(candidates)
    triples = np.stack(
        [np.broadcast_to(f_start, candidates.shape), candidates, np.broadcast_to(f_end, candidates.shape)],
        axis=1,
    )
    with no_grad():
        logits = triplet_logits(bundle.backbone, bundle.head, triples).data
    return softmax(logits)[:, 1]


def fill_blank(bundle: ModelBundle, f_start: np.ndarray, f_end: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the candidate most likely to lie between the two frames.

    Ties break to the lowest candidate index.
    """
    candidates = np.asarray(candidates)
    if len(candidates) < 2:
        raise ValueError("fill_blank: need at least 2 candidates")
    if candidates.shape[1:] != np.asarray(f_start).shape:
        raise ValueError(
            f"fill_blank: candidate shape {candidates.shape[1:]} != frame shape {np.asarray(f_start).shape}"
        )
    return int(np.argmax(order_scores(bundle, f_start, f_end, candidates)))


# ---------------------------------------------------------------------------
# Receptive fields and top activations
# ---------------------------------------------------------------------------


def receptive_field(
    geometry: list[tuple[str, int, int, int]],
    layer: str,
    location: tuple[int, int],
    input_hw: tuple[int, int] | None = None,
) -> tuple[int, int, int, int]:
    """Input-space box (row0, row1, col0, col1), inclusive, for one unit.

    ``geometry`` is (name, kernel, stride, pad) per layer in forward order;
    the box is composed backwards from ``layer`` and clipped to the frame
    when ``input_hw`` is given.
    """
    names = [g[0] for g in geometry]
    if layer not in names:
        raise ValueError(f"receptive_field: unknown layer {layer!r}, have {names}")
    depth = names.index(layer)
    r0 = r1 = int(location[0])
    c0 = c1 = int(location[1])
    for name, k, s, p in reversed(geometry[: depth + 1]):
        r0, r1 = r0 * s - p, r1 * s - p + k - 1
        c0, c1 = c0 * s - p, c1 * s - p + k - 1
    if input_hw is not None:
        h, w = input_hw
        r0, r1 = max(r0, 0), min(r1, h - 1)
        c0, c1 = max(c0, 0), min(c1, w - 1)
    return (r0, r1, c0, c1)


@dataclass
class ActivationHit:
    frame_id: str
    location: tuple[int, int]
    box: tuple[int, int, int, int]
    activation: float


def top_activations(
    bundle: ModelBundle,
    layer: str,
    unit: int,
    corpus: list[tuple[str, np.ndarray]],
    k: int = 9,
    batch: int = 256,
) -> list[ActivationHit]:
    """Global top-k spatial activations of one channel across a frame corpus.

    Each hit carries the frame id, spatial location, and the input-space
    receptive-field box (clipped to frame bounds).
    """
    geometry = bundle.backbone.cfg.layer_geometry()
    names = [g[0] for g in geometry]
    if layer not in names:
        raise ValueError(f"top_activations: unknown layer {layer!r}")
    records: list[tuple[float, int, int, int]] = []
    for lo in range(0, len(corpus), batch):
        chunk = corpus[lo : lo + batch]
        feats = bundle.backbone.forward_features(np.stack([c[1] for c in chunk]))[layer]
        if not 0 <= unit < feats.shape[-1]:
            raise ValueError(f"top_activations: unit {unit} out of range for {feats.shape[-1]} channels")
        maps = feats[:, :, :, unit]
        for i in range(len(chunk)):
            flat = maps[i].argmax()
            r, c = np.unravel_index(flat, maps[i].shape)
            records.append((float(maps[i][r, c]), lo + i, int(r), int(c)))
    records.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    hits = []
    for act, idx, r, c in records[:k]:
        box = receptive_field(geometry, layer, (r, c), bundle.backbone.cfg.input_hw)
        hits.append(ActivationHit(corpus[idx][0], (r, c), box, act))
    return hits


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def init_bundle(
    task: str,
    backbone_cfg: BackboneConfig,
    seed: int,
    out_classes: int | None = None,
    init_from: ModelBundle | None = None,
) -> ModelBundle:
    """Fresh bundle for a task; optionally warm-start the backbone weights."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1417)))
    backbone = Backbone.init(backbone_cfg, rng)
    if init_from is not None:
        backbone.load_state_arrays(init_from.backbone.state_arrays())
    dims = _head_dims(task, backbone_cfg, out_classes)
    head = None if dims is None else LinearHead.init(dims[0], dims[1], rng)
    return ModelBundle(backbone=backbone, head=head, task=task)


def _input_mean(frames: np.ndarray) -> np.ndarray:
    """Per-channel mean over a (M, ..., h, w, c) frame array."""
    flat = frames.reshape(-1, frames.shape[-1]).astype(np.float64)
    return flat.mean(axis=0)


def _train_loop(
    bundle: ModelBundle,
    cfg: TrainConfig,
    next_batch,
    eval_fn,
    metric_name: str,
) -> MetricsLog:
    log = MetricsLog(metric_name=metric_name)
    opt = OptimState(
        kind=cfg.optimizer,
        lr=cfg.base_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    bundle.opt_state = opt
    params = bundle.trainable_params()
    drop_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD809)))
    last_good = _snapshot(bundle)
    for it in range(1, cfg.iterations + 1):
        opt.lr = cfg.lr_at(it)
        frames, labels = next_batch()
        loss = _task_loss(bundle, cfg, frames, labels, drop_rng)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            warnings.warn(f"non-finite loss at iteration {it}; aborting with last good checkpoint")
            _restore(bundle, last_good)
            log.aborted = True
            break
        log.loss_history.append(loss_val)
        for p in params.values():
            p.zero_grad()
        loss.backward()
        optimizer_step(params, opt)
        if cfg.eval_every > 0 and (it % cfg.eval_every == 0 or it == cfg.iterations):
            metric = eval_fn() if eval_fn is not None else float("nan")
            log.add(it, loss_val, metric)
            # the step after the loss check may have poisoned the params
            if all(np.isfinite(p.data).all() for p in params.values()):
                last_good = _snapshot(bundle)
    return log


def pretrain(
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    train_pool: TuplePool,
    heldout_pool: TuplePool | None = None,
) -> tuple[ModelBundle, MetricsLog]:
    """Pretext training on tuple/pair shards; returns the bundle + metrics."""
    cfg.validate()
    if cfg.task not in PRETEXT_TASKS:
        raise ConfigError("task", f"{cfg.task!r} is not a pretext task")
    bundle = init_bundle(cfg.task, backbone_cfg, cfg.seed)
    bundle.backbone.input_mean = _input_mean(train_pool.frames)
    bundle.meta = {
        "train": cfg.to_dict(),
        "config_hash": config_hash({"train": cfg.to_dict(), "backbone": backbone_cfg.to_dict()}),
        "optimizer": cfg.optimizer,
    }
    batcher = ClassBalancedBatcher(
        train_pool,
        BatchSpec(batch_size=cfg.batch_size, neg_fraction=cfg.neg_fraction, seed=cfg.seed),
    )
    if heldout_pool is not None and len(heldout_pool):
        if cfg.task in ("drlim", "tempcoh"):
            eval_fn = lambda: _contrastive_eval_loss(bundle, heldout_pool, cfg.margin)
            metric_name = "heldout_loss"
        else:
            eval_fn = lambda: eval_tuple_accuracy(bundle, heldout_pool)
            metric_name = "heldout_accuracy"
    else:
        eval_fn, metric_name = None, "heldout_metric"
    log = _train_loop(bundle, cfg, batcher.next_batch, eval_fn, metric_name)
    return bundle, log


def finetune(
    init_from: ModelBundle | None,
    task: str,
    cfg: TrainConfig,
    train_data: FramePool,
    eval_clips: list[VideoClip] | None = None,
    eval_data: FramePool | None = None,
    backbone_cfg: BackboneConfig | None = None,
) -> tuple[ModelBundle, MetricsLog]:
    """Supervised transfer with a fresh head; all layers train.

    ``init_from=None`` trains from random initialization. classify uses
    clip-level eval accuracy; pose uses mean PCK@0.2 on ``eval_data``.
    """
    cfg = replace(cfg, task=task)
    cfg.validate()
    if task not in ("classify", "pose"):
        raise ConfigError("task", f"finetune task must be classify or pose, got {task!r}")
    backbone_cfg = backbone_cfg or (init_from.backbone.cfg if init_from else None)
    if backbone_cfg is None:
        raise ConfigError("backbone_cfg", "needed when training from scratch")

    if task == "classify":
        names = train_data.class_names or []
        if len(set(train_data.labels.tolist())) < 2:
            warnings.warn("classify training pool has a single class; accuracy will be degenerate")
        out_dim = max(2, len(names))
        labels = train_data.labels.astype(np.int64)
    else:
        if train_data.keypoint_names is None:
            raise ConfigError("train_data", "pose training needs keypoint_names")
        out_dim = 2 * len(train_data.keypoint_names)
        if train_data.labels.shape[1] != out_dim:
            raise ValueError(
                f"pose targets have {train_data.labels.shape[1]} values, head expects {out_dim}"
            )
        labels = train_data.labels

    bundle = init_bundle(task, backbone_cfg, cfg.seed, out_classes=out_dim, init_from=init_from)
    if task == "pose":
        # regression head: start at the frame center instead of He-scale
        # outputs, which sit far outside the [0, 1] coordinate range
        bundle.head = LinearHead.zeros(backbone_cfg.embed_dim, out_dim)
        bundle.head.b.data = np.full(out_dim, 0.5)
    if init_from is None:
        bundle.backbone.input_mean = _input_mean(train_data.frames)
    bundle.meta = {
        "train": cfg.to_dict(),
        "config_hash": config_hash({"train": cfg.to_dict(), "backbone": backbone_cfg.to_dict()}),
        "optimizer": cfg.optimizer,
        "classes": train_data.class_names,
        "keypoint_names": train_data.keypoint_names,
        "pretrained": init_from is not None,
    }

    shuffler = ShuffledBatcher(len(train_data.frames), cfg.batch_size, cfg.seed)

    def next_batch():
        idx = shuffler.next_indices()
        return train_data.frames[idx], labels[idx]

    if task == "classify" and eval_clips:
        eval_fn = lambda: eval_classify(bundle, eval_clips)
        metric_name = "eval_accuracy"
    elif task == "pose" and eval_data is not None:
        eval_fn = lambda: eval_pose_pck(bundle, eval_data, alpha=0.2)
        metric_name = "eval_pck@0.2"
    else:
        eval_fn, metric_name = None, "eval_metric"
    log = _train_loop(bundle, cfg, next_batch, eval_fn, metric_name)
    return bundle, log


def predict_keypoint_sets(bundle: ModelBundle, pool: FramePool, batch: int = 256) -> tuple[list[KeypointSet], list[KeypointSet]]:
    """(predictions, ground truths) in pixel space for a pose FramePool."""
    names = pool.keypoint_names
    h, w = bundle.backbone.cfg.input_hw
    embeds = embed_frames(bundle.backbone, pool.frames, batch)
    coords = embeds @ bundle.head.w.data + bundle.head.b.data
    preds, gts = [], []
    scale = np.tile([w, h], len(names))
    for i in range(len(pool.frames)):
        p = coords[i] * scale
        g = pool.labels[i] * scale
        ref = float(pool.ref_lengths[i])
        preds.append(KeypointSet([(n, float(p[2 * j]), float(p[2 * j + 1])) for j, n in enumerate(names)], ref))
        gts.append(KeypointSet([(n, float(g[2 * j]), float(g[2 * j + 1])) for j, n in enumerate(names)], ref))
    return preds, gts


def eval_pose_pck(bundle: ModelBundle, pool: FramePool, alpha: float = 0.2) -> float:
    preds, gts = predict_keypoint_sets(bundle, pool)
    return pck(preds, gts, alpha)[1]


# ---------------------------------------------------------------------------
# Data assembly helpers (manifest -> pools / trials)
# ---------------------------------------------------------------------------


def classify_pool(clips: list[VideoClip], frames_per_clip: int, seed: int) -> FramePool:
    """Labeled single-frame pool: uniformly spaced frames from each clip."""
    names = sorted({c.label for c in clips if c.label is not None})
    index = {n: i for i, n in enumerate(names)}
    frames, labels = [], []
    for clip in clips:
        k = min(frames_per_clip, len(clip))
        picks = np.unique(np.linspace(0, len(clip) - 1, k).round().astype(int))
        for i in picks:
            frames.append(clip.frames[i].pixels.astype(np.float32))
            labels.append(index[clip.label])
    return FramePool(np.stack(frames), np.array(labels), class_names=names)


def pose_pool(clips: list[VideoClip], frames_per_clip: int, seed: int) -> FramePool:
    """Keypoint-regression pool with [0, 1]-normalized coordinate targets."""
    first = clips[0].keypoints[0]
    names = first.names()
    frames, targets, refs = [], [], []
    for clip in clips:
        if clip.keypoints is None:
            raise ValueError(f"pose_pool: clip {clip.id} has no keypoints")
        h, w = clip.frames[0].pixels.shape[:2]
        k = min(frames_per_clip, len(clip))
        picks = np.unique(np.linspace(0, len(clip) - 1, k).round().astype(int))
        for i in picks:
            kp = clip.keypoints[i]
            if kp.names() != names:
                raise ValueError(f"pose_pool: clip {clip.id} keypoint names {kp.names()} != {names}")
            frames.append(clip.frames[i].pixels.astype(np.float32))
            arr = kp.as_array() / np.array([w, h])
            targets.append(arr.reshape(-1))
            refs.append(kp.ref_length)
    return FramePool(
        np.stack(frames),
        np.stack(targets),
        keypoint_names=names,
        ref_lengths=np.array(refs),
    )


@dataclass
class FillTrial:
    clip_id: str
    f_start: np.ndarray
    f_end: np.ndarray
    candidates: np.ndarray
    truth: int


def build_fill_trials(
    clips: list[VideoClip],
    sampler_cfg: SamplerConfig,
    n_trials: int,
    n_candidates: int = 5,
    seed: int = 0,
    min_ssd_ratio: float = 0.5,
) -> list[FillTrial]:
    """Middle-frame selection trials from motion-biased draws.

    Each trial offers the true middle frame plus distractors drawn outside
    the (b, d) span at >= tau_min, shuffled; ``truth`` is the index of the
    true middle. Distractors that look nearly identical to the true middle
    (pixel SSD below ``min_ssd_ratio`` times ssd(f_b, f_d)) are rejected:
    cyclical clips revisit the same poses, and a visually equivalent frame
    from another sweep is not a meaningful wrong answer. Set the ratio to 0
    to disable the filter (static clips need that; their trials are the
    documented failure case).
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF111)))
    eligible = [c for c in clips if len(c) >= sampler_cfg.min_clip_len]
    if not eligible:
        raise ValueError("build_fill_trials: no clip long enough for the sampler config")
    profiles = {c.id: motion_profile(c) for c in eligible}
    trials: list[FillTrial] = []
    guard = 0
    while len(trials) < n_trials and guard < n_trials * 40:
        guard += 1
        clip = eligible[int(rng.integers(len(eligible)))]
        draw = draw_five(profiles[clip.id], sampler_cfg, rng, clip_id=clip.id)
        if draw is None:
            continue
        stack = clip.pixel_stack().astype(np.float32)
        threshold = min_ssd_ratio * frame_ssd(stack[draw.b], stack[draw.d])
        outside = [
            i
            for i in range(len(clip))
            if (i <= draw.b - sampler_cfg.tau_min or i >= draw.d + sampler_cfg.tau_min)
            and frame_ssd(stack[i], stack[draw.c]) >= threshold
        ]
        if len(outside) < n_candidates - 1:
            continue
        distractors = rng.choice(len(outside), size=n_candidates - 1, replace=False)
        cand_idx = [draw.c] + [outside[int(i)] for i in distractors]
        order = rng.permutation(n_candidates)
        cand_idx = [cand_idx[int(i)] for i in order]
        truth = int(np.flatnonzero(order == 0)[0])
        trials.append(
            FillTrial(
                clip_id=clip.id,
                f_start=stack[draw.b],
                f_end=stack[draw.d],
                candidates=stack[cand_idx],
                truth=truth,
            )
        )
    if len(trials) < n_trials:
        raise ValueError(f"build_fill_trials: produced {len(trials)}/{n_trials} trials")
    return trials


def fill_accuracy(bundle: ModelBundle, trials: list[FillTrial]) -> float:
    hits = sum(fill_blank(bundle, t.f_start, t.f_end, t.candidates) == t.truth for t in trials)
    return hits / len(trials)


# ---------------------------------------------------------------------------
# SVG line plots (self-contained; structural, diff-able)
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_plot_svg(
    series: dict[str, tuple[list[float], list[float]]],
    path: str | Path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> None:
    """Minimal SVG line plot: axes, ticks, one polyline per series, legend."""
    width, height, m = 640, 400, 56
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    if not xs_all:
        raise ValueError("line_plot_svg: no data")
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {height / 2:.0f})">{ylabel}</text>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{height - m + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>'
        )
        parts.append(
            f'<text x="{m - 6}" y="{sy(yv):.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>'
        )
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{width - m + 4}" y="{m + 14 * i + 10}" font-size="10" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
