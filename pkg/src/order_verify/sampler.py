"""Motion-biased five-frame draws, tuple/pair assembly, and training shards.

A draw picks a window of ``tau_max + 2*tau_min`` frames with probability
proportional to its mean motion weight (uniform fallback when the whole
profile is zero), then places ``a < b < c < d < e`` inside it with
``|b - d| <= tau_max`` and ``min(|a - b|, |d - e|) >= tau_min``.

From one draw the tuple task gets a positive ``(b, c, d)`` and negatives
``(b, a, d)`` / ``(b, e, d)`` sharing the endpoints, plus the index-reversed
copy of every instance with the same label. A negative is dropped when its
middle frame is visually near-identical to the positive middle frame:
``ssd(f_c, f_x) <= ssd_min * ssd(f_b, f_d)``.

Shards are flat binary files: magic "TUPL", version u16, frame shape
(u16 h, w, c), then records of 3 float32 frames + u8 label, little-endian.
Pair tasks reuse the same record layout with the third slot duplicating the
first frame; consumers read the first two.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .corpus import VideoClip, downsample, frame_ssd, load_clip
from .errors import ConfigError, FormatError
from .motion import MotionConfig, MotionProfile, motion_profile

PAIR_TASKS = ("two_close", "two_order")


@dataclass
class SamplerConfig:
    tau_max: int = 60
    tau_min: int = 15
    ssd_min: float = 0.2
    neg_fraction: float = 0.75
    seed: int = 0
    ssd_downsample: int = 1
    close_tau: int = 30

    def validate(self) -> None:
        if self.tau_max < 4:
            raise ConfigError("tau_max", "must be >= 4")
        if self.tau_min < 1:
            raise ConfigError("tau_min", "must be >= 1")
        if not 0.0 < self.neg_fraction < 1.0:
            raise ConfigError("neg_fraction", "must be in (0, 1)")
        if self.ssd_min < 0.0:
            raise ConfigError("ssd_min", "must be >= 0")
        if self.ssd_downsample < 1:
            raise ConfigError("ssd_downsample", "must be >= 1")
        if self.close_tau < 1:
            raise ConfigError("close_tau", "must be >= 1")

    @property
    def window_len(self) -> int:
        return self.tau_max + 2 * self.tau_min

    @property
    def min_clip_len(self) -> int:
        return 2 * self.tau_min + self.tau_max + 1


@dataclass
class FiveFrameDraw:
    """Source indices a < b < c < d < e plus the window start they came from."""

    clip_id: str
    a: int
    b: int
    c: int
    d: int
    e: int
    window_start: int = 0

    def indices(self) -> tuple[int, int, int, int, int]:
        return (self.a, self.b, self.c, self.d, self.e)


@dataclass
class TupleSample:
    clip_id: str
    indices: tuple[int, int, int]
    label: int
    source: FiveFrameDraw
    inverted: bool = False


@dataclass
class PairSample:
    clip_id: str
    indices: tuple[int, int]
    label: int
    source: FiveFrameDraw
    task: str = "two_close"


def temporal_order_label(i: int, j: int, k: int) -> int:
    """1 iff the presented triple's source indices run monotonically."""
    return 1 if (i < j < k) or (i > j > k) else 0


def window_probs(profile: MotionProfile, window_len: int, margin: int = 0) -> np.ndarray:
    """Window-start probabilities from mean motion weight per window.

    ``margin`` frames at each end of the window are excluded from the
    weight: those slots are reserved for the negatives' outer frames, so
    only the span eligible for the positive tuple drives the bias. This
    aligns windows so their centers sit on motion bursts.
    """
    w = np.asarray(profile.weights, dtype=np.float64)
    n = len(w)
    n_windows = n - window_len + 1
    if n_windows < 1:
        raise ValueError(f"profile of length {n} shorter than window {window_len}")
    span = window_len - 2 * margin
    if span < 1:
        raise ValueError(f"window margin {margin} leaves no central span in {window_len}")
    csum = np.concatenate([[0.0], np.cumsum(w)])
    sums = csum[margin + span : margin + span + n_windows] - csum[margin : margin + n_windows]
    total = sums.sum()
    if total <= 0.0:
        return np.full(n_windows, 1.0 / n_windows)
    return sums / total


def draw_five(
    profile: MotionProfile,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    clip_id: str = "",
) -> FiveFrameDraw | None:
    """One motion-biased five-frame draw, or None when the clip is too short."""
    n = len(profile)
    if n < cfg.min_clip_len:
        return None
    probs = window_probs(profile, cfg.window_len, margin=cfg.tau_min)
    s = int(rng.choice(len(probs), p=probs))
    return _place_in_window(s, cfg, rng, clip_id)


def _place_in_window(
    s: int, cfg: SamplerConfig, rng: np.random.Generator, clip_id: str
) -> FiveFrameDraw:
    L = cfg.window_len
    b = int(rng.integers(s + cfg.tau_min, s + L - cfg.tau_min - 2))
    d_hi = min(b + cfg.tau_max, s + L - 1 - cfg.tau_min)
    d = int(rng.integers(b + 2, d_hi + 1))
    c = int(rng.integers(b + 1, d))
    a = int(rng.integers(s, b - cfg.tau_min + 1))
    e = int(rng.integers(d + cfg.tau_min, s + L))
    return FiveFrameDraw(clip_id=clip_id, a=a, b=b, c=c, d=d, e=e, window_start=s)


def assemble_tuples(clip: VideoClip, draw: FiveFrameDraw, cfg: SamplerConfig) -> list[TupleSample]:
    """Positive, surviving negatives, and the inversion of each, from one draw."""
    fa, fb, fc, fd, fe = (clip.frames[i].pixels for i in draw.indices())
    if cfg.ssd_downsample > 1:
        fa, fb, fc, fd, fe = (downsample(f, cfg.ssd_downsample) for f in (fa, fb, fc, fd, fe))
    threshold = cfg.ssd_min * frame_ssd(fb, fd)

    triples: list[tuple[tuple[int, int, int], int]] = [((draw.b, draw.c, draw.d), 1)]
    for outside, f_out in ((draw.a, fa), (draw.e, fe)):
        # Ambiguity filter: drop negatives whose middle frame is nearly
        # identical to the positive middle frame.
        if frame_ssd(fc, f_out) <= threshold:
            continue
        triples.append(((draw.b, outside, draw.d), 0))

    samples: list[TupleSample] = []
    for (i, j, k), label in triples:
        samples.append(TupleSample(clip.id, (i, j, k), label, draw, inverted=False))
        samples.append(TupleSample(clip.id, (k, j, i), label, draw, inverted=True))
    return samples


def assemble_pairs(draw: FiveFrameDraw, task: str, cfg: SamplerConfig) -> list[PairSample]:
    """Pair instances reusing the five-frame draw's indices.

    two_close: (b, d) and (a, e), labeled 1 iff |i - j| < close_tau.
    two_order: (b, d) labeled 1 and its swap (d, b) labeled 0.
    """
    if task == "two_close":
        pairs = [(draw.b, draw.d), (draw.a, draw.e)]
        return [
            PairSample(draw.clip_id, (i, j), int(abs(i - j) < cfg.close_tau), draw, task)
            for i, j in pairs
        ]
    if task == "two_order":
        return [
            PairSample(draw.clip_id, (draw.b, draw.d), 1, draw, task),
            PairSample(draw.clip_id, (draw.d, draw.b), 0, draw, task),
        ]
    raise ConfigError("task", f"unknown pair task {task!r}")


# ---------------------------------------------------------------------------
# Shard format
# ---------------------------------------------------------------------------

_SHARD_MAGIC = b"TUPL"
_SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHHHH")


def _record_size(h: int, w: int, c: int) -> int:
    return 3 * h * w * c * 4 + 1


def write_shard(
    samples: list[TupleSample] | list[PairSample],
    frames: dict[str, np.ndarray],
    path: str | Path,
) -> None:
    """Serialize samples to a shard; ``frames`` maps clip_id -> (n, h, w, c) pixels.

    Pair samples (2 indices) store the first frame twice to fill the 3-frame
    record.
    """
    path = Path(path)
    if samples:
        h, w, c = frames[samples[0].clip_id].shape[1:]
    else:
        h = w = c = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_SHARD_MAGIC, _SHARD_VERSION, h, w, c))
        for s in samples:
            stack = frames[s.clip_id]
            idx = list(s.indices)
            if len(idx) == 2:
                idx = [idx[0], idx[1], idx[0]]
            rec = np.stack([stack[i] for i in idx]).astype("<f4")
            if rec.shape[1:] != (h, w, c):
                raise ValueError(f"sample frame shape {rec.shape[1:]} != shard shape {(h, w, c)}")
            fh.write(rec.tobytes())
            fh.write(struct.pack("<B", s.label))


def read_shard(path: str | Path) -> Iterator[tuple[tuple[np.ndarray, np.ndarray, np.ndarray], int]]:
    """Iterate (3 frames, label) records; validates header and truncation first."""
    frames, labels = read_shard_arrays(path)
    return ((tuple(frames[i]), int(labels[i])) for i in range(len(labels)))


def read_shard_arrays(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Whole shard as (n, 3, h, w, c) float32 frames and (n,) uint8 labels."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: shard shorter than header")
    magic, version, h, w, c = _HEADER.unpack_from(data)
    if magic != _SHARD_MAGIC:
        raise FormatError(f"{path}: bad shard magic {magic!r}")
    if version != _SHARD_VERSION:
        raise FormatError(f"{path}: unsupported shard version {version}")
    payload = data[_HEADER.size :]
    if h == 0 and w == 0 and c == 0 and not payload:
        return np.zeros((0, 3, 0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.uint8)
    rec = _record_size(h, w, c)
    n, leftover = divmod(len(payload), rec)
    if leftover:
        raise FormatError(
            f"{path}: truncated mid-record after record {n - 1} ({n} whole record(s) of {rec} bytes)"
        )
    frames = np.empty((n, 3, h, w, c), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    frame_bytes = rec - 1
    for i in range(n):
        off = i * rec
        frames[i] = np.frombuffer(payload, dtype="<f4", count=3 * h * w * c, offset=off).reshape(3, h, w, c)
        labels[i] = payload[off + frame_bytes]
    return frames, labels


# ---------------------------------------------------------------------------
# Corpus-level shard building
# ---------------------------------------------------------------------------


def clip_rng(seed: int, clip_id: str) -> np.random.Generator:
    """Per-clip stream derived from (seed, clip_id): scheduling-independent."""
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(clip_id.encode()))))


def _thread_count() -> int:
    env = os.environ.get("ORDER_VERIFY_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _sample_clip(
    clip: VideoClip,
    cfg: SamplerConfig,
    motion_cfg: MotionConfig,
    draws_per_clip: int,
    task: str,
) -> tuple[list, dict]:
    rng = clip_rng(cfg.seed, clip.id)
    stats = {"draws": 0, "skipped": 0, "positives": 0, "negatives": 0, "rejected": 0}
    samples: list = []
    if len(clip) < cfg.min_clip_len or len(clip) < 2:
        stats["skipped"] = draws_per_clip
        return samples, stats
    profile = motion_profile(clip, motion_cfg)
    for _ in range(draws_per_clip):
        draw = draw_five(profile, cfg, rng, clip_id=clip.id)
        if draw is None:
            stats["skipped"] += 1
            continue
        stats["draws"] += 1
        if task == "three_order":
            new = assemble_tuples(clip, draw, cfg)
            stats["rejected"] += 6 - len(new)
        else:
            new = assemble_pairs(draw, task, cfg)
        for s in new:
            stats["positives" if s.label == 1 else "negatives"] += 1
        samples.extend(new)
    return samples, stats


def balanced_subset(samples: list, rng: np.random.Generator) -> list:
    """Equal positive/negative counts (for evaluation pools), seeded subsample."""
    pos = [s for s in samples if s.label == 1]
    neg = [s for s in samples if s.label == 0]
    k = min(len(pos), len(neg))
    pos_idx = rng.choice(len(pos), size=k, replace=False) if len(pos) > k else np.arange(k)
    neg_idx = rng.choice(len(neg), size=k, replace=False) if len(neg) > k else np.arange(k)
    out = [pos[int(i)] for i in pos_idx] + [neg[int(i)] for i in neg_idx]
    order = rng.permutation(len(out))
    return [out[int(i)] for i in order]


def build_shards(
    manifest_root: str | Path,
    entries: list[dict],
    cfg: SamplerConfig,
    out_dir: str | Path,
    draws_per_clip: int = 12,
    task: str = "three_order",
    motion_cfg: MotionConfig | None = None,
    splits: tuple[str, ...] = ("train", "heldout", "test"),
    balance_eval: bool = True,
) -> dict:
    """Sample every clip of each split into <out_dir>/<split>.tupl plus stats.

    Clips are processed in parallel (capped by ORDER_VERIFY_THREADS) with
    per-clip rng streams, so output does not depend on scheduling. Eval
    splits (heldout/test) are balanced to a 50/50 class mix when
    ``balance_eval`` is set.
    """
    cfg.validate()
    motion_cfg = motion_cfg or MotionConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats: dict = {
        "task": task,
        "config": {
            "tau_max": cfg.tau_max,
            "tau_min": cfg.tau_min,
            "ssd_min": cfg.ssd_min,
            "close_tau": cfg.close_tau,
            "draws_per_clip": draws_per_clip,
            "seed": cfg.seed,
        },
        "splits": {},
        "per_kind": {},
    }
    for split in splits:
        split_entries = [e for e in entries if e["split"] == split]
        samples: list = []
        frames: dict[str, np.ndarray] = {}
        agg = {"draws": 0, "skipped": 0, "positives": 0, "negatives": 0, "rejected": 0}
        with concurrent.futures.ThreadPoolExecutor(max_workers=_thread_count()) as pool:
            clips = list(pool.map(lambda e: load_clip(manifest_root, e), split_entries))
            results = list(
                pool.map(
                    lambda clip: _sample_clip(clip, cfg, motion_cfg, draws_per_clip, task),
                    clips,
                )
            )
        for entry, clip, (clip_samples, clip_stats) in zip(split_entries, clips, results):
            frames[clip.id] = clip.pixel_stack()
            samples.extend(clip_samples)
            for k in agg:
                agg[k] += clip_stats[k]
            kind = entry.get("label") or "unknown"
            kind_stats = stats["per_kind"].setdefault(
                kind, {"draws": 0, "positives": 0, "negatives": 0}
            )
            kind_stats["draws"] += clip_stats["draws"]
            kind_stats["positives"] += clip_stats["positives"]
            kind_stats["negatives"] += clip_stats["negatives"]
        if balance_eval and split in ("heldout", "test"):
            samples = balanced_subset(samples, clip_rng(cfg.seed, f"balance:{split}"))
        write_shard(samples, frames, out / f"{split}.tupl")
        candidates = agg["positives"] + agg["negatives"] + agg["rejected"]
        agg["filter_rejection_rate"] = agg["rejected"] / candidates if candidates else 0.0
        agg["samples_written"] = len(samples)
        stats["splits"][split] = agg
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return stats
