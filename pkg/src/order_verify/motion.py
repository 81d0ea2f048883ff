"""Coarse block-matching optical flow and per-frame motion weights.

Flow is exhaustive integer block matching: for each block of the earlier
frame, the displacement in [-r, r]^2 minimizing the block SSD against the
later frame (sampled with edge clamping, so every candidate scores a full
block). Ties break to the smallest |dx|+|dy|, then lexicographic (dx, dy),
which pins flat regions to zero. Crude, but monotone in true motion
magnitude, which is all the tuple sampler consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Frame, VideoClip
from .errors import ConfigError, FormatError

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class FlowField:
    """Per-block integer displacements at ceil(frame/block) resolution."""

    dx: np.ndarray
    dy: np.ndarray
    block_size: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx.astype(np.float64), self.dy.astype(np.float64))


@dataclass
class MotionProfile:
    """Per-frame motion weights; the last frame repeats the previous weight."""

    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class MotionConfig:
    block_size: int = 8
    search_radius: int = 4

    def validate(self) -> None:
        if self.block_size < 4:
            raise ConfigError("block_size", "must be >= 4")
        if self.search_radius < 1:
            raise ConfigError("search_radius", "must be >= 1")


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """(h, w, c) -> (h, w) luma; grayscale passes through."""
    if pixels.shape[2] == 1:
        return pixels[:, :, 0]
    return pixels @ _LUMA


def _pixels_of(frame: Frame | np.ndarray) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame)


def estimate_flow(
    f_t: Frame | np.ndarray,
    f_next: Frame | np.ndarray,
    block_size: int = 8,
    search_radius: int = 4,
) -> FlowField:
    """Block-matching flow from f_t to f_next over integer shifts in [-r, r]^2."""
    MotionConfig(block_size, search_radius).validate()
    a = to_gray(_pixels_of(f_t).astype(np.float64))
    b = to_gray(_pixels_of(f_next).astype(np.float64))
    if a.shape != b.shape:
        raise ValueError(f"estimate_flow: shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape
    if h < block_size or w < block_size:
        raise ValueError(f"estimate_flow: frame {h}x{w} smaller than one {block_size}px block")

    r = search_radius
    bp = np.pad(b, r, mode="edge")
    row_idx = np.arange(0, h, block_size)
    col_idx = np.arange(0, w, block_size)

    # Candidate shifts in tie-break order: |dx|+|dy| ascending, then (dx, dy).
    shifts = sorted(
        ((dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)),
        key=lambda s: (abs(s[0]) + abs(s[1]), s[0], s[1]),
    )
    costs = np.empty((len(shifts), len(row_idx), len(col_idx)))
    for k, (dx, dy) in enumerate(shifts):
        shifted = bp[r + dy : r + dy + h, r + dx : r + dx + w]
        diff2 = (a - shifted) ** 2
        costs[k] = np.add.reduceat(np.add.reduceat(diff2, row_idx, axis=0), col_idx, axis=1)
    best = np.argmin(costs, axis=0)  # first minimum == tie-break order
    shift_arr = np.array(shifts)
    return FlowField(dx=shift_arr[best, 0], dy=shift_arr[best, 1], block_size=block_size)


def frame_motion_weight(flow: FlowField) -> float:
    """Mean flow magnitude over blocks."""
    return float(flow.magnitude.mean())


def motion_profile(clip: VideoClip, cfg: MotionConfig | None = None) -> MotionProfile:
    """Per-frame weights from consecutive-frame flow; weight[n-1] = weight[n-2]."""
    cfg = cfg or MotionConfig()
    cfg.validate()
    n = len(clip)
    if n < 2:
        raise ValueError(f"motion_profile: clip {clip.id} has {n} frame(s), need >= 2")
    weights = np.empty(n, dtype=np.float64)
    for t in range(n - 1):
        flow = estimate_flow(clip.frames[t], clip.frames[t + 1], cfg.block_size, cfg.search_radius)
        weights[t] = frame_motion_weight(flow)
    weights[n - 1] = weights[n - 2]
    return MotionProfile(weights=weights)


# ---------------------------------------------------------------------------
# Profile cache: magic "MOTP", u32 length, f32 weights, little-endian
# ---------------------------------------------------------------------------

_MOTP_MAGIC = b"MOTP"


def save_profile(path: str | Path, profile: MotionProfile) -> None:
    weights = np.asarray(profile.weights, dtype="<f4")
    Path(path).write_bytes(_MOTP_MAGIC + struct.pack("<I", len(weights)) + weights.tobytes())


def load_profile(path: str | Path) -> MotionProfile:
    data = Path(path).read_bytes()
    if data[:4] != _MOTP_MAGIC:
        raise FormatError(f"bad profile magic {data[:4]!r}")
    (n,) = struct.unpack("<I", data[4:8])
    payload = data[8:]
    if len(payload) != 4 * n:
        raise FormatError(f"profile payload has {len(payload)} bytes, expected {4 * n}")
    return MotionProfile(weights=np.frombuffer(payload, dtype="<f4").astype(np.float64))
