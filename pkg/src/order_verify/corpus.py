"""Synthetic video corpus: PNM frame I/O, clip generation, manifests.

Clips are directories of binary portable graymap/pixmap frames
(``frame_%06d.pgm`` / ``.ppm``, maxval 255) plus an optional per-frame
keypoint file. A corpus is described by a JSON-lines manifest with one
object per clip: ``{id, path, n_frames, fps, split, label?, keypoints_path?}``.

The generator produces four motion kinds on a seeded textured background:

Moving kinds cycle through stroke-and-dwell motion, like a reach-pause-
return action: a fast eased stroke, a near-still dwell, a stroke back.

* ``linear``   -- the whole scene pans back and forth horizontally; each
  stroke holds a constant plateau speed (px/frame = amplitude) with a brief
  ease at both ends, then dwells. The object is a bright square riding the
  texture, so block-matching flow recovers the plateau speed.
* ``pendulum`` -- a disc bob on a rod to a fixed pivot; the center follows
  x(t) = A*sin(phase(t)) where the phase advances quickly mid-stroke and
  creeps during dwells. Any two frames stay direction-ambiguous (the same
  pose pair occurs on both sweeps) while the frame map is injective over a
  half-period.
* ``bounce``   -- a disc doing the same warped oscillation vertically.
* ``static``   -- a ring that never moves; all frames are bit-identical.

Dwells carry (near-)zero motion weight, so motion-biased sampling anchors
tuple windows onto strokes. Frames are rendered with a short exposure
(average of sub-frame scene states): speed shows up as single-frame motion
blur, the same per-frame cue real video carries.

A clip is a pure function of its SynthConfig: all per-clip variation
(amplitude/period/phase jitter, object intensity and size, positions) is
derived from ``seed`` alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GapError

KINDS = ("linear", "pendulum", "bounce", "static")

_DEFAULT_AMPLITUDE = {"linear": 2.0, "pendulum": 10.0, "bounce": 10.0, "static": 0.0}
_DISTRACTORS = (1, 2)  # static clutter objects per clip (min, max)
_DISTRACTOR_SIZE = 4
_PENDULUM_STROKE, _PENDULUM_DWELL = 10, 16
_BOUNCE_STROKE, _BOUNCE_DWELL = 10, 18
_PAN_EASE = 0.25  # fraction of each pan stroke spent accelerating/decelerating
_PAN_DWELL = 16
_DWELL_CREEP = 0.02  # residual phase rate while dwelling (keeps frames distinct)
_EXPOSURE = 2.0  # shutter time in frames; fast motion smears, like real video
_EXPOSURE_TAPS = 7


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    """One decoded frame: ``pixels`` is (height, width, channels) float64 in [0, 1]."""

    pixels: np.ndarray
    index: int = 0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.channels not in (1, 3):
            raise FormatError(f"frame {self.index}: expected (h, w, 1|3) pixels, got {self.pixels.shape}")
        if self.height < 8 or self.width < 8:
            raise FormatError(f"frame {self.index}: frames must be at least 8x8, got {self.height}x{self.width}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise FormatError(f"frame {self.index}: pixel range [{lo}, {hi}] outside [0, 1]")


@dataclass
class KeypointSet:
    """Named 2-D keypoints in pixel coordinates plus a normalization scale."""

    points: list[tuple[str, float, float]]
    ref_length: float

    def validate(self) -> None:
        if self.ref_length <= 0:
            raise ConfigError("ref_length", "must be > 0")

    def names(self) -> list[str]:
        return [name for name, _, _ in self.points]

    def as_array(self) -> np.ndarray:
        """(K, 2) array of (x, y) coordinates in point order."""
        return np.array([[x, y] for _, x, y in self.points], dtype=np.float64)


@dataclass
class VideoClip:
    """An ordered frame sequence with optional class label and keypoints."""

    id: str
    frames: list[Frame]
    fps: float = 10.0
    label: str | None = None
    keypoints: list[KeypointSet] | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def pixel_stack(self) -> np.ndarray:
        """(n, h, w, c) float64 view of all frames."""
        return np.stack([f.pixels for f in self.frames])

    def validate(self) -> None:
        shape = self.frames[0].pixels.shape
        for i, f in enumerate(self.frames):
            if f.index != i:
                raise GapError(f"clip {self.id}: frame at position {i} has index {f.index}")
            if f.pixels.shape != shape:
                raise FormatError(f"clip {self.id}: frame {i} shape {f.pixels.shape} != {shape}")
        if self.keypoints is not None and len(self.keypoints) != len(self.frames):
            raise FormatError(f"clip {self.id}: {len(self.keypoints)} keypoint sets for {len(self.frames)} frames")


@dataclass
class SynthConfig:
    """Deterministic recipe for one synthetic clip.

    ``amplitude`` is px/frame for ``linear`` and peak displacement in px for
    the oscillating kinds; None picks a per-kind default. ``noise_std`` is
    the contrast of the fixed background texture (baked into the scene, not
    per-frame sensor noise, so static clips stay bit-identical).
    """

    kind: str
    n_frames: int = 60
    size: int = 32
    object_size: int = 7
    amplitude: float | None = None
    noise_std: float = 0.08
    seed: int = 0
    fps: float = 10.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.size < 8:
            raise ConfigError("size", "image size must be >= 8")
        if self.n_frames < 1:
            raise ConfigError("n_frames", "must be >= 1")
        if self.object_size < 1:
            raise ConfigError("object_size", "must be >= 1")
        if self.object_size >= self.size:
            raise ConfigError("object_size", f"object size {self.object_size} must be smaller than image size {self.size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")
        if self.amplitude is not None and self.amplitude < 0:
            raise ConfigError("amplitude", "must be >= 0")


# ---------------------------------------------------------------------------
# PNM (P5 graymap / P6 pixmap) codec, maxval 255, binary
# ---------------------------------------------------------------------------


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Encode (h, w, 1|3) float pixels in [0, 1] as a binary P5/P6 file."""
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
        raise FormatError(f"cannot encode pixels of shape {pixels.shape}")
    h, w, c = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    data = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode a binary P5/P6 file to (h, w, c) float64 pixels in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad PNM magic {magic!r}")
    channels = 1 if magic == b"P5" else 3

    # Header tokens (width, height, maxval) separated by whitespace; '#'
    # starts a comment running to end of line.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError("truncated PNM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            try:
                tokens.append(int(data[pos:end]))
            except ValueError as exc:
                raise FormatError(f"bad PNM header token {data[pos:end]!r}") from exc
            pos = end
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"unsupported PNM maxval {maxval}")
    expected = w * h * channels
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(f"PNM payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w, channels)


def frame_filename(index: int, channels: int = 1) -> str:
    ext = "pgm" if channels == 1 else "ppm"
    return f"frame_{index:06d}.{ext}"


# ---------------------------------------------------------------------------
# Clip loading
# ---------------------------------------------------------------------------


def load_keypoints(path: Path) -> list[KeypointSet]:
    raw = json.loads(Path(path).read_text())
    sets = []
    for entry in raw:
        kp = KeypointSet(
            points=[(str(n), float(x), float(y)) for n, x, y in entry["points"]],
            ref_length=float(entry["ref_length"]),
        )
        kp.validate()
        sets.append(kp)
    return sets


def load_clip(root_dir: str | Path, entry: dict) -> VideoClip:
    """Load one manifest entry's clip from disk.

    Frames must exist for every index 0..n_frames-1 (a missing index is a
    GapError); all frames must share dimensions and channel count.
    """
    root = Path(root_dir)
    clip_dir = root / entry["path"]
    n = int(entry["n_frames"])
    frames: list[Frame] = []
    for i in range(n):
        path = clip_dir / frame_filename(i, 1)
        if not path.exists():
            path = clip_dir / frame_filename(i, 3)
        if not path.exists():
            raise GapError(f"clip {entry['id']}: missing frame index {i} in {clip_dir}")
        pixels = decode_pnm(path.read_bytes())
        frame = Frame(pixels=pixels, index=i)
        frame.validate()
        frames.append(frame)
    for f in frames[1:]:
        if f.pixels.shape != frames[0].pixels.shape:
            raise FormatError(
                f"clip {entry['id']}: frame {f.index} shape {f.pixels.shape} != {frames[0].pixels.shape}"
            )
    keypoints = None
    if entry.get("keypoints_path"):
        keypoints = load_keypoints(root / entry["keypoints_path"])
    clip = VideoClip(
        id=entry["id"],
        frames=frames,
        fps=float(entry.get("fps", 10.0)),
        label=entry.get("label"),
        keypoints=keypoints,
    )
    clip.validate()
    return clip


def load_manifest(path: str | Path) -> list[dict]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            entries.append(json.loads(line))
    return entries


# ---------------------------------------------------------------------------
# Frame distance utilities
# ---------------------------------------------------------------------------


def _pixels_of(frame: Frame | np.ndarray) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame)


def frame_ssd(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    """Sum of squared pixel differences between two same-shape frames."""
    pa, pb = _pixels_of(a), _pixels_of(b)
    if pa.shape != pb.shape:
        raise ValueError(f"frame_ssd: shape mismatch {pa.shape} vs {pb.shape}")
    diff = pa.astype(np.float64) - pb.astype(np.float64)
    return float(np.sum(diff * diff))


def downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of (h, w, c) pixels; partial edge blocks are averaged."""
    if factor <= 1:
        return pixels
    h, w, _ = pixels.shape
    rows = np.arange(0, h, factor)
    cols = np.arange(0, w, factor)
    summed = np.add.reduceat(np.add.reduceat(pixels, rows, axis=0), cols, axis=1)
    r_counts = np.minimum(rows + factor, h) - rows
    c_counts = np.minimum(cols + factor, w) - cols
    counts = r_counts[:, None] * c_counts[None, :]
    return summed / counts[:, :, None]


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, size: int, std: float) -> np.ndarray:
    """Seeded periodic texture: mean 0.5, stddev ~std, smooth at ~3 px scale."""
    tex = rng.standard_normal((size, size))
    for axis in (0, 1):
        for _ in range(2):
            acc = np.zeros_like(tex)
            for off in (-2, -1, 0, 1, 2):
                acc += np.roll(tex, off, axis=axis)
            tex = acc / 5.0
    s = tex.std()
    if std == 0.0 or s == 0.0:
        return np.full((size, size), 0.5)
    return 0.5 + (tex - tex.mean()) / s * std


def _pan_cycle(size: int, half: float, speed: float, dwell: int) -> np.ndarray:
    """One dwell-stroke-dwell-stroke pan cycle of per-frame offsets.

    Strokes hold a constant ``speed`` px/frame plateau with linear ease at
    both ends; dwells sit still. The pan distance keeps the object inside
    the frame.
    """
    distance = max(4.0, size - 2.0 * half - 5.0)
    stroke_len = max(6, int(round(distance / (speed * (1.0 - _PAN_EASE)))))
    u = (np.arange(stroke_len) + 0.5) / stroke_len
    vel = np.minimum(1.0, np.minimum(u, 1.0 - u) / _PAN_EASE)
    stroke = np.concatenate([[0.0], np.cumsum(vel)])
    stroke *= distance / stroke[-1]
    hold0 = np.zeros(dwell)
    hold1 = np.full(dwell, distance)
    return np.concatenate([hold0, stroke[:-1], hold1, stroke[::-1][:-1]])


def _phase_cycle(stroke: int, dwell: int) -> np.ndarray:
    """Per-frame oscillation phases: eased 0->pi stroke, creeping dwell, back.

    Extremes (the dwells) creep at a tiny rate so consecutive frames stay
    distinct; mid-stroke the phase rate peaks, which is where motion (and
    blur) concentrates.
    """
    u = (np.arange(stroke) + 0.5) / stroke
    stroke_rate = u * (1.0 - u)  # smooth bump, near-zero at the ends
    dwell_rate = np.full(dwell, _DWELL_CREEP * stroke_rate.max())
    rates = np.concatenate([dwell_rate, stroke_rate, dwell_rate, stroke_rate])
    phases = np.concatenate([[0.0], np.cumsum(rates)])[:-1]
    return phases * (2.0 * math.pi / (phases[-1] + rates[-1]))


def _cycle_at(cycle: np.ndarray, t: float, wrap: float = 0.0) -> float:
    """Piecewise-linear evaluation of a periodic sample sequence at float t.

    ``wrap`` is the value gained across the seam (2*pi for phase cycles).
    """
    period = len(cycle)
    pos = t % period
    i0 = int(math.floor(pos))
    frac = pos - i0
    nxt = cycle[0] + wrap if i0 + 1 == period else cycle[i0 + 1]
    return float(cycle[i0] * (1.0 - frac) + nxt * frac)


def _torus_shift_x(base: np.ndarray, offset: float) -> np.ndarray:
    """Sample base at columns (c + offset) mod W with bilinear interpolation."""
    i0 = int(math.floor(offset))
    frac = offset - i0
    a = np.roll(base, -i0, axis=1)
    if frac == 0.0:
        return a.copy()
    b = np.roll(base, -(i0 + 1), axis=1)
    return (1.0 - frac) * a + frac * b


def _coverage_disc(xx, yy, cx, cy, radius):
    dist = np.hypot(xx - cx, yy - cy)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _coverage_ring(xx, yy, cx, cy, radius, thickness):
    dist = np.hypot(xx - cx, yy - cy)
    return np.clip(thickness / 2.0 + 0.5 - np.abs(dist - radius), 0.0, 1.0)


def _coverage_square(xx, yy, cx, cy, half, wrap_w: int | None = None):
    dx = xx - cx
    if wrap_w is not None:
        dx = (dx + wrap_w / 2.0) % wrap_w - wrap_w / 2.0
    covx = np.clip(half + 0.5 - np.abs(dx), 0.0, 1.0)
    covy = np.clip(half + 0.5 - np.abs(yy - cy), 0.0, 1.0)
    return covx * covy


def _coverage_segment(xx, yy, x0, y0, x1, y1, thickness):
    vx, vy = x1 - x0, y1 - y0
    L2 = vx * vx + vy * vy
    if L2 == 0.0:
        return _coverage_disc(xx, yy, x0, y0, thickness / 2.0)
    t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / L2, 0.0, 1.0)
    dist = np.hypot(xx - (x0 + t * vx), yy - (y0 + t * vy))
    return np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)


def _stamp(canvas: np.ndarray, coverage: np.ndarray, intensity: float) -> np.ndarray:
    return canvas * (1.0 - coverage) + intensity * coverage


def gen_clip(cfg: SynthConfig) -> VideoClip:
    """Generate one synthetic clip. Pure function of cfg (seed included)."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((0x0C11, cfg.seed)))

    # Per-clip jitters, drawn in a fixed order so layouts stay reproducible.
    amp_scale = rng.uniform(0.9, 1.1)
    period_scale = rng.uniform(0.9, 1.1)
    intensity = rng.uniform(0.8, 1.0)
    size_delta = int(rng.integers(-1, 2))
    direction = 1 if rng.random() < 0.5 else -1

    size = cfg.size
    obj = max(3, cfg.object_size + size_delta)
    half = obj / 2.0
    amplitude = (_DEFAULT_AMPLITUDE[cfg.kind] if cfg.amplitude is None else cfg.amplitude) * amp_scale
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tex = _smooth_noise(rng, size, cfg.noise_std)

    frames: list[Frame] = []
    keypoints: list[KeypointSet] = []
    ref_length = obj * math.sqrt(2.0)

    def _emit_exposed(scene, points, i: int) -> None:
        # Short-exposure render: average sub-frame scene states so speed
        # shows up as single-frame motion blur.
        taps = np.linspace(-0.5, 0.5, _EXPOSURE_TAPS) * _EXPOSURE
        canvas = np.mean([scene(i + dt) for dt in taps], axis=0)
        pix = np.clip(canvas, 0.0, 1.0)[:, :, None]
        frames.append(Frame(pixels=pix, index=i))
        keypoints.append(KeypointSet(points=points(float(i)), ref_length=ref_length))

    def _uniform_in(lo, hi, fallback):
        return float(rng.uniform(lo, hi)) if hi > lo else float(fallback)

    def _stamp_distractors(canvas, ok_center, wrap=False):
        # Static clutter: the classifier has to find the mover, not just any
        # shape. Placement avoids the mover's travel zone; unplaceable
        # distractors are skipped.
        count = int(rng.integers(_DISTRACTORS[0], _DISTRACTORS[1] + 1))
        for _ in range(count):
            d_half = (_DISTRACTOR_SIZE + int(rng.integers(0, 2))) / 2.0
            shape = "square" if rng.random() < 0.5 else "disc"
            d_int = float(rng.uniform(0.75, 1.0))
            for _attempt in range(20):
                dx_ = float(rng.uniform(d_half + 1.0, size - d_half - 1.0))
                dy_ = float(rng.uniform(d_half + 1.0, size - d_half - 1.0))
                if not ok_center(dx_, dy_, d_half):
                    continue
                if shape == "square":
                    cov = _coverage_square(xx, yy, dx_, dy_, d_half, wrap_w=size if wrap else None)
                else:
                    cov = _coverage_disc(xx, yy, dx_, dy_, d_half)
                canvas = _stamp(canvas, cov, d_int)
                break
        return canvas

    if cfg.kind == "linear":
        cy = _uniform_in(half + 2.0, size - half - 3.0, size / 2.0)
        cycle = _pan_cycle(size, half, max(amplitude, 0.25), _PAN_DWELL)
        pan_phase = float(rng.uniform(0, len(cycle)))
        cx0 = size - half - 2.0
        # the mover sweeps every column; clutter keeps clear of its row band
        tex = _stamp_distractors(
            tex, lambda dx_, dy_, dh: abs(dy_ - cy) > half + dh + 1.5, wrap=True
        )
        base = _stamp(tex, _coverage_square(xx, yy, cx0, cy, half, wrap_w=size), intensity)
        distance = cycle.max()

        def offset_at(t):
            off = _cycle_at(cycle, pan_phase + t)
            return distance - off if direction < 0 else off

        def scene(t):
            return _torus_shift_x(base, offset_at(t))

        def points(t):
            return [("center", cx0 - offset_at(t), cy)]

        for i in range(cfg.n_frames):
            _emit_exposed(scene, points, i)

    elif cfg.kind == "pendulum":
        stroke = max(4, int(round(_PENDULUM_STROKE * period_scale)))
        cycle = _phase_cycle(stroke, _PENDULUM_DWELL)
        margin = half + 1.5
        amp = min(amplitude, size / 2.0 - margin)
        cx = size / 2.0 + float(rng.uniform(-1.5, 1.5))
        cy = size * 0.62 + float(rng.uniform(-1.5, 1.5))
        pivot = (cx, size * 0.12)
        phase0 = float(rng.uniform(0, len(cycle)))
        # clear of the swing fan: below the bob row or outside the swing columns
        tex = _stamp_distractors(
            tex,
            lambda dx_, dy_, dh: dy_ > cy + half + dh + 1.5
            or abs(dx_ - cx) > amp + half + dh + 1.5,
        )

        def bob_x(t):
            # dwells in the phase cycle sit at 0 and pi, i.e. the extremes
            return cx + amp * math.cos(_cycle_at(cycle, phase0 + t, wrap=2.0 * math.pi))

        def scene(t):
            bx = bob_x(t)
            canvas = _stamp(tex, _coverage_segment(xx, yy, pivot[0], pivot[1], bx, cy, 1.6), intensity * 0.85)
            return _stamp(canvas, _coverage_disc(xx, yy, bx, cy, half), intensity)

        def points(t):
            bx = bob_x(t)
            return [("center", bx, cy), ("limb", (bx + pivot[0]) / 2.0, (cy + pivot[1]) / 2.0)]

        for i in range(cfg.n_frames):
            _emit_exposed(scene, points, i)

    elif cfg.kind == "bounce":
        stroke = max(4, int(round(_BOUNCE_STROKE * period_scale)))
        cycle = _phase_cycle(stroke, _BOUNCE_DWELL)
        margin = half + 1.5
        amp = min(amplitude, size / 2.0 - margin)
        cx = size / 2.0 + float(rng.uniform(-6.0, 6.0))
        cy = size / 2.0
        phase0 = float(rng.uniform(0, len(cycle)))
        tex = _stamp_distractors(
            tex, lambda dx_, dy_, dh: abs(dx_ - cx) > half + dh + 1.5
        )

        def ball_y(t):
            return cy + amp * math.cos(_cycle_at(cycle, phase0 + t, wrap=2.0 * math.pi))

        def scene(t):
            return _stamp(tex, _coverage_disc(xx, yy, cx, ball_y(t), half), intensity)

        def points(t):
            return [("center", cx, ball_y(t))]

        for i in range(cfg.n_frames):
            _emit_exposed(scene, points, i)

    else:  # static
        cx = size / 2.0 + float(rng.uniform(-4.0, 4.0))
        cy = size / 2.0 + float(rng.uniform(-4.0, 4.0))
        tex = _stamp_distractors(
            tex, lambda dx_, dy_, dh: math.hypot(dx_ - cx, dy_ - cy) > half + dh + 2.0
        )
        canvas = _stamp(tex, _coverage_ring(xx, yy, cx, cy, half, 2.0), intensity)
        pix = np.clip(canvas, 0.0, 1.0)[:, :, None]
        for i in range(cfg.n_frames):
            frames.append(Frame(pixels=pix.copy(), index=i))
            keypoints.append(KeypointSet(points=[("center", cx, cy)], ref_length=ref_length))

    clip = VideoClip(
        id=f"{cfg.kind}-{cfg.seed:08d}",
        frames=frames,
        fps=cfg.fps,
        label=cfg.kind,
        keypoints=keypoints,
    )
    clip.validate()
    return clip


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

SPLITS = ("train", "heldout", "test")
_SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def _largest_remainder(n: int, fractions: list[float]) -> list[int]:
    """Integer counts summing to n, proportional to fractions (ties by order)."""
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def assign_splits(n: int, seed: int) -> list[str]:
    """Seeded 80/10/10 train/heldout/test split assignment by clip index."""
    counts = _largest_remainder(n, list(_SPLIT_FRACTIONS))
    perm = np.random.default_rng(np.random.SeedSequence((0x5A17, seed))).permutation(n)
    split_of = [""] * n
    pos = 0
    for split, count in zip(SPLITS, counts):
        for j in perm[pos : pos + count]:
            split_of[int(j)] = split
        pos += count
    return split_of


def write_clip(clip_dir: str | Path, clip: VideoClip) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for frame in clip.frames:
        (clip_dir / frame_filename(frame.index, frame.channels)).write_bytes(encode_pnm(frame.pixels))
    if clip.keypoints is not None:
        payload = [
            {"points": [[n, x, y] for n, x, y in kp.points], "ref_length": kp.ref_length}
            for kp in clip.keypoints
        ]
        (clip_dir / "keypoints.json").write_text(json.dumps(payload, sort_keys=True))


def gen_corpus(
    out_dir: str | Path,
    n_clips: int,
    mix: dict[str, float],
    seed: int,
    base: SynthConfig | None = None,
) -> list[dict]:
    """Write n_clips synthetic clips plus a JSON-lines manifest.

    ``mix`` maps kind -> fraction (must sum to 1); counts are exact via
    largest-remainder allocation. Splits are assigned 80/10/10 by clip,
    seeded. Returns the manifest entries in on-disk order.
    """
    out = Path(out_dir)
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError("mix", f"fractions sum to {total}, expected 1")
    for kind in mix:
        if kind not in KINDS:
            raise ConfigError("mix", f"unknown kind {kind!r}")
    kinds = sorted(mix)
    counts = _largest_remainder(n_clips, [mix[k] for k in kinds])
    kind_seq: list[str] = []
    for kind, count in zip(kinds, counts):
        kind_seq.extend([kind] * count)

    split_of = assign_splits(n_clips, seed)
    base = base if base is not None else SynthConfig(kind="static")
    entries: list[dict] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    for i, kind in enumerate(kind_seq):
        cfg = replace(base, kind=kind, seed=seed * 1_000_003 + i)
        clip = gen_clip(cfg)
        clip_id = f"{kind}_{i:04d}"
        clip.id = clip_id
        write_clip(out / clip_id, clip)
        entries.append(
            {
                "id": clip_id,
                "path": clip_id,
                "n_frames": len(clip),
                "fps": clip.fps,
                "split": split_of[i],
                "label": kind,
                "keypoints_path": f"{clip_id}/keypoints.json",
            }
        )
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))
    return entries
