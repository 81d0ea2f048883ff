"""Backbone network, shared-weight order classifier, and pretext/transfer heads.

One parameter set backs every stack of the tuple classifier: the three
frames of a tuple are stacked into a single batch, pushed through the same
backbone tensors, and the split embeddings are concatenated into a linear
head. Weight sharing is therefore identity, not synchronized copies. In
training mode, batch statistics for batchnorm pool across the stacked
frames; inference uses running statistics so a single-stack embedding of a
frame equals its embedding inside any stack.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Frame, KeypointSet
from .errors import ConfigError
from .tensor import (
    Tensor,
    batchnorm,
    conv2d,
    dense,
    dropout,
    he_uniform,
    maxpool2d,
    no_grad,
    slice_axis,
)

TASKS = ("three_order", "two_close", "two_order", "drlim", "tempcoh", "classify", "pose")


@dataclass
class StageConfig:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


@dataclass
class BackboneConfig:
    """Desk-scale conv stack -> embedding; all stacks share these parameters."""

    input_hw: tuple[int, int] = (32, 32)
    in_channels: int = 1
    stages: list[StageConfig] = field(
        default_factory=lambda: [StageConfig(16), StageConfig(32), StageConfig(64)]
    )
    embed_dim: int = 128
    use_batchnorm: bool = True
    dropout_p: float = 0.5
    mean_subtract: bool = True

    def validate(self) -> None:
        if self.embed_dim < 8:
            raise ConfigError("embed_dim", "must be >= 8")
        h, w = self.spatial_dims()[-1]
        if h <= 0 or w <= 0:
            raise ConfigError("stages", f"stages reduce input to non-positive dims ({h}, {w})")

    def spatial_dims(self) -> list[tuple[int, int]]:
        """Spatial size after each stage (conv 'same' padding, then pool)."""
        h, w = self.input_hw
        dims = [(h, w)]
        for st in self.stages:
            h = (h + 2 * (st.kernel // 2) - st.kernel) // st.stride + 1
            w = (w + 2 * (st.kernel // 2) - st.kernel) // st.stride + 1
            if st.pool > 1:
                h, w = (h - st.pool) // st.pool + 1, (w - st.pool) // st.pool + 1
            dims.append((h, w))
        return dims

    def flat_dim(self) -> int:
        h, w = self.spatial_dims()[-1]
        return h * w * self.stages[-1].channels

    def layer_geometry(self) -> list[tuple[str, int, int, int]]:
        """(name, kernel, stride, pad) per layer, for receptive-field math."""
        geo = []
        for i, st in enumerate(self.stages, start=1):
            geo.append((f"conv{i}", st.kernel, st.stride, st.kernel // 2))
            if st.pool > 1:
                geo.append((f"pool{i}", st.pool, st.pool, 0))
        return geo

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        d["stages"] = [StageConfig(**s) for s in d["stages"]]
        return cls(**d)


def config_hash(obj) -> str:
    """Stable hash of any JSON-serializable config."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class Backbone:
    """Conv stages + embedding layer with a named parameter registry."""

    def __init__(self, cfg: BackboneConfig, params: dict[str, Tensor], bn_state: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.bn_state = bn_state
        self.input_mean = np.zeros(cfg.in_channels)

    @classmethod
    def init(cls, cfg: BackboneConfig, rng: np.random.Generator) -> "Backbone":
        cfg.validate()
        params: dict[str, Tensor] = {}
        bn_state: dict[str, np.ndarray] = {}
        cin = cfg.in_channels
        for i, st in enumerate(cfg.stages, start=1):
            fan_in = cin * st.kernel * st.kernel
            params[f"conv{i}/w"] = Tensor(
                he_uniform(rng, (st.kernel, st.kernel, cin, st.channels), fan_in), requires_grad=True
            )
            params[f"conv{i}/b"] = Tensor(np.zeros(st.channels), requires_grad=True)
            if cfg.use_batchnorm:
                params[f"bn{i}/gamma"] = Tensor(np.ones(st.channels), requires_grad=True)
                params[f"bn{i}/beta"] = Tensor(np.zeros(st.channels), requires_grad=True)
                bn_state[f"bn{i}/mean"] = np.zeros(st.channels)
                bn_state[f"bn{i}/var"] = np.ones(st.channels)
            cin = st.channels
        flat = cfg.flat_dim()
        params["embed/w"] = Tensor(he_uniform(rng, (flat, cfg.embed_dim), flat), requires_grad=True)
        params["embed/b"] = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)
        return cls(cfg, params, bn_state)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def preprocess(self, frames: np.ndarray) -> np.ndarray:
        """(N, h, w, c) pixels -> float64, per-channel mean subtracted."""
        x = np.asarray(frames, dtype=np.float64)
        if self.cfg.mean_subtract:
            x = x - self.input_mean
        return x

    def forward(
        self,
        x: Tensor,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """(N, h, w, c) Tensor -> (N, embed_dim) embedding Tensor."""
        h = x
        for i, st in enumerate(self.cfg.stages, start=1):
            h = conv2d(h, self.params[f"conv{i}/w"], self.params[f"conv{i}/b"], st.stride, st.kernel // 2)
            if self.cfg.use_batchnorm:
                h = batchnorm(
                    h,
                    self.params[f"bn{i}/gamma"],
                    self.params[f"bn{i}/beta"],
                    self.bn_state[f"bn{i}/mean"],
                    self.bn_state[f"bn{i}/var"],
                    train_mode,
                )
            h = h.relu()
            if st.pool > 1:
                h = maxpool2d(h, st.pool)
        h = h.reshape(h.shape[0], -1)
        h = dense(h, self.params["embed/w"], self.params["embed/b"]).relu()
        return dropout(h, self.cfg.dropout_p, train_mode, rng)

    def embed(self, frames: Frame | np.ndarray) -> np.ndarray:
        """Inference-mode embedding of one frame (h, w, c) or a batch (N, h, w, c)."""
        pixels = frames.pixels if isinstance(frames, Frame) else np.asarray(frames)
        single = pixels.ndim == 3
        batch = pixels[None] if single else pixels
        expect = (*self.cfg.input_hw, self.cfg.in_channels)
        if batch.shape[1:] != expect:
            raise ValueError(f"embed: frame shape {batch.shape[1:]} != expected {expect}")
        with no_grad():
            out = self.forward(Tensor(self.preprocess(batch))).data
        return out[0] if single else out

    def forward_features(self, frames: np.ndarray) -> dict[str, np.ndarray]:
        """Inference pass returning post-activation (N, H, W, C) maps per layer."""
        feats: dict[str, np.ndarray] = {}
        with no_grad():
            return self._features_impl(frames, feats)

    def _features_impl(self, frames, feats):
        x = Tensor(self.preprocess(frames))
        h = x
        for i, st in enumerate(self.cfg.stages, start=1):
            h = conv2d(h, self.params[f"conv{i}/w"], self.params[f"conv{i}/b"], st.stride, st.kernel // 2)
            if self.cfg.use_batchnorm:
                h = batchnorm(
                    h,
                    self.params[f"bn{i}/gamma"],
                    self.params[f"bn{i}/beta"],
                    self.bn_state[f"bn{i}/mean"],
                    self.bn_state[f"bn{i}/var"],
                    False,
                )
            h = h.relu()
            feats[f"conv{i}"] = h.data
            if st.pool > 1:
                h = maxpool2d(h, st.pool)
                feats[f"pool{i}"] = h.data
        return feats

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"backbone/{k}": v.data for k, v in self.params.items()}
        out.update({f"stats/{k}": v for k, v in self.bn_state.items()})
        out["stats/input_mean"] = self.input_mean
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            src = arrays[f"backbone/{k}"]
            if src.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {src.shape} != {p.data.shape}")
            p.data = src.copy()
        for k in self.bn_state:
            self.bn_state[k] = arrays[f"stats/{k}"].copy()
        self.input_mean = arrays["stats/input_mean"].copy()


class LinearHead:
    """Task head: a single affine layer on (concatenated) embeddings."""

    def __init__(self, w: Tensor, b: Tensor, prefix: str = "head"):
        self.w, self.b, self.prefix = w, b, prefix

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, prefix: str = "head") -> "LinearHead":
        return cls(
            Tensor(he_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True),
            Tensor(np.zeros(out_dim), requires_grad=True),
            prefix,
        )

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, prefix: str = "head") -> "LinearHead":
        return cls(
            Tensor(np.zeros((in_dim, out_dim)), requires_grad=True),
            Tensor(np.zeros(out_dim), requires_grad=True),
            prefix,
        )

    @property
    def params(self) -> dict[str, Tensor]:
        return {f"{self.prefix}/w": self.w, f"{self.prefix}/b": self.b}

    def param_count(self) -> int:
        return self.w.data.size + self.b.data.size

    def forward(self, e: Tensor) -> Tensor:
        return dense(e, self.w, self.b)


def _stacked_embed(
    backbone: Backbone,
    frames: np.ndarray,
    n_views: int,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> list[Tensor]:
    """Embed (N, n_views, h, w, c) through one shared pass; split per view."""
    n = frames.shape[0]
    flat = frames.reshape(n * n_views, *frames.shape[2:])
    x = Tensor(backbone.preprocess(flat))
    e = backbone.forward(x, train_mode, rng)
    views = e.reshape(n, n_views * backbone.cfg.embed_dim)
    dim = backbone.cfg.embed_dim
    # Views are interleaved row-wise after the reshape: row i holds
    # [e(view0), e(view1), ...] for sample i, in view order.
    return [views, dim]


def triplet_logits(
    backbone: Backbone,
    head: LinearHead,
    frames: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(N, 3, h, w, c) frame triples -> (N, 2) logits; class 1 = correct order."""
    views, _ = _stacked_embed(backbone, np.asarray(frames), 3, train_mode, rng)
    return head.forward(views)


def pair_logits(
    backbone: Backbone,
    head: LinearHead,
    frames: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(N, 2, h, w, c) frame pairs -> (N, 2) logits; label semantics per task."""
    views, _ = _stacked_embed(backbone, np.asarray(frames), 2, train_mode, rng)
    return head.forward(views)


def pair_embeddings(
    backbone: Backbone,
    frames: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Per-view embeddings of (N, 2, h, w, c) pairs, via the shared pass."""
    views, dim = _stacked_embed(backbone, np.asarray(frames), 2, train_mode, rng)
    return slice_axis(views, 1, 0, dim), slice_axis(views, 1, dim, 2 * dim)


def contrastive_loss(
    e1: Tensor, e2: Tensor, same: np.ndarray, delta: float, distance: str
) -> Tensor:
    """Mean over pairs of: d if same else max(delta - d, 0).

    ``distance`` selects l2 (DrLim-style) or l1 (temporal-coherence-style);
    ``same`` is a 0/1 vector.
    """
    if e1.shape != e2.shape:
        raise ValueError(f"contrastive_loss: embedding shapes {e1.shape} != {e2.shape}")
    if delta <= 0:
        raise ValueError("contrastive_loss: delta must be > 0")
    diff = e1 - e2
    if distance == "l2":
        d = (diff * diff).sum(axis=1).sqrt()
    elif distance == "l1":
        d = diff.abs().sum(axis=1)
    else:
        raise ValueError(f"contrastive_loss: unknown distance {distance!r}")
    same = np.asarray(same, dtype=np.float64)
    pull = d * Tensor(same)
    push = (Tensor(np.full(d.shape, float(delta))) - d).relu() * Tensor(1.0 - same)
    return (pull + push).mean()


def drlim_loss(e1: Tensor, e2: Tensor, same: np.ndarray, delta: float = 1.0) -> Tensor:
    """Contrastive embedding loss with l2 distance."""
    return contrastive_loss(e1, e2, same, delta, "l2")


def tempcoh_loss(e1: Tensor, e2: Tensor, same: np.ndarray, delta: float = 1.0) -> Tensor:
    """Contrastive embedding loss with l1 distance."""
    return contrastive_loss(e1, e2, same, delta, "l1")


def euclidean_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over the batch of summed squared coordinate error."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"euclidean_loss: shapes {pred.shape} != {target.shape}")
    diff = pred - Tensor(target)
    return (diff * diff).sum(axis=1).mean()


def regress_keypoints(
    backbone: Backbone,
    head: LinearHead,
    frame: Frame | np.ndarray,
    names: list[str],
    ref_length: float,
) -> KeypointSet:
    """Predict keypoints for one frame; head outputs (x, y) pairs in [0, 1]."""
    e = backbone.embed(frame)
    coords = (e[None, :] @ head.w.data + head.b.data)[0]
    if coords.size != 2 * len(names):
        raise ValueError(f"regress_keypoints: head emits {coords.size} values for {len(names)} keypoints")
    h, w = backbone.cfg.input_hw
    points = [
        (name, float(coords[2 * i] * w), float(coords[2 * i + 1] * h)) for i, name in enumerate(names)
    ]
    return KeypointSet(points=points, ref_length=ref_length)


@dataclass
class ContrastiveConfig:
    margin: float = 1.0
    distance: str = "l2"
    close_tau: int = 30

    def validate(self) -> None:
        if self.margin <= 0:
            raise ConfigError("margin", "must be > 0")
        if self.close_tau <= 0:
            raise ConfigError("close_tau", "must be > 0")
        if self.distance not in ("l2", "l1"):
            raise ConfigError("distance", "must be 'l2' or 'l1'")
