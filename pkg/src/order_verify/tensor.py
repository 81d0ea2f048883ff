"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is implicit: every op returns a Tensor holding its inputs and a
backward closure; ``backward()`` runs the closures in reverse topological
order, accumulating gradients additively at fan-out. Convolution is im2col
plus one BLAS matmul each way, which is what makes desk-scale training
tolerable in pure numpy.

Includes the layer kernels the backbone needs (conv2d, maxpool2d, relu,
dense, dropout, batchnorm, softmax cross-entropy), SGD-with-momentum and
AdaGrad steps, and the binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (for inference passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _tracking(*tensors: "Tensor") -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


class Tensor:
    """A float64 array plus an optional gradient and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` into the gradient. ``owned=True`` lets the first
        accumulation adopt the array without copying (caller must not reuse it)."""
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from this (typically scalar) tensor."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # Drop the tape: the closures reference their output tensors, which
        # would otherwise keep whole iteration graphs alive until a cycle
        # collection.
        for node in topo:
            node._backward = None
            node._prev = ()

    # -- elementwise / structural ops ------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        req = _tracking(self, other)
        out = Tensor(self.data + other.data, req, (self, other) if req else ())

        def _bw():
            if self.requires_grad:
                g = _unbroadcast(out.grad, self.data.shape)
                self.accumulate(g, owned=g is not out.grad)
            if other.requires_grad:
                g = _unbroadcast(out.grad, other.data.shape)
                other.accumulate(g, owned=g is not out.grad)

        if req:
            out._backward = _bw
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        req = _tracking(self, other)
        out = Tensor(self.data * other.data, req, (self, other) if req else ())

        def _bw():
            if self.requires_grad:
                self.accumulate(_unbroadcast(out.grad * other.data, self.data.shape), owned=True)
            if other.requires_grad:
                other.accumulate(_unbroadcast(out.grad * self.data, other.data.shape), owned=True)

        if req:
            out._backward = _bw
        return out

    def __neg__(self):
        req = _tracking(self)
        out = Tensor(-self.data, req, (self,) if req else ())

        def _bw():
            if self.requires_grad:
                self.accumulate(-out.grad, owned=True)

        if req:
            out._backward = _bw
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    __radd__ = __add__
    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        req = _tracking(self, other)
        out = Tensor(self.data @ other.data, req, (self, other) if req else ())

        def _bw():
            if self.requires_grad:
                self.accumulate(out.grad @ other.data.T, owned=True)
            if other.requires_grad:
                other.accumulate(self.data.T @ out.grad, owned=True)

        if req:
            out._backward = _bw
        return out

    def reshape(self, *shape) -> "Tensor":
        req = _tracking(self)
        out = Tensor(self.data.reshape(*shape), req, (self,) if req else ())

        def _bw():
            if self.requires_grad:
                self.accumulate(out.grad.reshape(self.data.shape))

        if req:
            out._backward = _bw
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        req = _tracking(self)
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), req, (self,) if req else ())

        def _bw():
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.accumulate(np.broadcast_to(g, self.data.shape).copy(), owned=True)

        if req:
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def relu(self) -> "Tensor":
        mask = self.data > 0
        req = _tracking(self)
        out = Tensor(np.where(mask, self.data, 0.0), req, (self,) if req else ())

        def _bw():
            if self.requires_grad:
                self.accumulate(out.grad * mask, owned=True)

        if req:
            out._backward = _bw
        return out

    def sqrt(self) -> "Tensor":
        root = np.sqrt(self.data)
        req = _tracking(self)
        out = Tensor(root, req, (self,) if req else ())

        def _bw():
            if self.requires_grad:
                # Subgradient 0 at exactly 0 keeps distances of identical
                # embeddings differentiable in practice.
                safe = np.where(root > 0, root, 1.0)
                self.accumulate(np.where(root > 0, out.grad / (2.0 * safe), 0.0), owned=True)

        if req:
            out._backward = _bw
        return out

    def abs(self) -> "Tensor":
        req = _tracking(self)
        out = Tensor(np.abs(self.data), req, (self,) if req else ())

        def _bw():
            if self.requires_grad:
                self.accumulate(out.grad * np.sign(self.data), owned=True)

        if req:
            out._backward = _bw
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def slice_axis(t: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Contiguous slice along one axis, differentiable."""
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    req = _tracking(t)
    out = Tensor(t.data[idx].copy(), req, (t,) if req else ())

    def _bw():
        if t.requires_grad:
            g = np.zeros_like(t.data)
            g[idx] = out.grad
            t.accumulate(g, owned=True)

    if req:
        out._backward = _bw
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    req = _grad_enabled and any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate(datas, axis=axis), req, tuple(tensors) if req else ())
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(out.grad[tuple(idx)])

    if req:
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, H, W, Cin) with (k, k, Cin, Cout) plus bias.

    Zero padding; channels-last throughout. The patch matrix is built with
    block copies (one (kk, M) F-ordered buffer for single-channel inputs,
    an (N, oh, ow, k, k, C) stack otherwise) so each direction is a single
    BLAS matmul over views.
    """
    n, h, wid, cin = x.data.shape
    k, k2, cin_w, cout = w.data.shape
    if cin != cin_w or k != k2:
        raise ValueError(f"conv2d: input channels {cin} / kernel {w.data.shape} mismatch")
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (wid + 2 * pad - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"conv2d: non-positive output dims ({out_h}, {out_w})")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    kk = k * k * cin
    m = n * out_h * out_w
    single = cin == 1

    if single:
        cols = np.empty((kk, m))
        src = xp[:, :, :, 0]
        for i in range(k):
            for j in range(k):
                cols[i * k + j] = src[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride].reshape(m)
        colsmat = cols.T  # F-ordered view; BLAS takes it without a copy
    else:
        cols = np.empty((n, out_h, out_w, k, k, cin))
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[
                    :, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :
                ]
        colsmat = cols.reshape(m, kk)

    wmat = w.data.reshape(kk, cout)
    out_data = colsmat @ wmat
    out_data += b.data
    req = _tracking(x, w, b)
    out = Tensor(out_data.reshape(n, out_h, out_w, cout), req, (x, w, b) if req else ())

    def _bw():
        g_flat = out.grad.reshape(m, cout)
        if b.requires_grad:
            b.accumulate(g_flat.sum(axis=0))
        if w.requires_grad:
            w.accumulate((colsmat.T @ g_flat).reshape(w.data.shape), owned=True)
        if x.requires_grad:
            hp, wp = h + 2 * pad, wid + 2 * pad
            dxp = np.zeros((n, hp, wp, cin))
            if single:
                dcols = wmat @ g_flat.T  # (kk, M), rows align with offsets
                dst = dxp[:, :, :, 0]
                for i in range(k):
                    for j in range(k):
                        dst[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcols[
                            i * k + j
                        ].reshape(n, out_h, out_w)
            else:
                dcols = (g_flat @ wmat.T).reshape(n, out_h, out_w, k, k, cin)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :] += dcols[
                            :, :, :, i, j, :
                        ]
            x.accumulate(dxp[:, pad : pad + h, pad : pad + wid, :] if pad else dxp, owned=True)

    if req:
        out._backward = _bw
    return out


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling over k x k windows of (N, H, W, C); first max wins ties.

    The running max/argmax over the k*k window offsets keeps everything in
    plain strided slices (no scatter, no window gathers).
    """
    stride = stride or k
    n, h, w, c = x.data.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"maxpool2d: non-positive output dims ({out_h}, {out_w})")

    best = None
    arg = None
    for idx in range(k * k):
        i, j = divmod(idx, k)
        sl = x.data[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :]
        if best is None:
            best = sl.copy()
            arg = np.zeros(sl.shape, dtype=np.int8)
        else:
            mask = sl > best
            np.copyto(best, sl, where=mask)
            np.copyto(arg, np.int8(idx), where=mask)
    req = _tracking(x)
    out = Tensor(best, req, (x,) if req else ())

    def _bw():
        if not x.requires_grad:
            return
        dx = np.zeros((n, h, w, c))
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :] += np.where(
                arg == idx, out.grad, 0.0
            )
        x.accumulate(dx, owned=True)

    if req:
        out._backward = _bw
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: x @ w + b for (N, D) inputs."""
    return x.matmul(w) + b


def dropout(
    x: Tensor,
    p: float,
    train_mode: bool,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout; identity when not training. ``mask`` overrides rng."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p = {p} outside [0, 1)")
    if not train_mode or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout: training mode needs an rng or an explicit mask")
        mask = rng.random(x.data.shape) >= p
    scale = mask / (1.0 - p)
    req = _tracking(x)
    out = Tensor(x.data * scale, req, (x,) if req else ())

    def _bw():
        if x.requires_grad:
            x.accumulate(out.grad * scale, owned=True)

    if req:
        out._backward = _bw
    return out


def _bn_axes(shape: tuple[int, ...]) -> tuple[int, ...]:
    """Reduction axes for channels-last batchnorm: all but the last."""
    if len(shape) not in (2, 4):
        raise ValueError(f"batchnorm: unsupported input rank {len(shape)}")
    return tuple(range(len(shape) - 1))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train_mode: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization per channel (channels last: (N, C) or (N, H, W, C)).

    Training mode uses batch statistics and updates the running buffers in
    place with the given momentum; inference mode normalizes with the
    running buffers.
    """
    _bn_axes(x.data.shape)  # rank check
    if train_mode and x.data.shape[0] < 2:
        raise ValueError("batchnorm: training mode undefined for batch size 1")
    c = x.data.shape[-1]
    xf = x.data.reshape(-1, c)  # flat view keeps channel reductions contiguous
    n_eff = xf.shape[0]
    if train_mode:
        mu = xf.mean(axis=0)
        var = (xf * xf).mean(axis=0) - mu * mu
        np.maximum(var, 0.0, out=var)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    # Fused form: out = x * scale + shift; xhat is recomputed on backward.
    scale = gamma.data * invstd
    shift = beta.data - gamma.data * mu * invstd
    req = _tracking(x, gamma, beta)
    out = Tensor(x.data * scale + shift, req, (x, gamma, beta) if req else ())

    def _bw():
        gf = out.grad.reshape(-1, c)
        xhat = (xf - mu) * invstd
        if beta.requires_grad:
            beta.accumulate(gf.sum(axis=0), owned=True)
        if gamma.requires_grad:
            gamma.accumulate((gf * xhat).sum(axis=0), owned=True)
        if x.requires_grad:
            gs = gamma.data * invstd
            if train_mode:
                sum_g = gf.sum(axis=0)
                sum_gx = (gf * xhat).sum(axis=0)
                dx = gf - sum_g / n_eff
                dx -= xhat * (sum_gx / n_eff)
                dx *= gs
                x.accumulate(dx.reshape(x.data.shape), owned=True)
            else:
                x.accumulate(gs * out.grad, owned=True)

    if req:
        out._backward = _bw
    return out


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of per-row softmax against integer labels."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_xent: labels must be ints in [0, {k}) of shape ({n},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    req = _tracking(logits)
    out = Tensor(loss, req, (logits,) if req else ())

    def _bw():
        if logits.requires_grad:
            probs = np.exp(logp)
            probs[np.arange(n), labels] -= 1.0
            logits.accumulate(out.grad * probs / n, owned=True)

    if req:
        out._backward = _bw
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Hyperparameters plus per-parameter buffers for one optimizer."""

    kind: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    eps: float = 1e-8
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: dict[str, Tensor], state: OptimState) -> None:
    """v <- m*v + g + wd*p;  p <- p - lr*v."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"sgd_momentum_step: parameter {name!r} has no gradient")
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(p.data)
        v *= state.momentum
        v += g
        p.data -= state.lr * v


def adagrad_step(params: dict[str, Tensor], state: OptimState) -> None:
    """G <- G + g^2;  p <- p - lr * g / (sqrt(G) + eps)."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adagrad_step: parameter {name!r} has no gradient")
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        acc = state.buffers.get(name)
        if acc is None:
            acc = state.buffers[name] = np.zeros_like(p.data)
        acc += g * g
        p.data -= state.lr * g / (np.sqrt(acc) + state.eps)


def optimizer_step(params: dict[str, Tensor], state: OptimState) -> None:
    if state.kind == "sgd":
        sgd_momentum_step(params, state)
    elif state.kind == "adagrad":
        adagrad_step(params, state)
    else:
        raise ValueError(f"unknown optimizer kind {state.kind!r}")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "CKPT", version u16, meta JSON, named tensors
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1
_DTYPE_F64 = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays plus a JSON meta blob, little-endian."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)  # only reached for ndim >= 1
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 6)
    meta = json.loads(data[10 : 10 + meta_len].decode())
    off = 10 + meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode()
            off += name_len
            dtype, rank = struct.unpack_from("<BB", data, off)
            off += 2
            if dtype != _DTYPE_F64:
                raise FormatError(f"{path}: unknown dtype tag {dtype} in record {i}")
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if rank else 8
            payload = data[off : off + nbytes]
            if len(payload) != nbytes:
                raise struct.error("short payload")
            off += nbytes
        except struct.error as exc:
            raise FormatError(
                f"{path}: truncated mid-record after record {i - 1} ({i} whole record(s) read)"
            ) from exc
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return tensors, meta
