"""Layers, parameters, optimizer and checkpoint container.

All feature maps are channel-last: images are [B, H, W, C], sequences
[B, L, C]. Convolution kernels are stored as [kh, kw, Cin, Cout]
(depthwise: [kh, kw, C]).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import (
    DomainError,
    ShapeError,
    StateError,
    Tensor,
    abs_,
    as_tensor,
    get_default_dtype,
    make_op,
    mean,
    mul,
    permute,
    reshape,
    sigmoid,
    silu,
    unbroadcast,
)


# ---------------------------------------------------------------------------
# parameters and modules


class Param(Tensor):
    """A named learnable tensor."""

    __slots__ = ("name", "learnable")

    def __init__(self, data, name: str = "", learnable: bool = True, dtype=None):
        super().__init__(data, requires_grad=learnable, dtype=dtype)
        self.name = name
        self.learnable = learnable


class Module:
    """Container whose Param and Module attributes form a parameter tree."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Param, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Param, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "", _seen=None) -> Iterator[tuple[str, Param]]:
        """Yield (dotted path, Param); shared storage is reported once."""
        seen = set() if _seen is None else _seen
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Param):
                if id(value) in seen:
                    continue
                seen.add(id(value))
                value.name = path
                yield path, value
            else:
                yield from value.named_parameters(path + ".", seen)

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str = "") -> Param:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Param(rng.uniform(-bound, bound, size=shape), name=name)


# ---------------------------------------------------------------------------
# functional primitives


def linear(x, w, b=None) -> Tensor:
    """Affine map on the last axis; ``w`` is [Cin, Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out.reshape(*lead, w.shape[1]), parents, backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    cols = [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            for i in range(kh) for j in range(kw)]
    return np.concatenate(cols, axis=-1)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B, H, W, Cin] with a [kh, kw, Cin, Cout] kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, H, W, C], got {x.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    bsz, h, wd, _ = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit padded input {x.shape}")
    xp = np.pad(x.data, [(0, 0), (padding, padding), (padding, padding), (0, 0)]) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh * kw, cin)
        gxp = np.zeros_like(xp)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[..., k, :]
        gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


def depthwise_conv2d(x, w, b=None, padding: int = 1) -> Tensor:
    """Per-channel stride-1 cross-correlation; ``w`` is [kh, kw, C]."""
    x, w = as_tensor(x), as_tensor(w)
    kh, kw, c = w.shape
    if x.ndim != 4 or x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} vs kernel {w.shape}")
    bsz, h, wd, _ = x.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("depthwise_conv2d: kernel does not fit padded input")
    xp = np.pad(x.data, [(0, 0), (padding, padding), (padding, padding), (0, 0)]) if padding else x.data
    out = np.zeros((bsz, ho, wo, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + ho, j:j + wo, :] * w.data[i, j]
    if b is not None:
        b = as_tensor(b)
        out += b.data

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i:i + ho, j:j + wo, :], g)
                gxp[:, i:i + ho, j:j + wo, :] += g * w.data[i, j]
        gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last (channel) axis, then apply the affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data

    def backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(unbroadcast(g, beta.shape))
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return make_op(out, parents, backward)


def pixel_shuffle(x, r: int) -> Tensor:
    """Depth-to-space: [B, H, W, C*r*r] -> [B, rH, rW, C].

    Input channel c*r*r + i*r + j lands at output pixel (h*r + i, w*r + j).
    """
    x = as_tensor(x)
    b, h, w, cr = x.shape
    if cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {cr} channels not divisible by {r}^2")
    c = cr // (r * r)
    y = reshape(x, (b, h, w, c, r, r))
    y = permute(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (b, h * r, w * r, c))


def pixel_unshuffle(x, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    b, hr, wr, c = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial extents {hr}x{wr} not divisible by {r}")
    y = reshape(x, (b, hr // r, r, wr // r, r, c))
    y = permute(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (b, hr // r, wr // r, c * r * r))


def channel_attention(x, w1, b1, w2, b2) -> Tensor:
    """Squeeze-excitation gate: pool -> linear -> SiLU -> linear -> sigmoid."""
    x = as_tensor(x)
    pooled = mean(x, axis=(1, 2), keepdims=True)
    gate = sigmoid(linear(silu(linear(pooled, w1, b1)), w2, b2))
    return mul(x, gate)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    return mean(abs_(pred - target))


# ---------------------------------------------------------------------------
# layer modules


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (cin, cout), cin)
        self.bias = uniform_init(rng, (cout,), cin) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 padding: int | None = None, bias: bool = True):
        fan_in = cin * kernel * kernel
        self.weight = uniform_init(rng, (kernel, kernel, cin, cout), fan_in)
        self.bias = uniform_init(rng, (cout,), fan_in) if bias else None
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (kernel, kernel, channels), kernel * kernel)
        self.bias = uniform_init(rng, (channels,), kernel * kernel)
        self.padding = kernel // 2

    def forward(self, x):
        return depthwise_conv2d(x, self.weight, self.bias, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class ChannelAttention(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels % reduction:
            raise ShapeError(f"channel attention: {channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.squeeze = Linear(channels, hidden, rng)
        self.excite = Linear(hidden, channels, rng)

    def forward(self, x):
        return channel_attention(x, self.squeeze.weight, self.squeeze.bias,
                                 self.excite.weight, self.excite.bias)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: dict | None = None) -> dict:
    """One bias-corrected Adam update in place; returns the (new) state."""
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p.data) for p in params],
                 "v": [np.zeros_like(p.data) for p in params]}
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.learnable]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = None

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        self.state = adam_step(self.params, grads, self.lr, *self.betas, eps=self.eps, state=self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"LFMC"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write (name, shape, little-endian data) records behind a magic header."""
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 9
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _CODE_DTYPES.get(code)
            if dt is None:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
            nbytes = int(np.prod(shape)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated record {name}")
            out[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


__all__ = [
    "Adam", "ChannelAttention", "CheckpointError", "Conv2d", "DepthwiseConv2d", "DomainError",
    "LayerNorm", "Linear", "Module", "Param", "StateError", "adam_step", "channel_attention",
    "conv2d", "depthwise_conv2d", "get_default_dtype", "l1_loss", "layer_norm", "linear",
    "load_tensors", "pixel_shuffle", "pixel_unshuffle", "save_tensors", "uniform_init",
]
