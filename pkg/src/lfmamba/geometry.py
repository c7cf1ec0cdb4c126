"""4D light-field layouts and image-space transforms.

A light field is stored as [U, V, H, W] (single channel) or
[U, V, H, W, C]. The slicing functions take the channel-explicit form,
optionally with one leading batch axis ([B, U, V, H, W, C]), and accept
either numpy arrays or autograd Tensors. Batch indices are u*V + v (SAI),
h*W + w (MacPI), v*W + w (EPI-H) and u*H + h (EPI-V), with the outer batch
axis most significant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import DomainError, ShapeError, Tensor
from .tensor import permute as _tensor_permute

SLICE_KINDS = ("sai", "macpi", "epi_h", "epi_v")


@dataclass
class LightField:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (4, 5) or min(self.data.shape[:4]) < 1:
            raise ShapeError(f"light field must be [U, V, H, W(, C)], got {self.data.shape}")

    @property
    def angular(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 4 else self.data.shape[4]


def _permute(x, order):
    if isinstance(x, Tensor):
        return _tensor_permute(x, order)
    return np.ascontiguousarray(np.transpose(x, order))


def _split_batch(x):
    if x.ndim == 5:
        return 1, x.shape, False
    if x.ndim == 6:
        return x.shape[0], x.shape[1:], True
    raise ShapeError(f"expected [(B,) U, V, H, W, C], got {x.shape}")


def to_sai(x):
    """[(B,) U, V, H, W, C] -> [B*U*V, H, W, C]."""
    b, (u, v, h, w, c), _ = _split_batch(x)
    return x.reshape(b * u * v, h, w, c)


def from_sai(t, u: int, v: int, batched: bool = False):
    n, h, w, c = t.shape
    b = _batch_from(n, u * v)
    return t.reshape(*((b,) if batched else ()), u, v, h, w, c)


def to_macpi(x):
    """[(B,) U, V, H, W, C] -> [B*H*W, U, V, C]."""
    b, (u, v, h, w, c), _ = _split_batch(x)
    y = _permute(x.reshape(b, u, v, h, w, c), (0, 3, 4, 1, 2, 5))
    return y.reshape(b * h * w, u, v, c)


def from_macpi(t, h: int, w: int, batched: bool = False):
    n, u, v, c = t.shape
    b = _batch_from(n, h * w)
    y = _permute(t.reshape(b, h, w, u, v, c), (0, 3, 4, 1, 2, 5))
    return y if batched else y.reshape(u, v, h, w, c)


def to_epi_h(x):
    """[(B,) U, V, H, W, C] -> [B*V*W, U, H, C]: (u, h) planes at fixed (v, w)."""
    b, (u, v, h, w, c), _ = _split_batch(x)
    y = _permute(x.reshape(b, u, v, h, w, c), (0, 2, 4, 1, 3, 5))
    return y.reshape(b * v * w, u, h, c)


def from_epi_h(t, v: int, w: int, batched: bool = False):
    n, u, h, c = t.shape
    b = _batch_from(n, v * w)
    y = _permute(t.reshape(b, v, w, u, h, c), (0, 3, 1, 4, 2, 5))
    return y if batched else y.reshape(u, v, h, w, c)


def to_epi_v(x):
    """[(B,) U, V, H, W, C] -> [B*U*H, V, W, C]: (v, w) planes at fixed (u, h)."""
    b, (u, v, h, w, c), _ = _split_batch(x)
    y = _permute(x.reshape(b, u, v, h, w, c), (0, 1, 3, 2, 4, 5))
    return y.reshape(b * u * h, v, w, c)


def from_epi_v(t, u: int, h: int, batched: bool = False):
    n, v, w, c = t.shape
    b = _batch_from(n, u * h)
    y = _permute(t.reshape(b, u, h, v, w, c), (0, 1, 3, 2, 4, 5))
    return y if batched else y.reshape(u, v, h, w, c)


def _batch_from(n: int, per_item: int) -> int:
    if n % per_item:
        raise ShapeError(f"batch of {n} is not a multiple of {per_item}")
    return n // per_item


_TO = {"sai": to_sai, "macpi": to_macpi, "epi_h": to_epi_h, "epi_v": to_epi_v}


@dataclass
class SliceView:
    """A light field rearranged into one of the four 2D slice families."""

    kind: str
    tensor: object
    provenance: tuple  # (B or None, U, V, H, W, C)


def make_view(kind: str, x) -> SliceView:
    if kind not in _TO:
        raise ValueError(f"unknown slice kind {kind!r}; expected one of {SLICE_KINDS}")
    b, extents, batched = _split_batch(x)
    return SliceView(kind, _TO[kind](x), ((b if batched else None),) + tuple(extents))


def invert(view: SliceView):
    b, u, v, h, w, c = view.provenance
    batched = b is not None
    n = (b or 1)
    expected = {
        "sai": (n * u * v, h, w, c),
        "macpi": (n * h * w, u, v, c),
        "epi_h": (n * v * w, u, h, c),
        "epi_v": (n * u * h, v, w, c),
    }[view.kind]
    if tuple(view.tensor.shape) != expected:
        raise ShapeError(f"{view.kind} view of shape {view.tensor.shape} does not match "
                         f"provenance {view.provenance}")
    t = view.tensor
    if view.kind == "sai":
        return from_sai(t, u, v, batched)
    if view.kind == "macpi":
        return from_macpi(t, h, w, batched)
    if view.kind == "epi_h":
        return from_epi_h(t, v, w, batched)
    return from_epi_v(t, u, h, batched)


def macpi_image(lf: np.ndarray) -> np.ndarray:
    """Interleave a single-channel [U, V, H, W] field: pixel (h*U+u, w*V+v) = lf[u, v, h, w]."""
    lf = np.asarray(lf)
    if lf.ndim != 4:
        raise ShapeError(f"macpi_image expects [U, V, H, W], got {lf.shape}")
    u, v, h, w = lf.shape
    return np.ascontiguousarray(lf.transpose(2, 0, 3, 1)).reshape(h * u, w * v)


def from_macpi_image(img: np.ndarray, u: int, v: int) -> np.ndarray:
    hu, wv = img.shape
    if hu % u or wv % v:
        raise ShapeError(f"MacPI image {img.shape} not divisible by angular extents {u}x{v}")
    return np.ascontiguousarray(img.reshape(hu // u, u, wv // v, v).transpose(1, 3, 0, 2))


# ---------------------------------------------------------------------------
# color

# ITU-R BT.601 full range, chroma offset 0.5
_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_ycbcr(img) -> np.ndarray:
    """Channel-last RGB in [0, 1] to YCbCr in [0, 1]."""
    img = np.asarray(img, dtype=float)
    return np.clip(img @ _RGB_TO_YCBCR.T + _OFFSET, 0.0, 1.0)


def ycbcr_to_rgb(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return np.clip((img - _OFFSET) @ _YCBCR_TO_RGB.T, 0.0, 1.0)


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=float))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int, scale: float, antialias: bool = True):
    """Source indices (edge-clamped) and weights, each [n_out, taps].

    Half-pixel centers (align-corners false). When shrinking with
    ``antialias`` the kernel is stretched by 1/scale and renormalized.
    """
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    if scale >= 1.0 or not antialias:
        first = np.floor(centers).astype(int) - 1
        idx = first[:, None] + np.arange(4)[None, :]
        weights = cubic(centers[:, None] - idx)
    else:
        support = 2.0 / scale
        taps = int(np.ceil(2 * support)) + 2
        first = np.floor(centers - support).astype(int)
        idx = first[:, None] + np.arange(taps)[None, :]
        weights = scale * cubic(scale * (centers[:, None] - idx))
        weights = weights / weights.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), weights


def _output_extent(n: int, scale: float) -> int:
    out = int(round(n * scale))
    if out < 1:
        raise DomainError(f"resizing {n} pixels by {scale} leaves no output pixels")
    return out


def bicubic_resize(img, scale: float, antialias: bool = True) -> np.ndarray:
    """Resize the last two axes by ``scale``.

    Upsampling evaluates the 4x4 stencil with a summation order that is
    invariant under flips and transposition, so the result commutes exactly
    with the dihedral transforms used by the self-ensemble.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape[-2:]
    ho, wo = _output_extent(h, scale), _output_extent(w, scale)
    ri, rw = resize_weights(h, ho, ho / h, antialias)
    ci, cw = resize_weights(w, wo, wo / w, antialias)
    if ri.shape[1] == 4 and ci.shape[1] == 4:
        return _stencil4x4(img, ri, rw, ci, cw)
    # separable path (shrinking): order of summation is irrelevant here
    rows = np.einsum("ok,...okw->...ow", rw, img[..., ri, :])
    return np.einsum("pk,...hpk->...hp", cw, rows[..., :, ci])


def _stencil4x4(img, ri, rw, ci, cw) -> np.ndarray:
    def term(k, m):
        weight = rw[:, k][:, None] * cw[:, m][None, :]
        return weight * img[..., ri[:, k][:, None], ci[:, m][None, :]]

    t = {(k, m): term(k, m) for k in range(4) for m in range(4)}
    corners = (t[0, 0] + t[3, 3]) + (t[0, 3] + t[3, 0])
    inner = (t[1, 1] + t[2, 2]) + (t[1, 2] + t[2, 1])
    edge_rows = (t[0, 1] + t[3, 2]) + (t[0, 2] + t[3, 1])
    edge_cols = (t[1, 0] + t[2, 3]) + (t[2, 0] + t[1, 3])
    return (corners + inner) + (edge_rows + edge_cols)


# ---------------------------------------------------------------------------
# patches and augmentation


def extract_patches(lf, size: int, stride: int) -> list:
    """Crop every view at identical spatial windows, row-major window order."""
    lf = np.asarray(lf)
    h, w = lf.shape[2], lf.shape[3]
    if size > h or size > w or size < 1:
        raise DomainError(f"patch size {size} does not fit spatial extents {h}x{w}")
    return [lf[:, :, i:i + size, j:j + size].copy()
            for i in range(0, h - size + 1, stride)
            for j in range(0, w - size + 1, stride)]


AUGMENT_OPS = ("flip_h", "flip_v", "rot90")


def augment(lf, op: str) -> np.ndarray:
    """Dihedral transform applied jointly to the angular and spatial planes.

    flip_h reverses (v, w); flip_v reverses (u, h); rot90 rotates the
    (u, v) and (h, w) planes together, so EPI line slopes stay valid.
    """
    lf = np.asarray(lf)
    if op == "flip_h":
        return np.flip(lf, axis=(1, 3)).copy()
    if op == "flip_v":
        return np.flip(lf, axis=(0, 2)).copy()
    if op == "rot90":
        if lf.shape[0] != lf.shape[1]:
            raise DomainError(f"rot90 needs a square angular grid, got {lf.shape[0]}x{lf.shape[1]}")
        return np.rot90(np.rot90(lf, 1, axes=(0, 1)), 1, axes=(2, 3)).copy()
    raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")


def dihedral(lf, k: int, flip: bool) -> np.ndarray:
    """flip_h (optional) followed by k quarter turns."""
    out = augment(lf, "flip_h") if flip else np.asarray(lf)
    for _ in range(k % 4):
        out = augment(out, "rot90")
    return out


def inverse_dihedral(lf, k: int, flip: bool) -> np.ndarray:
    out = np.asarray(lf)
    for _ in range((4 - k % 4) % 4):
        out = augment(out, "rot90")
    return augment(out, "flip_h") if flip else out


def geometry_ensemble(model: Callable, lf) -> np.ndarray:
    """Average ``model`` over the 8 joint spatial-angular dihedral transforms."""
    lf = np.asarray(lf)
    if lf.shape[0] != lf.shape[1]:
        raise DomainError("geometry ensemble needs a square angular grid")
    outs = [inverse_dihedral(np.asarray(model(dihedral(lf, k, flip))), k, flip)
            for flip in (False, True) for k in range(4)]
    # balanced tree keeps the mean exact when all eight outputs agree
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return outs[0] / 8.0
