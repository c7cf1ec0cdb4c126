"""Four-direction 2D scanning and the learnable SSM blocks built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .nn import ChannelAttention, Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module, Param
from .ssm import GroupedSelectiveSSM
from .tensor import ShapeError, as_tensor, concat, getitem, mul, silu, split, stack, take

DIRECTIONS = ("row_fwd", "col_fwd", "row_rev", "col_rev")


@dataclass(frozen=True)
class ScanLayout:
    direction: str
    height: int
    width: int

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown scan direction {self.direction!r}")

    @property
    def order(self) -> np.ndarray:
        """order[k] = row-major pixel index visited at sequence position k."""
        grid = np.arange(self.height * self.width).reshape(self.height, self.width)
        seq = grid.ravel() if self.direction.startswith("row") else grid.T.ravel()
        return seq[::-1].copy() if self.direction.endswith("rev") else seq


def flatten_2d(x, layout: ScanLayout):
    """[B, H, W, C] -> [B, H*W, C] in the layout's visiting order."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if (h, w) != (layout.height, layout.width):
        raise ShapeError(f"layout is {layout.height}x{layout.width} but input is {h}x{w}")
    return take(x.reshape(b, h * w, c), layout.order, axis=1)


def unflatten_2d(seq, layout: ScanLayout):
    seq = as_tensor(seq)
    b, length, c = seq.shape
    if length != layout.height * layout.width:
        raise ShapeError(f"sequence of length {length} does not fit a {layout.height}x{layout.width} grid")
    inverse = np.argsort(layout.order)
    return take(seq, inverse, axis=1).reshape(b, layout.height, layout.width, c)


def ss2d_reference(x, scan: Callable):
    """Baseline cross-scan: four full-width copies, one per direction, summed.

    ``scan`` maps a stacked [B, L, 4, C] sequence to the same shape (one
    full-width SSM per direction).
    """
    x = as_tensor(x)
    b, h, w, c = x.shape
    layouts = [ScanLayout(d, h, w) for d in DIRECTIONS]
    seqs = stack([flatten_2d(x, lay) for lay in layouts], axis=2)
    out = scan(seqs)
    maps = [unflatten_2d(getitem(out, (slice(None), slice(None), g)), lay) for g, lay in enumerate(layouts)]
    return (maps[0] + maps[1]) + (maps[2] + maps[3])


def ess2d(x, scan: Callable):
    """Channel-grouped cross-scan: contiguous quarter g is scanned in direction g.

    ``scan`` maps a stacked [B, L, 4, C/4] sequence to the same shape.
    """
    x = as_tensor(x)
    b, h, w, c = x.shape
    if c % 4:
        raise ShapeError(f"ESS2D needs channels divisible by 4, got {c}")
    layouts = [ScanLayout(d, h, w) for d in DIRECTIONS]
    groups = split(x, 4, axis=-1)
    seqs = stack([flatten_2d(g, lay) for g, lay in zip(groups, layouts)], axis=2)
    out = scan(seqs)
    maps = [unflatten_2d(getitem(out, (slice(None), slice(None), g)), lay) for g, lay in enumerate(layouts)]
    return concat(maps, axis=-1)


class EfficientS6(Module):
    """Two-stream gated block around a (grouped) cross-scan.

    stream 1: linear -> depthwise 3x3 -> SiLU -> cross-scan -> layer norm
    stream 2: linear -> SiLU
    output:   linear(stream1 * stream2)
    ``mode="ss2d"`` swaps in the four-copy full-width baseline.
    """

    def __init__(self, channels: int, rng: np.random.Generator, expand: float = 2, d_state: int = 16,
                 dt_rank: int | None = None, mode: str = "ess2d", d_skip: bool = True,
                 discretization: str = "zoh"):
        inner = int(round(expand * channels))
        if inner % 4:
            raise ShapeError(f"expanded width {inner} must be divisible by 4")
        self.inner, self.mode = inner, mode
        self.in_proj = Linear(channels, 2 * inner, rng)
        self.dwconv = DepthwiseConv2d(inner, 3, rng)
        width = inner // 4 if mode == "ess2d" else inner
        self.ssm = GroupedSelectiveSSM(4, width, rng, d_state=d_state, dt_rank=dt_rank,
                                       d_skip=d_skip, discretization=discretization)
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, channels, rng)

    def forward(self, x):
        x = as_tensor(x)
        scan_in, gate = split(self.in_proj(x), 2, axis=-1)
        s = silu(self.dwconv(scan_in))
        s = ess2d(s, self.ssm) if self.mode == "ess2d" else ss2d_reference(s, self.ssm)
        s = self.out_norm(s)
        return self.out_proj(mul(s, silu(gate)))


class BasicSsmBlock(Module):
    """F' = S6(LN(F)) + s1*F;  out = CA(Conv(LN(F'))) + s2*F'."""

    def __init__(self, channels: int, rng: np.random.Generator, expand: float = 2, d_state: int = 16,
                 ca_reduction: int = 16, dt_rank: int | None = None, d_skip: bool = True,
                 discretization: str = "zoh"):
        self.ln1 = LayerNorm(channels)
        self.s6 = EfficientS6(channels, rng, expand=expand, d_state=d_state, dt_rank=dt_rank,
                              d_skip=d_skip, discretization=discretization)
        self.s1 = Param(np.ones(channels))
        self.ln2 = LayerNorm(channels)
        self.conv = Conv2d(channels, channels, 3, rng)
        self.ca = ChannelAttention(channels, ca_reduction, rng)
        self.s2 = Param(np.ones(channels))

    def forward(self, x):
        x = as_tensor(x)
        mid = self.s6(self.ln1(x)) + mul(x, self.s1)
        return self.ca(self.conv(self.ln2(mid))) + mul(mid, self.s2)


SUBSPACE_KINDS = {"spatial": "sai", "angular": "macpi", "epi_h": "epi_h", "epi_v": "epi_v"}


class SubspaceBlock(Module):
    """Reshape a [B, U, V, H, W, C] feature to one slice family, run the blocks, reshape back."""

    def __init__(self, blocks: Sequence[BasicSsmBlock]):
        self.blocks = list(blocks)

    def forward(self, feat, kind: str):
        if kind not in SUBSPACE_KINDS:
            raise ValueError(f"unknown subspace {kind!r}")
        view = geometry.make_view(SUBSPACE_KINDS[kind], as_tensor(feat))
        t = view.tensor
        for block in self.blocks:
            t = block(t)
        view.tensor = t
        return geometry.invert(view)


def subspace_block(feat, kind: str, blocks: Sequence[BasicSsmBlock]):
    return SubspaceBlock(blocks)(feat, kind)
