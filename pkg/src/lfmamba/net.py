"""The light-field super-resolution network and its analytic budgets.

Pipeline: initial feature extraction (per-view convs) -> spatial-angular
rounds -> EPI rounds with horizontal/vertical weight sharing -> multi-level
fusion -> pixel-shuffle reconstruction (+ bicubic skip), or the angular
synthesis head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import geometry
from .blocks import BasicSsmBlock, SubspaceBlock
from .nn import Conv2d, Module, load_tensors, pixel_shuffle, save_tensors
from .ssm import dt_rank_for
from .tensor import ShapeError, Tensor, as_tensor, concat, get_default_dtype, leaky_relu, no_grad

# per (position, channel, state) element: exp, ZOH input factor (3), recurrence (2), readout (2)
SCAN_FLOPS_PER_ELEMENT = 8


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 64
    angular: tuple = (5, 5)
    scale: int = 4
    n_rounds_safl: int = 3
    n_rounds_lsfl: int = 3
    n_basic: int = 2
    d_state: int = 16
    # frozen by calibrate(): smallest worst-case deviation from the reference budgets
    expand: float = 4
    ife_convs: int = 2
    ca_reduction: int = 16
    dt_rank: int | None = None
    d_skip: bool = True
    discretization: str = "zoh"
    bicubic_skip: bool = True
    # zero the last conv so an untrained model starts as plain bicubic upsampling
    zero_tail: bool = True
    fusion: str = "concat"
    variant: str = "sr"
    asr_channels: int = 32
    asr_target: int = 7
    seed: int = 0

    def __post_init__(self):
        inner = round(self.expand * self.channels)
        if inner % 4:
            raise ShapeError(f"expand*channels = {inner} must be divisible by 4")
        if self.fusion not in ("concat", "sum", "none"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.variant not in ("sr", "asr"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "sr" and self.scale < 1:
            raise ValueError("scale must be a positive integer")
        object.__setattr__(self, "angular", tuple(self.angular))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


def toy_config(**changes) -> NetworkConfig:
    """Desk-scale configuration used by gradient checks and overfitting runs."""
    base = NetworkConfig(channels=8, angular=(2, 2), scale=2, n_rounds_safl=1, n_rounds_lsfl=1,
                         n_basic=1, d_state=4, expand=2, ife_convs=2, ca_reduction=4)
    return base.with_(**changes)


class AsrHead(Module):
    """2x2 angular conv (no padding) -> 1x1 expansion -> angular shuffle -> 3x3 spatial conv."""

    def __init__(self, channels: int, inner: int, target: int, rng: np.random.Generator):
        self.target = target
        self.angular_conv = Conv2d(channels, channels, 2, rng, padding=0)
        self.expand = Conv2d(channels, target * target * inner, 1, rng)
        self.out_conv = Conv2d(inner, 1, 3, rng)

    def forward(self, feat):
        b, u, v, h, w, c = feat.shape
        if (u, v) != (2, 2):
            raise ShapeError(f"angular synthesis head expects a 2x2 grid, got {u}x{v}")
        macro = geometry.to_macpi(feat)
        sparse = self.angular_conv(macro)            # [B*H*W, 1, 1, C]
        dense = pixel_shuffle(self.expand(sparse), self.target)
        dense = geometry.from_macpi(dense, h, w, batched=True)
        out = self.out_conv(geometry.to_sai(dense))
        t = self.target
        return out.reshape(b, t, t, h, w)


class LfMamba(Module):
    def __init__(self, config: NetworkConfig | None = None, rng: np.random.Generator | None = None):
        self.config = cfg = config or NetworkConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        c = cfg.channels

        def blocks():
            return SubspaceBlock([
                BasicSsmBlock(c, rng, expand=cfg.expand, d_state=cfg.d_state, ca_reduction=cfg.ca_reduction,
                              dt_rank=cfg.dt_rank, d_skip=cfg.d_skip, discretization=cfg.discretization)
                for _ in range(cfg.n_basic)])

        self.ife = [Conv2d(1, c, 3, rng)] + [Conv2d(c, c, 3, rng) for _ in range(cfg.ife_convs - 1)]
        self.angular = []
        self.spatial = []
        for _ in range(cfg.n_rounds_safl):
            self.angular.append(blocks())
            self.spatial.append(blocks())
        # one block set per round, applied to both EPI orientations
        self.epi = [blocks() for _ in range(cfg.n_rounds_lsfl)]
        self.fuse = Conv2d(3 * c, c, 1, rng) if cfg.fusion == "concat" else None
        if cfg.variant == "sr":
            self.upsample = Conv2d(c, c * cfg.scale ** 2, 3, rng)
            self.out_conv = Conv2d(c, 1, 3, rng)
            if cfg.zero_tail:
                self.out_conv.weight.data[...] = 0.0
                self.out_conv.bias.data[...] = 0.0
            self.asr = None
        else:
            self.upsample = self.out_conv = None
            self.asr = AsrHead(c, cfg.asr_channels, cfg.asr_target, rng)
        dtype = get_default_dtype()
        for p in self.parameters():
            p.data = p.data.astype(dtype)

    # -- stages -------------------------------------------------------------
    def extract(self, lf):
        b, u, v, h, w = lf.shape
        x = lf.reshape(b * u * v, h, w, 1)
        for i, conv in enumerate(self.ife):
            if i:
                x = leaky_relu(x, 0.2)
            x = conv(x)
        return x.reshape(b, u, v, h, w, self.config.channels)

    def safl(self, f):
        x = f
        for ang, spa in zip(self.angular, self.spatial):
            x = spa(ang(x, "angular"), "spatial")
        return x + f

    def lsfl(self, f):
        x = f
        for epi in self.epi:
            x = epi(epi(x, "epi_v"), "epi_h")
        return x + f

    def fuse_features(self, f_init, f_sa, f_struct):
        mode = self.config.fusion
        if mode == "none":
            return f_struct
        if mode == "sum":
            return (f_init + f_sa) + f_struct
        b, u, v, h, w, c = f_init.shape
        cat = concat([f_init, f_sa, f_struct], axis=-1).reshape(b * u * v, h, w, 3 * c)
        return self.fuse(cat).reshape(b, u, v, h, w, c)

    def reconstruct(self, f_fuse, lf_lr):
        b, u, v, h, w, c = f_fuse.shape
        a = self.config.scale
        x = self.upsample(f_fuse.reshape(b * u * v, h, w, c))
        x = self.out_conv(pixel_shuffle(x, a))
        out = x.reshape(b, u, v, a * h, a * w)
        if self.config.bicubic_skip:
            out = out + geometry.bicubic_resize(np.asarray(lf_lr.data, dtype=float), a).astype(out.dtype)
        return out

    def features(self, lf):
        f_init = self.extract(lf)
        f_sa = self.safl(f_init)
        f_struct = self.lsfl(f_sa)
        return self.fuse_features(f_init, f_sa, f_struct)

    def forward(self, lf):
        """[(B,) U, V, h, w] -> [(B,) U, V, a*h, a*w] (or [(B,) 7, 7, h, w] for synthesis)."""
        lf = as_tensor(lf)
        batched = lf.ndim == 5
        if not batched:
            if lf.ndim != 4:
                raise ShapeError(f"expected a single-channel light field [U, V, H, W], got {lf.shape}")
            lf = lf.reshape(1, *lf.shape)
        if tuple(lf.shape[1:3]) != tuple(self.config.angular):
            raise ShapeError(f"model expects angular {self.config.angular}, got {lf.shape[1:3]}")
        f_fuse = self.features(lf)
        out = self.asr(f_fuse) if self.asr is not None else self.reconstruct(f_fuse, lf)
        return out if batched else out.reshape(*out.shape[1:])

    def predict(self, lf) -> np.ndarray:
        with no_grad():
            return self.forward(lf).data

    # -- persistence ----------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        save_tensors(path, self.state_dict())
        path.with_suffix(".json").write_text(self.config.to_json())

    @classmethod
    def load(cls, path) -> "LfMamba":
        path = Path(path)
        cfg_path = path.with_suffix(".json")
        cfg = NetworkConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else NetworkConfig()
        state = load_tensors(path)
        model = cls(cfg)
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------------------
# analytic budgets


def count_params(model: Module) -> int:
    """Parameter storage actually held by a model (shared blocks counted once)."""
    return model.num_parameters()


def _linear(cin, cout):
    return cin * cout + cout


def _conv(k, cin, cout):
    return k * k * cin * cout + cout


def scan_param_count(groups: int, width: int, d_state: int, dt_rank: int, d_skip: bool = True) -> int:
    per_group = width * (dt_rank + 2 * d_state) + dt_rank * width + width + width * d_state
    return groups * (per_group + (width if d_skip else 0))


def _s6_params(cfg: NetworkConfig, mode: str = "ess2d") -> int:
    inner = round(cfg.expand * cfg.channels)
    width = inner // 4 if mode == "ess2d" else inner
    rank = cfg.dt_rank or dt_rank_for(width)
    return (_linear(cfg.channels, 2 * inner) + 9 * inner + inner
            + scan_param_count(4, width, cfg.d_state, rank, cfg.d_skip)
            + 2 * inner + _linear(inner, cfg.channels))


def basic_block_params(cfg: NetworkConfig) -> int:
    c = cfg.channels
    hidden = c // cfg.ca_reduction
    return (4 * c + _s6_params(cfg) + _conv(3, c, c)
            + _linear(c, hidden) + _linear(hidden, c) + 2 * c)


def analytic_param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count for a configuration (no model is built)."""
    c = cfg.channels
    n = _conv(3, 1, c) + (cfg.ife_convs - 1) * _conv(3, c, c)
    n += (2 * cfg.n_rounds_safl + cfg.n_rounds_lsfl) * cfg.n_basic * basic_block_params(cfg)
    if cfg.fusion == "concat":
        n += _conv(1, 3 * c, c)
    if cfg.variant == "sr":
        n += _conv(3, c, c * cfg.scale ** 2) + _conv(3, c, 1)
    else:
        t = cfg.asr_target
        n += _conv(2, c, c) + _conv(1, c, t * t * cfg.asr_channels) + _conv(3, cfg.asr_channels, 1)
    return n


def count_flops(cfg: NetworkConfig, extents: tuple) -> dict:
    """Analytic multiply-accumulates and FLOPs for one forward pass.

    Counts convolutions, linear maps and scan recurrences (normalization,
    activations and the pooled attention gate are negligible); FLOPs are
    reported with a multiply-accumulate counted both as 2 and as 1.
    """
    u, v, h, w = extents
    c = cfg.channels
    inner = round(cfg.expand * c)
    width = inner // 4
    rank = cfg.dt_rank or dt_rank_for(width)
    n_state = cfg.d_state
    pixels = u * v * h * w

    macs = 9 * c * pixels + (cfg.ife_convs - 1) * 9 * c * c * pixels
    block_macs = (c * 2 * inner                      # in_proj
                  + 9 * inner                        # depthwise conv
                  + inner * (rank + 2 * n_state)     # x_proj
                  + rank * inner                     # dt_proj
                  + inner * c                        # out_proj
                  + 9 * c * c) * pixels              # 3x3 conv
    scan_elems = pixels * inner * n_state
    n_blocks = (2 * cfg.n_rounds_safl + 2 * cfg.n_rounds_lsfl) * cfg.n_basic
    macs += n_blocks * block_macs
    if cfg.fusion == "concat":
        macs += 3 * c * c * pixels
    if cfg.variant == "sr":
        a = cfg.scale
        macs += 9 * c * c * a * a * pixels + 9 * c * pixels * a * a
    else:
        t = cfg.asr_target
        macs += 4 * c * c * h * w + c * t * t * cfg.asr_channels * h * w + 9 * cfg.asr_channels * t * t * h * w
    scan_flops = n_blocks * scan_elems * SCAN_FLOPS_PER_ELEMENT
    return {
        "macs": int(macs),
        "scan_flops": int(scan_flops),
        "flops_mac2": int(2 * macs + scan_flops),
        "flops_mac1": int(macs + scan_flops),
    }


# reference parameter budgets keyed by (variant, scale, n_basic)
BUDGET_TARGETS = {
    ("sr", 4, 2): 2.30e6,
    ("sr", 2, 2): 2.15e6,
    ("sr", 4, 1): 1.47e6,
    ("sr", 4, 3): 3.13e6,
}


def budget_errors(cfg: NetworkConfig) -> dict:
    """Relative deviation of each budgeted variant of ``cfg`` from its target."""
    out = {}
    for (variant, scale, n_basic), target in BUDGET_TARGETS.items():
        n = analytic_param_count(cfg.with_(variant=variant, scale=scale, n_basic=n_basic))
        out[(variant, scale, n_basic)] = (n - target) / target
    return out


def calibrate(expands=(1, 2, 3, 4), ife_depths=(2, 3), base: NetworkConfig | None = None):
    """Pick (expand, ife_convs) minimizing the worst relative budget error."""
    base = base or NetworkConfig()
    best = None
    for e in expands:
        for d in ife_depths:
            cfg = base.with_(expand=e, ife_convs=d)
            worst = max(abs(x) for x in budget_errors(cfg).values())
            if best is None or worst < best[0]:
                best = (worst, e, d)
    return {"worst_error": best[0], "expand": best[1], "ife_convs": best[2]}
