"""Runtime invariant suites behind ``lfmamba verify``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry
from .blocks import BasicSsmBlock, EfficientS6, ScanLayout, DIRECTIONS, ess2d, flatten_2d, ss2d_reference, unflatten_2d
from .net import LfMamba, scan_param_count, toy_config
from .nn import Conv2d, LayerNorm, Linear, ChannelAttention, DepthwiseConv2d, Param
from .ssm import (DiscreteSsm, GroupedSelectiveSSM, conv_form, discretize_zoh, discretized_lanes,
                  parallel_scan, recurrence, selective_scan)
from .tensor import mul, precision, sum_
from .train import grad_check


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def _run(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing property is a failing property
        return Check(name, False, f"{type(exc).__name__}: {exc}")
    return Check(name, bool(ok), detail)


def _random_ti(rng: np.random.Generator, lanes: int, n: int) -> DiscreteSsm:
    a = -rng.uniform(0.1, 2.0, (lanes, n))
    b = rng.normal(size=(lanes, n))
    a_bar, b_bar = discretize_zoh(a, b, rng.uniform(0.01, 0.5, (lanes, 1)))
    return DiscreteSsm(a_bar, b_bar, rng.normal(size=(lanes, n)), rng.normal(size=lanes))


# ---------------------------------------------------------------------------
# suites


def ssm_suite(seed: int = 0, instances: int = 100) -> list[Check]:
    rng = np.random.default_rng(seed)

    def zoh_golden():
        a_bar, b_bar = discretize_zoh(-1.0, 1.0, 0.5)
        err = max(abs(a_bar - math.exp(-0.5)), abs(b_bar - (1 - math.exp(-0.5))))
        return err < 1e-9, f"err {err:.2e}"

    def zoh_small_step():
        a, delta = -0.7, 1e-10
        _, b_bar = discretize_zoh(a, 1.0, delta)
        z = a * delta
        ref = delta * (1 + z / 2 + z * z / 6)
        rel = abs(b_bar - ref) / ref
        return rel < 1e-12, f"rel err {rel:.2e}"

    def three_paths():
        worst = 0.0
        for i in range(instances):
            length = (1, 2, 3, 17, 256)[i % 5]
            dssm = _random_ti(rng, 3, 4)
            x = rng.normal(size=(length, 3))
            ref = recurrence(dssm, x)
            worst = max(worst, np.abs(conv_form(dssm, x) - ref).max(), np.abs(parallel_scan(dssm, x) - ref).max())
        return worst < 1e-10, f"max abs diff {worst:.2e} over {instances} instances"

    def selective_paths():
        with precision(np.float64):
            layer = GroupedSelectiveSSM(2, 3, rng, d_state=4)
            x = rng.normal(size=(2, 37, 2, 3))
            fused_par = selective_scan(layer, x, "parallel").data
            fused_seq = selective_scan(layer, x, "sequential").data
        lanes = discretized_lanes(layer, x)
        ref = np.moveaxis(recurrence(lanes, np.moveaxis(x, 1, 0)), 0, 1)
        worst = max(np.abs(fused_par - ref).max(), np.abs(fused_seq - ref).max())
        return worst < 1e-10, f"max abs diff {worst:.2e}"

    return [_run("zoh golden values", zoh_golden),
            _run("zoh small-step series", zoh_small_step),
            _run("recurrence = conv form = parallel scan", three_paths),
            _run("selective scan parallel = sequential = recurrence", selective_paths)]


def geometry_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    pairs = {"sai": (geometry.to_sai, lambda t, s: geometry.from_sai(t, s[0], s[1])),
             "macpi": (geometry.to_macpi, lambda t, s: geometry.from_macpi(t, s[2], s[3])),
             "epi_h": (geometry.to_epi_h, lambda t, s: geometry.from_epi_h(t, s[1], s[3])),
             "epi_v": (geometry.to_epi_v, lambda t, s: geometry.from_epi_v(t, s[0], s[2]))}
    extents = [(u, v, h, w) for u in (1, 2, 3) for v in (1, 3) for h in (1, 2, 5) for w in (2, 5)]
    checks = []
    for kind, (fwd, inv) in pairs.items():
        def round_trip(fwd=fwd, inv=inv):
            for s in extents:
                lf = rng.normal(size=s + (2,))
                if not np.array_equal(inv(fwd(lf), s), lf):
                    return False, f"mismatch at extents {s}"
            return True, f"{len(extents)} extents"
        checks.append(_run(f"{kind} round trip", round_trip))

    def macpi_image():
        for s in extents:
            lf = rng.normal(size=s)
            if not np.array_equal(geometry.from_macpi_image(geometry.macpi_image(lf), s[0], s[1]), lf):
                return False, f"mismatch at extents {s}"
        return True, f"{len(extents)} extents"

    def rot_cycle():
        lf = rng.normal(size=(3, 3, 4, 4))
        out = lf
        for _ in range(4):
            out = geometry.augment(out, "rot90")
        return np.array_equal(out, lf), ""

    def ensemble_bicubic():
        lf = rng.uniform(size=(3, 3, 6, 6))

        def model(x):
            return geometry.bicubic_resize(x, 2)

        return np.array_equal(geometry.geometry_ensemble(model, lf), model(lf)), ""

    checks += [_run("macpi image round trip", macpi_image),
               _run("rot90 has order four", rot_cycle),
               _run("ensemble of bicubic equals bicubic", ensemble_bicubic)]
    return checks


def blocks_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)

    def layouts():
        x = rng.normal(size=(2, 3, 5, 4))
        for d in DIRECTIONS:
            lay = ScanLayout(d, 3, 5)
            if not np.array_equal(unflatten_2d(flatten_2d(x, lay), lay).data, x):
                return False, d
        return True, ""

    def ess2d_identity():
        x = rng.normal(size=(2, 4, 6, 8))
        return np.array_equal(ess2d(x, lambda s: s).data, x), ""

    def ss2d_identity():
        x = rng.normal(size=(2, 4, 6, 8))
        return np.array_equal(ss2d_reference(x, lambda s: s).data, 4 * x), ""

    def ratio():
        for c, n, r in ((64, 16, 4), (32, 8, 2), (256, 16, 16)):
            q = scan_param_count(4, c // 4, n, r) / scan_param_count(4, c, n, r)
            if q != 0.25:
                return False, f"C={c} N={n} r={r}: ratio {q}"
            e = EfficientS6(c // 4, rng, expand=4, d_state=n, dt_rank=r)
            s = EfficientS6(c // 4, rng, expand=4, d_state=n, dt_rank=r, mode="ss2d")
            if e.ssm.scan_parameter_count() * 4 != s.ssm.scan_parameter_count():
                return False, "instantiated counts disagree"
        return True, "ratio 0.25"

    def block_shape():
        block = BasicSsmBlock(8, rng, d_state=4, ca_reduction=4)
        x = rng.normal(size=(2, 3, 4, 8))
        return block(x).shape == x.shape, ""

    return [_run("scan layouts invert", layouts),
            _run("ess2d with identity scan is the identity", ess2d_identity),
            _run("ss2d with identity scan sums four copies", ss2d_identity),
            _run("ess2d/ss2d scan parameter ratio", ratio),
            _run("basic block preserves shape", block_shape)]


def grads_suite(seed: int = 0, coords: int | None = 6) -> list[Check]:
    """Finite-difference checks; ``coords`` samples per tensor (None = every scalar)."""
    rng = np.random.default_rng(seed)
    checks = []

    def check(name, module, x_shape):
        def fn():
            with precision(np.float64):
                m = module()
                x = rng.normal(size=x_shape)
                out_shape = m(x).shape
                w = rng.normal(size=out_shape)
                report = grad_check(lambda: sum_(mul(m(x), w)), m, max_per_param=coords, rng=rng)
            return report.passed, report.message
        checks.append(_run(f"grad {name}", fn))

    check("linear", lambda: Linear(5, 3, rng), (4, 5))
    check("conv2d", lambda: Conv2d(3, 4, 3, rng), (2, 5, 5, 3))
    check("depthwise conv", lambda: DepthwiseConv2d(3, 3, rng), (2, 5, 5, 3))
    check("layer norm", lambda: _perturbed(LayerNorm(6), rng), (3, 6))
    check("channel attention", lambda: ChannelAttention(8, 4, rng), (2, 3, 3, 8))
    check("selective scan", lambda: GroupedSelectiveSSM(4, 2, rng, d_state=3), (2, 6, 4, 2))
    check("efficient s6", lambda: EfficientS6(4, rng, d_state=3), (1, 3, 4, 4))
    check("basic ssm block", lambda: _perturbed(BasicSsmBlock(4, rng, d_state=3, ca_reduction=2), rng), (1, 3, 4, 4))
    check("toy network", lambda: LfMamba(toy_config(zero_tail=False), rng), (2, 2, 4, 4))
    return checks


def _perturbed(module, rng):
    """Move unit/zero initialised scales off their special values."""
    for p in module.parameters():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    return module


SUITES = {"ssm": ssm_suite, "geometry": geometry_suite, "blocks": blocks_suite, "grads": grads_suite}


def run_suites(name: str = "all") -> list[Check]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name]()
