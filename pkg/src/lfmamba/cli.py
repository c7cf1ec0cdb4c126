"""Command-line entry point: ``lfmamba {verify,bench,train,sr,asr,slice,metrics}``.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import geometry, io
from .net import (BUDGET_TARGETS, LfMamba, NetworkConfig, analytic_param_count, count_flops, count_params,
                  scan_param_count)
from .nn import CheckpointError, load_tensors
from .ssm import dt_rank_for
from .tensor import DomainError, ShapeError, precision
from .train import TrainConfig, TrainingError, evaluate, synthetic_pairs, train, view_metrics, aggregate

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _dtype(args):
    return np.float64 if getattr(args, "precision", "32") == "64" else np.float32


def _emit(pairs: dict, fmt: str) -> None:
    if fmt == "kv":
        print(" ".join(f"{k}={_fmt(v)}" for k, v in pairs.items()))
    else:
        width = max(len(k) for k in pairs)
        for k, v in pairs.items():
            print(f"{k:<{width}}  {_fmt(v)}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if v == float("inf") else f"{v:.6g}"
    return str(v)


def _load_config(path) -> NetworkConfig:
    if path is None:
        return NetworkConfig()
    try:
        return NetworkConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


def _load_model(path) -> LfMamba:
    try:
        return LfMamba.load(path)
    except (OSError, CheckpointError, KeyError, ShapeError, ValueError, TypeError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from exc


def _read_lf(path) -> np.ndarray:
    try:
        return io.load_lf(path)
    except (OSError, io.LfFormatError) as exc:
        raise InputError(str(exc)) from exc


def _luma(lf: np.ndarray) -> np.ndarray:
    """[U, V, H, W, C] -> [U, V, H, W] luma (identity for grayscale)."""
    if lf.shape[-1] == 3:
        return geometry.rgb_to_ycbcr(lf)[..., 0]
    return lf[..., 0]


def _extents(text: str) -> tuple[int, int, int, int]:
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"extents must be four integers U,V,H,W, got {text!r}")
    if len(vals) != 4 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"extents must be four positive integers U,V,H,W, got {text!r}")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    from .verify import run_suites

    if args.checkpoint is not None:
        try:
            state = load_tensors(args.checkpoint)
        except (OSError, CheckpointError) as exc:
            raise InputError(f"checkpoint {args.checkpoint}: {exc}") from exc
        print(f"PASS checkpoint readable: {len(state)} tensors")
    checks = run_suites(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} properties passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    if args.scale is not None:
        cfg = cfg.with_(scale=args.scale)
    if args.blocks is not None:
        cfg = cfg.with_(n_basic=args.blocks)
    u, v, h, w = args.input_extents
    if (u, v) != tuple(cfg.angular):
        raise InputError(f"input angular extents {u}x{v} do not match config {cfg.angular}")
    flops = count_flops(cfg, (u, v, h, w))
    inner = round(cfg.expand * cfg.channels)
    rank = cfg.dt_rank or dt_rank_for(inner // 4)
    ratio = (scan_param_count(4, inner // 4, cfg.d_state, rank, cfg.d_skip)
             / scan_param_count(4, inner, cfg.d_state, rank, cfg.d_skip))
    row = {"params": analytic_param_count(cfg)}
    key = (cfg.variant, cfg.scale, cfg.n_basic)
    if key in BUDGET_TARGETS and cfg == NetworkConfig().with_(scale=cfg.scale, n_basic=cfg.n_basic, seed=cfg.seed):
        target = BUDGET_TARGETS[key]
        row["params_reference"] = target
        row["params_rel_error"] = row["params"] / target - 1.0
    row["macs"] = flops["macs"]
    row["flops_mac1"] = flops["flops_mac1"]
    row["flops_mac2"] = flops["flops_mac2"]
    row["scan_param_ratio_ess2d_ss2d"] = ratio
    if args.time:
        with precision(_dtype(args)):
            model = LfMamba(cfg)
            row["params_instantiated"] = count_params(model)
            lf = np.random.default_rng(cfg.seed).uniform(size=(u, v, h, w))
            start = time.perf_counter()
            for _ in range(args.repeat):
                model.predict(lf)
            row["forward_seconds"] = (time.perf_counter() - start) / args.repeat
    _emit(row, args.format)
    return EXIT_OK


def _patches_from(paths, scale: int, size: int) -> list:
    pairs = []
    for p in paths:
        hr = _luma(_read_lf(p))
        for patch in geometry.extract_patches(hr, size * scale, size * scale):
            pairs.append((geometry.bicubic_resize(patch, 1.0 / scale), patch))
    return pairs


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.scale is not None:
        cfg = cfg.with_(scale=args.scale)
    rng = np.random.default_rng(args.seed)
    u, v = cfg.angular
    if args.data:
        data = _patches_from(args.data, cfg.scale, args.patch)
        if not data:
            raise InputError("no training patches could be cut from the given light fields")
        val = data[:max(1, len(data) // 10)]
    else:
        data = synthetic_pairs(args.patches, rng, (u, v), (args.patch, args.patch), cfg.scale)
        val = synthetic_pairs(args.val_patches, rng, (u, v), (args.patch, args.patch), cfg.scale)
    tcfg = TrainConfig(lr0=args.lr, total_epochs=args.epochs, halve_every=args.halve_every, seed=args.seed,
                       augment=not args.no_augment)
    out = Path(args.out)
    with precision(_dtype(args)):
        model = LfMamba(cfg.with_(seed=args.seed))
        try:
            result = train(model, data, tcfg, val=val, out_dir=out, log=print if args.verbose else None)
        except TrainingError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
        model.save(out / "final.lfm")
    bic = evaluate([geometry.bicubic_resize(lo, cfg.scale) for lo, _ in val], [hi for _, hi in val]).psnr
    print(f"trained {len(result.losses)} steps; final loss {result.losses[-1]:.6f}")
    if result.val_psnr:
        print(f"validation psnr {result.val_psnr[-1]:.4f} dB (bicubic {bic:.4f} dB)")
    print(f"checkpoint {out / 'final.lfm'}")
    return EXIT_OK


def _run_model(model: LfMamba, y: np.ndarray, ensemble: bool) -> np.ndarray:
    dtype = next(iter(model.parameters())).dtype
    y = np.asarray(y, dtype=dtype)
    if ensemble:
        return geometry.geometry_ensemble(model.predict, y)
    return model.predict(y)


def cmd_sr(args) -> int:
    model = _load_model(args.model)
    cfg = model.config
    if cfg.variant != "sr":
        raise InputError("checkpoint is an angular synthesis model; use the asr command")
    if args.scale != cfg.scale:
        raise InputError(f"model was built for x{cfg.scale}, requested x{args.scale}")
    lf = _read_lf(args.input)
    if tuple(lf.shape[:2]) != tuple(cfg.angular):
        raise InputError(f"input has {lf.shape[0]}x{lf.shape[1]} views, model expects {cfg.angular[0]}x{cfg.angular[1]}")
    if args.ensemble and lf.shape[0] != lf.shape[1]:
        raise InputError("the geometry ensemble needs a square angular grid")
    if lf.shape[-1] == 3:
        ycc = geometry.rgb_to_ycbcr(lf)
        y_sr = _run_model(model, ycc[..., 0], args.ensemble)
        chroma = np.moveaxis(geometry.bicubic_resize(np.moveaxis(ycc[..., 1:], -1, 0), cfg.scale), 0, -1)
        out = geometry.ycbcr_to_rgb(np.concatenate([y_sr[..., None], chroma], axis=-1))
    else:
        y_sr = _run_model(model, lf[..., 0], args.ensemble)
        out = np.clip(y_sr, 0.0, 1.0)[..., None]
    if args.out:
        io.save_lf(args.out, out, bit_depth=8)
        print(f"wrote {out.shape[0]}x{out.shape[1]} views of {out.shape[2]}x{out.shape[3]} to {args.out}")
    if args.gt:
        gt = _read_lf(args.gt)
        if gt.shape[:4] != out.shape[:4]:
            raise InputError(f"ground truth extents {gt.shape[:4]} differ from output {out.shape[:4]}")
        _report(aggregate([view_metrics(np.clip(y_sr, 0, 1), _luma(gt))]), args.format, per_view=True)
    return EXIT_OK


def cmd_asr(args) -> int:
    model = _load_model(args.model)
    if model.config.variant != "asr":
        raise InputError("checkpoint is a spatial SR model; use the sr command")
    lf = _read_lf(args.input)
    if lf.shape[:2] != (2, 2):
        raise InputError(f"angular synthesis needs a 2x2 input, got {lf.shape[0]}x{lf.shape[1]}")
    y = _luma(lf)
    dense = model.predict(np.asarray(y, dtype=next(iter(model.parameters())).dtype))
    io.save_lf(args.out, np.clip(dense, 0.0, 1.0)[..., None])
    print(f"wrote {dense.shape[0]}x{dense.shape[1]} views to {args.out}")
    return EXIT_OK


_SLICERS = {
    "sai": geometry.to_sai,
    "macpi": None,
    "epih": geometry.to_epi_h,
    "epiv": geometry.to_epi_v,
}


def cmd_slice(args) -> int:
    lf = _read_lf(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c = lf.shape[-1]
    if args.view == "macpi":
        slices = [np.stack([geometry.macpi_image(lf[..., k]) for k in range(c)], axis=-1)]
    else:
        slices = list(_SLICERS[args.view](lf))
    for k, img in enumerate(slices):
        _save_image(out / f"{args.view}_{k:05d}.png", img, c)
    print(f"{len(slices)} {args.view} slices of {slices[0].shape[0]}x{slices[0].shape[1]} written to {out}")
    return EXIT_OK


def _save_image(path: Path, img: np.ndarray, channels: int) -> None:
    from PIL import Image

    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(q[..., 0] if channels == 1 else q).save(path)


def _report(report, fmt: str, per_view: bool = False) -> None:
    if fmt == "kv":
        _emit({"psnr": report.psnr, "ssim": report.ssim, "scenes": len(report.per_scene)}, "kv")
        return
    if per_view:
        for table in report.per_view:
            for (u, v), (p, s) in zip(np.ndindex(table.shape[:2]), table.reshape(-1, 2)):
                print(f"view {u} {v} psnr={_fmt(float(p))} ssim={s:.6f}")
    for i, (p, s) in enumerate(report.per_scene):
        print(f"scene {i} psnr={_fmt(float(p))} ssim={s:.6f}")
    print(f"mean psnr={_fmt(report.psnr)} ssim={report.ssim:.6f}")


def cmd_metrics(args) -> int:
    a, b = _read_lf(args.a), _read_lf(args.b)
    if a.shape[:4] != b.shape[:4]:
        raise InputError(f"light fields differ in extents: {a.shape[:4]} vs {b.shape[:4]}")
    _report(aggregate([view_metrics(_luma(a), _luma(b))]), args.format, per_view=args.per_view)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfmamba", description="Light-field super-resolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run invariant suites")
    p.add_argument("--suite", choices=["ssm", "geometry", "blocks", "grads", "all"], default="all")
    p.add_argument("--checkpoint", help="also check that a checkpoint file parses")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="parameter/FLOP budgets and forward timing")
    p.add_argument("--config", help="network config JSON (default: the x4 model)")
    p.add_argument("--input-extents", type=_extents, default=(5, 5, 32, 32), metavar="U,V,H,W")
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--blocks", type=int, help="basic SSM blocks per subspace block")
    p.add_argument("--time", action=argparse.BooleanOptionalAction, default=True, help="time a forward pass")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--precision", choices=["32", "64"], default="32")
    p.add_argument("--format", choices=["text", "kv"], default="text")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train on synthetic patches or light-field containers")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--data", nargs="*", help="HR light-field containers to cut patches from")
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--patch", type=int, default=16, help="LR patch size")
    p.add_argument("--patches", type=int, default=20)
    p.add_argument("--val-patches", type=int, default=4)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--halve-every", type=int, default=15)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--precision", choices=["32", "64"], default="32")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="spatially super-resolve a light field")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=int, choices=[2, 4], required=True)
    p.add_argument("--ensemble", action="store_true", help="average over the 8 dihedral transforms")
    p.add_argument("--out")
    p.add_argument("--gt", help="ground-truth HR light field for PSNR/SSIM")
    p.add_argument("--format", choices=["text", "kv"], default="text")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("asr", help="synthesize a 7x7 grid from 2x2 views")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_asr)

    p = sub.add_parser("slice", help="write SAI, MacPI or EPI slices as images")
    p.add_argument("--input", required=True)
    p.add_argument("--view", choices=list(_SLICERS), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two light fields")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--per-view", action="store_true")
    p.add_argument("--format", choices=["text", "kv"], default="text")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, DomainError, ShapeError, io.LfFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
