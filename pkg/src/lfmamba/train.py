"""Metrics, gradient checking, synthetic data and the desk-scale training loops."""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import geometry
from .nn import Adam, Module, Param, l1_loss
from .tensor import DomainError, ShapeError, StateError, Tensor, no_grad

# ---------------------------------------------------------------------------
# metrics


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM of two grayscale images, averaged over valid windows."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim expects two equal 2D images, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise DomainError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_scene: list = field(default_factory=list)   # [(psnr, ssim)] per scene
    per_view: list = field(default_factory=list)    # [U, V, 2] arrays per scene

    def lines(self) -> list[str]:
        out = [f"scene {i} psnr={p:.4f} ssim={s:.6f}" for i, (p, s) in enumerate(self.per_scene)]
        out.append(f"mean psnr={self.psnr:.4f} ssim={self.ssim:.6f}")
        return out


def view_metrics(pred, gt, peak: float = 1.0) -> np.ndarray:
    """[U, V, H, W] pair -> [U, V, 2] table of (psnr, ssim) per view."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ShapeError(f"expected two [U, V, H, W] light fields, got {pred.shape} and {gt.shape}")
    u, v = pred.shape[:2]
    table = np.empty((u, v, 2))
    for i in range(u):
        for j in range(v):
            table[i, j] = psnr(pred[i, j], gt[i, j], peak), ssim(pred[i, j], gt[i, j], peak)
    return table


def aggregate(per_view: Sequence[np.ndarray]) -> MetricReport:
    """Average each scene over its views first, then average the scene scores."""
    if not per_view:
        raise ValueError("no scenes to aggregate")
    scenes = [tuple(np.asarray(t, dtype=float).reshape(-1, 2).mean(axis=0)) for t in per_view]
    p = float(np.mean([s[0] for s in scenes]))
    s = float(np.mean([s[1] for s in scenes]))
    return MetricReport(psnr=p, ssim=s, per_scene=scenes, per_view=list(per_view))


def evaluate(preds: Iterable, gts: Iterable, peak: float = 1.0) -> MetricReport:
    return aggregate([view_metrics(p, g, peak) for p, g in zip(preds, gts)])


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    halve_every: int = 15
    total_epochs: int = 60
    batch: int = 2
    loss: str = "l1"
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 1
    prefetch: int = 2

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * 0.5 ** (epoch // self.halve_every)


def lr_at_epoch(epoch: int, cfg: TrainConfig | None = None) -> float:
    return (cfg or TrainConfig()).lr_at(epoch)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int
    message: str = ""


def _named(params) -> list[tuple[str, Param]]:
    if isinstance(params, Module):
        return [(n, p) for n, p in params.named_parameters() if p.learnable]
    if isinstance(params, dict):
        return list(params.items())
    return [(getattr(p, "name", "") or f"param{i}", p) for i, p in enumerate(params)]


def grad_check(loss_fn: Callable[[], Tensor], params, tolerance: float = 1e-4, step: float = 1e-5,
               atol: float = 1e-12, max_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the taped gradient of ``loss_fn()`` with central differences.

    Errors are normwise per parameter tensor: |g_i - n_i| divided by the
    largest gradient magnitude in that tensor (floored at ``atol``). A
    pointwise ratio would mostly measure the O(eps/step) rounding noise
    on coordinates whose true gradient is nearly zero. ``max_per_param``
    samples coordinates instead of sweeping every scalar.
    """
    named = _named(params)
    for name, p in named:
        if p.data.dtype != np.float64:
            raise StateError(f"grad_check needs 64-bit parameters; {name} is {p.data.dtype}")
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        return GradCheckReport(False, math.inf, "<loss>", (), 0, "loss is not finite")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in named}
    worst = (0.0, "", ())
    checked = 0
    with no_grad():
        for name, p in named:
            grad = analytic[name]
            if not np.isfinite(grad).all():
                bad = tuple(int(i) for i in np.argwhere(~np.isfinite(grad))[0])
                return GradCheckReport(False, math.inf, name, bad, checked,
                                       f"non-finite analytic gradient at {name}{list(bad)}")
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)   # a view, so writes perturb the parameter
            coords = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(loss_fn().data)
                flat[i] = orig - step
                f_minus = float(loss_fn().data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    idx = tuple(int(k) for k in np.unravel_index(i, p.shape))
                    return GradCheckReport(False, math.inf, name, idx, checked,
                                           f"non-finite loss when perturbing {name}{list(idx)}")
                numeric[j] = (f_plus - f_minus) / (2.0 * step)
            checked += len(coords)
            if not len(coords):
                continue
            g = grad.reshape(-1)[coords]
            scale = max(float(np.abs(grad).max()), float(np.abs(numeric).max()), atol)
            errs = np.abs(g - numeric) / scale
            j = int(np.argmax(errs))
            if errs[j] > worst[0]:
                worst = (float(errs[j]), name, tuple(int(k) for k in np.unravel_index(coords[j], p.shape)))
    passed = worst[0] < tolerance
    msg = f"max rel error {worst[0]:.3e} at {worst[1]}{list(worst[2])} over {checked} coordinates"
    return GradCheckReport(passed, worst[0], worst[1], worst[2], checked, msg)


# ---------------------------------------------------------------------------
# synthetic light fields


def synthetic_lf(rng: np.random.Generator, angular=(5, 5), spatial=(32, 32), disparity: float | None = None,
                 n_waves: int = 6, max_freq: float = 0.22) -> np.ndarray:
    """Band-limited texture seen through a U x V camera grid at constant disparity.

    View (u, v) samples the texture at (h + d(u - uc), w + d(v - vc)), so
    each EPI holds straight lines of slope d. ``max_freq`` is in cycles per
    pixel. Values are in [0.05, 0.95].
    """
    u_n, v_n = angular
    h_n, w_n = spatial
    d = rng.uniform(-1.0, 1.0) if disparity is None else disparity
    radius = rng.uniform(0.02, max_freq, n_waves)
    theta = rng.uniform(0.0, 2 * np.pi, n_waves)
    fy, fx = radius * np.sin(theta), radius * np.cos(theta)
    phase = rng.uniform(0.0, 2 * np.pi, n_waves)
    amp = rng.uniform(0.5, 1.0, n_waves)
    uu = np.arange(u_n) - (u_n - 1) / 2.0
    vv = np.arange(v_n) - (v_n - 1) / 2.0
    y = np.arange(h_n)[None, None, :, None] + d * uu[:, None, None, None]
    x = np.arange(w_n)[None, None, None, :] + d * vv[None, :, None, None]
    tex = sum(a * np.cos(2 * np.pi * (fy_ * y + fx_ * x) + p)
              for a, fy_, fx_, p in zip(amp, fy, fx, phase))
    tex = tex / amp.sum()
    return 0.5 + 0.45 * tex


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Antialiased bicubic downscale of every view."""
    return geometry.bicubic_resize(hr, 1.0 / scale)


def synthetic_pairs(n: int, rng: np.random.Generator, angular=(5, 5), lr_spatial=(16, 16),
                    scale: int = 2, **kwargs) -> list[tuple[np.ndarray, np.ndarray]]:
    hr_spatial = (lr_spatial[0] * scale, lr_spatial[1] * scale)
    out = []
    for _ in range(n):
        hr = synthetic_lf(rng, angular, hr_spatial, **kwargs)
        out.append((degrade(hr, scale), hr))
    return out


def bicubic_baseline(lr: np.ndarray, scale: int) -> np.ndarray:
    return geometry.bicubic_resize(lr, scale)


# ---------------------------------------------------------------------------
# training


class TrainingError(RuntimeError):
    """Divergence or non-finite loss; ``checkpoint`` names the last good state if saved."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _as_model_input(x: np.ndarray, model: Module) -> np.ndarray:
    dtype = next(iter(model.parameters())).dtype
    return np.asarray(x, dtype=dtype)


def overfit_single_patch(model, lr_patch, hr_patch, steps: int = 2000, lr: float = 1e-3,
                         lr_final: float | None = None, stop_below: float | None = None) -> np.ndarray:
    """Fit one (LR, HR) example with Adam and return the L1 curve.

    Entry k is the loss after k updates, so ``steps=0`` returns the initial
    loss only. The step size decays along a cosine from ``lr`` to
    ``lr_final`` (defaults to lr/100). With ``stop_below`` the run ends as
    soon as the loss drops below that value.
    """
    x = _as_model_input(lr_patch, model)
    y = _as_model_input(hr_patch, model)
    opt = Adam(model.parameters(), lr=lr)
    lr_final = lr / 100.0 if lr_final is None else lr_final
    curve = []
    for k in range(steps + 1):
        opt.zero_grad()
        loss = l1_loss(model(x), y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {k}")
        if curve and value > 10.0 * curve[0]:
            raise TrainingError(f"diverged at step {k}: loss {value:.4g} > 10x initial {curve[0]:.4g}")
        curve.append(value)
        if k == steps or (stop_below is not None and value < stop_below):
            break
        loss.backward()
        opt.lr = lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * k / max(steps, 1)))
        opt.step()
    return np.array(curve)


def moving_average(curve, window: int = 200) -> np.ndarray:
    curve = np.asarray(curve, dtype=float)
    if curve.size < window:
        return curve[:0]
    c = np.concatenate([[0.0], np.cumsum(curve)])
    return (c[window:] - c[:-window]) / window


@dataclass
class TrainResult:
    losses: list
    val_psnr: list
    checkpoints: list
    log_lines: list


def _batches(dataset, cfg: TrainConfig, rng: np.random.Generator, epochs: range):
    """Yield (epoch, step, lr_batch, hr_batch) in a seeded order."""
    angular_square = dataset[0][0].shape[0] == dataset[0][0].shape[1]
    ops = [op for op in geometry.AUGMENT_OPS if op != "rot90" or angular_square]
    step = 0
    for epoch in epochs:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch):
            lrs, hrs = [], []
            for i in order[start:start + cfg.batch]:
                lo, hi = dataset[i]
                if cfg.augment:
                    for op in ops:
                        if rng.random() < 0.5:
                            lo, hi = geometry.augment(lo, op), geometry.augment(hi, op)
                lrs.append(lo)
                hrs.append(hi)
            yield epoch, step, np.stack(lrs), np.stack(hrs)
            step += 1


def _prefetch(gen, depth: int):
    """Run ``gen`` on a producer thread behind a bounded queue."""
    if depth <= 0:
        yield from gen
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in gen:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def validation_psnr(model, pairs) -> float:
    preds = [model.predict(_as_model_input(lo, model)) for lo, _ in pairs]
    return evaluate(preds, [hi for _, hi in pairs]).psnr


def train(model, dataset, cfg: TrainConfig | None = None, val: Sequence | None = None,
          out_dir=None, epochs: int | None = None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Mini-batch Adam on (LR, HR) pairs with the step-halving schedule.

    Writes ``train.log`` (lines "epoch step lr loss psnr_val") and
    per-epoch checkpoints into ``out_dir`` when given. A non-finite loss
    restores the last good weights, saves them and raises TrainingError.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("training dataset is empty")
    if cfg.loss != "l1":
        raise ValueError(f"unsupported loss {cfg.loss!r}")
    n_epochs = cfg.total_epochs if epochs is None else epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr0)
    result = TrainResult([], [], [], [])
    last_good = {k: v.copy() for k, v in model.state_dict().items()}
    val_score = math.nan

    def emit(line: str):
        result.log_lines.append(line)
        if out is not None:
            with open(out / "train.log", "a") as fh:
                fh.write(line + "\n")
        if log is not None:
            log(line)

    current_epoch = 0

    def end_epoch(epoch: int):
        nonlocal val_score, last_good
        if val:
            val_score = validation_psnr(model, val)
            result.val_psnr.append(val_score)
        last_good = {k: v.copy() for k, v in model.state_dict().items()}
        if out is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            path = out / f"epoch_{epoch + 1:03d}.lfm"
            model.save(path)
            result.checkpoints.append(path)

    for epoch, step, lo, hi in _prefetch(_batches(dataset, cfg, rng, range(n_epochs)), cfg.prefetch):
        if epoch != current_epoch:
            end_epoch(current_epoch)
            current_epoch = epoch
        opt.lr = cfg.lr_at(epoch)
        opt.zero_grad()
        loss = l1_loss(model(_as_model_input(lo, model)), _as_model_input(hi, model))
        value = float(loss.data)
        if not math.isfinite(value):
            model.load_state_dict(last_good)
            path = None
            if out is not None:
                path = out / "last_good.lfm"
                model.save(path)
            raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", path)
        loss.backward()
        opt.step()
        result.losses.append(value)
        emit(f"{epoch} {step} {opt.lr:.6g} {value:.6f} {val_score:.4f}")
    if n_epochs > 0:
        end_epoch(current_epoch)
    return result
