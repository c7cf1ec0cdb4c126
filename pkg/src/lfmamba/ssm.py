"""State-space kernels: discretization, three evaluation paths, selective scan.

Shapes follow the recurrence h_k = a_k * h_{k-1} + b_k with time on axis 0
for the plain numpy kernels. The differentiable selective scan works on
channel-grouped sequences [B, L, G, d] so several independent SSMs (one per
scan direction) share one scan call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Module, Param, linear
from .tensor import DomainError, ShapeError, Tensor, as_tensor, exp, grad_enabled, make_op, matmul, softplus

# below this |delta * A| the ZOH input matrix uses its series expansion
ZOH_SERIES_THRESHOLD = 1e-8


# ---------------------------------------------------------------------------
# discretization


def _zoh_input_factor(z: np.ndarray, delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / A with z = delta * A, switching to delta * (1 + z/2) near 0."""
    small = np.abs(z) < ZOH_SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    exact = np.expm1(z) / safe_a
    series = delta * (1.0 + 0.5 * z)
    return np.where(small, series, exact)


def discretize_zoh(A, B, delta, method: str = "zoh"):
    """Zero-order hold for a diagonal system, elementwise.

    Returns (A_bar, B_bar) with A_bar = exp(delta*A) and
    B_bar = (delta*A)^-1 (exp(delta*A) - 1) * delta*B. ``method="euler"``
    gives the simplified B_bar = delta*B instead.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise DomainError("discretization step delta must be strictly positive")
    z = delta * A
    a_bar = np.exp(z)
    if method == "zoh":
        b_bar = _zoh_input_factor(z, np.broadcast_to(delta, z.shape), np.broadcast_to(A, z.shape)) * B
    elif method == "euler":
        b_bar = delta * B
    else:
        raise ValueError(f"unknown discretization {method!r}")
    return a_bar, b_bar


@dataclass
class DiscreteSsm:
    """Discrete diagonal SSM.

    ``A_bar``, ``B_bar`` and ``C`` broadcast against [*lanes, N] when
    time-invariant, or carry a leading time axis [L, *lanes, N] when
    ``per_step`` is set. ``D_skip`` broadcasts against the lane shape.
    """

    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    D_skip: np.ndarray | float | None = None
    per_step: bool = False


# ---------------------------------------------------------------------------
# associative scan


def combine(first, second):
    """Compose affine maps h -> a*h + b: apply ``first`` then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def sequential_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_k = a_k h_{k-1} + b_k along axis 0 with h_{-1} = 0."""
    a, b = np.broadcast_arrays(a, b)
    h = np.empty(b.shape, dtype=np.result_type(a, b))
    state = np.zeros(b.shape[1:], dtype=h.dtype)
    for k in range(b.shape[0]):
        state = a[k] * state + b[k]
        h[k] = state
    return h


def blelloch_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Work-efficient up-sweep/down-sweep scan of the same recurrence.

    The sequence is padded to a power of two with identity pairs (1, 0).
    The down-sweep yields exclusive prefixes, which are closed with the
    element itself to give the inclusive states.
    """
    a, b = np.broadcast_arrays(a, b)
    length = b.shape[0]
    n = 1 << max(length - 1, 0).bit_length()
    dtype = np.result_type(a, b)
    pa = np.ones((n,) + b.shape[1:], dtype=dtype)
    pb = np.zeros((n,) + b.shape[1:], dtype=dtype)
    pa[:length] = a
    pb[:length] = b

    step = 1
    while step < n:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        pb[right] = pa[right] * pb[left] + pb[right]
        pa[right] *= pa[left]
        step *= 2

    pa[n - 1] = 1.0
    pb[n - 1] = 0.0
    step = n // 2
    while step >= 1:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        ta, tb = pa[left].copy(), pb[left].copy()
        pa[left], pb[left] = pa[right], pb[right]
        # right child: parent prefix followed by the left subtree total
        pb[right] = ta * pb[right] + tb
        pa[right] = ta * pa[right]
        step //= 2

    return a * pb[:length] + b


def linear_scan(a, b, method: str = "parallel") -> np.ndarray:
    if method == "parallel":
        return blelloch_scan(a, b)
    if method == "sequential":
        return sequential_scan(a, b)
    raise ValueError(f"unknown scan method {method!r}")


# ---------------------------------------------------------------------------
# evaluation paths for a discrete SSM


def _readout(dssm: DiscreteSsm, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    y = np.sum(dssm.C * h, axis=-1)
    if dssm.D_skip is not None:
        y = y + dssm.D_skip * x
    return y


def _check_steps(dssm: DiscreteSsm, x: np.ndarray) -> None:
    if dssm.per_step:
        for name in ("A_bar", "B_bar", "C"):
            arr = np.asarray(getattr(dssm, name))
            if arr.ndim > 0 and arr.shape[0] not in (1, x.shape[0]):
                raise ShapeError(f"{name} has {arr.shape[0]} steps but x has length {x.shape[0]}")


def recurrence(dssm: DiscreteSsm, x) -> np.ndarray:
    """Step-by-step evaluation; the correctness oracle for the other paths.

    ``x`` is [L, *lanes]; returns y with the same shape.
    """
    x = np.asarray(x, dtype=float)
    _check_steps(dssm, x)
    u = dssm.B_bar * x[..., None]
    a = np.broadcast_to(dssm.A_bar, u.shape) if not dssm.per_step else dssm.A_bar
    h = sequential_scan(a, u)
    return _readout(dssm, h, x)


def conv_kernel(dssm: DiscreteSsm, length: int) -> np.ndarray:
    """K[l] = C A_bar^l B_bar for l < length; shape [length, *lanes]."""
    if dssm.per_step:
        raise ValueError("convolution form needs a time-invariant SSM, got per-step parameters")
    a = np.asarray(dssm.A_bar, dtype=float)
    powers = a[None, ...] ** np.arange(length).reshape((-1,) + (1,) * a.ndim)
    return np.sum(dssm.C * powers * dssm.B_bar, axis=-1)


def conv_form(dssm: DiscreteSsm, x) -> np.ndarray:
    """Causal convolution of x with the SSM kernel (time-invariant only)."""
    if dssm.per_step:
        raise ValueError("convolution form needs a time-invariant SSM, got per-step parameters")
    x = np.asarray(x, dtype=float)
    length = x.shape[0]
    kernel = conv_kernel(dssm, length)
    y = np.zeros(np.broadcast_shapes(x.shape, kernel.shape), dtype=float)
    for k in range(length):
        y[k] = np.sum(kernel[k::-1] * x[:k + 1], axis=0)
    if dssm.D_skip is not None:
        y = y + dssm.D_skip * x
    return y


def parallel_scan(dssm: DiscreteSsm, x) -> np.ndarray:
    """Same map as :func:`recurrence`, evaluated with the Blelloch scan."""
    x = np.asarray(x, dtype=float)
    _check_steps(dssm, x)
    u = dssm.B_bar * x[..., None]
    h = blelloch_scan(np.broadcast_to(dssm.A_bar, u.shape), u)
    return _readout(dssm, h, x)


# ---------------------------------------------------------------------------
# differentiable selective scan


def _input_factor(z, delta, a, discretization: str) -> np.ndarray:
    """Per-element multiplier of B in B_bar, broadcast to z's shape."""
    if discretization == "zoh":
        small = np.abs(z) < ZOH_SERIES_THRESHOLD
        if small.any():
            return _zoh_input_factor(z, np.broadcast_to(delta, z.shape), np.broadcast_to(a, z.shape))
        return np.expm1(z) / a
    if discretization == "euler":
        return np.broadcast_to(delta, z.shape)
    raise ValueError(f"unknown discretization {discretization!r}")


def _contract(a: np.ndarray, b: np.ndarray, keep: str) -> np.ndarray:
    """Multiply [L, B, G, d, N] operands and sum out N (keep="d") or d (keep="n")."""
    b = np.broadcast_to(b, a.shape)
    return np.einsum("lbgdn,lbgdn->lbg" + keep, a, b)


def _reverse_scan(a: np.ndarray, g: np.ndarray, method: str) -> np.ndarray:
    """s_k = g_k + a_{k+1} s_{k+1} along axis 0 (the adjoint recurrence)."""
    if method == "sequential":
        out = np.empty_like(g)
        state = g[-1].copy()
        out[-1] = state
        for k in range(g.shape[0] - 2, -1, -1):
            state = a[k + 1] * state + g[k]
            out[k] = state
        return out
    a_next = np.concatenate([a[1:], np.ones_like(a[:1])], axis=0)
    return linear_scan(a_next[::-1], g[::-1], method)[::-1]


# inference processes the batch in slices of at most this many [L, b, G, d, N] elements
INFERENCE_CHUNK_ELEMENTS = 1 << 23


def _scan_inference(x, delta, a, b, c, d_skip, method: str, discretization: str) -> np.ndarray:
    """Forward-only scan, chunked over the batch so memory stays bounded."""
    bsz, length, groups, width = x.shape
    per_item = length * groups * width * a.shape[-1]
    step = max(1, INFERENCE_CHUNK_ELEMENTS // max(per_item, 1))
    y = np.empty_like(x)
    for lo in range(0, bsz, step):
        sl = slice(lo, lo + step)
        xt = np.moveaxis(x[sl], 1, 0)[..., None]
        dt = np.moveaxis(delta[sl], 1, 0)[..., None]
        z = dt * a
        factor = _input_factor(z, dt, a, discretization)
        u = factor * (np.moveaxis(b[sl], 1, 0)[:, :, :, None, :] * xt)
        h = linear_scan(np.exp(z), u, method)
        y[sl] = np.moveaxis(_contract(h, np.moveaxis(c[sl], 1, 0)[:, :, :, None, :], "d"), 0, 1)
    if d_skip is not None:
        y += d_skip * x
    return y


def selective_scan_core(x, delta, A, B, C, D_skip=None, method: str = "parallel",
                        discretization: str = "zoh") -> Tensor:
    """Fused selective scan with a hand-written adjoint.

    x, delta: [B, L, G, d]; A: [G, d, N]; B, C: [B, L, G, N]; D_skip: [G, d].
    Per step and lane: A_bar = exp(delta*A), B_bar = ZOH(delta, A) * B,
    h_k = A_bar h_{k-1} + B_bar x_k, y_k = <C_k, h_k> + D_skip x_k.
    """
    x, delta, A, B, C = (as_tensor(t) for t in (x, delta, A, B, C))
    if x.ndim != 4 or delta.shape != x.shape:
        raise ShapeError(f"selective scan: x {x.shape} and delta {delta.shape} must be [B, L, G, d]")
    bsz, length, groups, width = x.shape
    n = A.shape[-1]
    if A.shape != (groups, width, n) or B.shape != (bsz, length, groups, n) or C.shape != B.shape:
        raise ShapeError(f"selective scan: A {A.shape}, B {B.shape}, C {C.shape} do not match x {x.shape}")

    parents = [x, delta, A, B, C] + ([as_tensor(D_skip)] if D_skip is not None else [])
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        return Tensor(_scan_inference(x.data, delta.data, A.data, B.data, C.data,
                                      None if D_skip is None else parents[-1].data, method, discretization),
                      dtype=x.dtype)

    # internally time-first: [L, B, G, d, N]
    ad = A.data
    xt = np.moveaxis(x.data, 1, 0)[..., None]
    dt = np.moveaxis(delta.data, 1, 0)[..., None]
    bt = np.moveaxis(B.data, 1, 0)[:, :, :, None, :]
    ct = np.moveaxis(C.data, 1, 0)[:, :, :, None, :]
    z = dt * ad
    a_bar = np.exp(z)
    factor = _input_factor(z, dt, ad, discretization)
    bx = bt * xt
    h = linear_scan(a_bar, factor * bx, method)
    y = np.moveaxis(_contract(h, ct, "d"), 0, 1)
    if D_skip is not None:
        D_skip = parents[-1]
        y = y + D_skip.data * x.data

    def backward(gy):
        gyt = np.moveaxis(gy, 1, 0)[..., None]
        gs = _reverse_scan(a_bar, gyt * ct, method)
        gz = gs * a_bar
        gz[0] = 0.0
        gz[1:] *= h[:-1]
        gsf = gs * factor
        gfactor = gs * bx
        gx = _contract(gsf, bt, "d")
        gB = _contract(gsf, xt, "n")
        gC = _contract(h, gyt, "n")
        if discretization == "zoh":
            small = np.abs(z) < ZOH_SERIES_THRESHOLD
            if small.any():
                safe_a = np.where(small, 1.0, ad)
                dfactor_da = np.where(small, 0.5 * dt ** 2, (dt * a_bar - factor) / safe_a)
            else:
                dfactor_da = (dt * a_bar - factor) / ad
            gdelta = _contract(gz, ad, "d") + _contract(gfactor, a_bar, "d")
            gA = np.sum(gz * dt + gfactor * dfactor_da, axis=(0, 1))
        else:
            gdelta = _contract(gz, ad, "d") + np.sum(gfactor, axis=-1)
            gA = np.sum(gz * dt, axis=(0, 1))
        grads = [np.moveaxis(gx, 0, 1), np.moveaxis(gdelta, 0, 1), gA,
                 np.moveaxis(gB, 0, 1), np.moveaxis(gC, 0, 1)]
        if D_skip is not None:
            grads[0] = grads[0] + gy * D_skip.data
            grads.append(np.sum(gy * x.data, axis=(0, 1)))
        return tuple(grads)

    return make_op(y, parents, backward)


def dt_rank_for(width: int) -> int:
    return max(1, math.ceil(width / 16))


class GroupedSelectiveSSM(Module):
    """``groups`` independent selective SSMs of ``width`` channels each.

    Per group: x_proj maps the d-channel input to (dt_rank + 2N) numbers
    giving the low-rank step input and the B, C coefficients; dt_proj lifts
    the step input back to d channels before softplus; A = -exp(A_log).
    """

    def __init__(self, groups: int, width: int, rng: np.random.Generator, d_state: int = 16,
                 dt_rank: int | None = None, d_skip: bool = True, discretization: str = "zoh",
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        self.groups, self.width, self.d_state = groups, width, d_state
        self.dt_rank = dt_rank_for(width) if dt_rank is None else dt_rank
        self.discretization = discretization
        # the two methods agree to rounding; on one core the plain recurrence is faster
        self.method = "sequential"
        r, n = self.dt_rank, d_state
        bound = 1.0 / math.sqrt(width)
        self.x_proj = Param(rng.uniform(-bound, bound, (groups, width, r + 2 * n)))
        self.dt_weight = Param(rng.uniform(-r ** -0.5, r ** -0.5, (groups, r, width)))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), (groups, width)))
        self.dt_bias = Param(dt + np.log(-np.expm1(-dt)))  # inverse softplus
        self.A_log = Param(np.log(np.broadcast_to(np.arange(1, n + 1, dtype=float), (groups, width, n)).copy()))
        self.D_skip = Param(np.ones((groups, width))) if d_skip else None

    def scan_parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, seq):
        """seq: [B, L, G, d] -> [B, L, G, d]."""
        seq = as_tensor(seq)
        bsz, length, groups, width = seq.shape
        if groups != self.groups or width != self.width:
            raise ShapeError(f"expected [B, L, {self.groups}, {self.width}], got {seq.shape}")
        r, n = self.dt_rank, self.d_state
        per_group = seq.permute(2, 0, 1, 3).reshape(groups, bsz * length, width)
        proj = matmul(per_group, self.x_proj)
        dt_low = proj[:, :, :r]
        delta = softplus(matmul(dt_low, self.dt_weight) + self.dt_bias.reshape(groups, 1, width))
        delta = delta.reshape(groups, bsz, length, width).permute(1, 2, 0, 3)
        b = proj[:, :, r:r + n].reshape(groups, bsz, length, n).permute(1, 2, 0, 3)
        c = proj[:, :, r + n:].reshape(groups, bsz, length, n).permute(1, 2, 0, 3)
        a = -exp(self.A_log)
        return selective_scan_core(seq, delta, a, b, c, self.D_skip, method=self.method,
                                   discretization=self.discretization)


class SelectiveSSM(GroupedSelectiveSSM):
    """A single selective SSM over [B, L, D] sequences."""

    def __init__(self, width: int, rng: np.random.Generator, **kwargs):
        super().__init__(1, width, rng, **kwargs)

    def forward(self, x):
        x = as_tensor(x)
        bsz, length, width = x.shape
        return super().forward(x.reshape(bsz, length, 1, width)).reshape(bsz, length, width)


def selective_scan(params: GroupedSelectiveSSM, x, method: str = "parallel"):
    """Run a selective SSM on [B, L, D] (single) or [B, L, G, d] (grouped) input."""
    old = params.method
    params.method = method
    try:
        return params(x)
    finally:
        params.method = old


def discretized_lanes(params: GroupedSelectiveSSM, x) -> DiscreteSsm:
    """Materialize the per-step discrete SSM a selective layer applies to ``x``.

    Returns arrays with time on axis 0: A_bar, B_bar, C of shape
    [L, B, G, d, N]; used to cross-check the fused scan against
    :func:`recurrence`.
    """
    x = np.asarray(as_tensor(x).data, dtype=float)
    if x.ndim == 3:
        x = x[:, :, None, :]
    r, n = params.dt_rank, params.d_state
    proj = np.einsum("blgd,gde->blge", x, params.x_proj.data)
    delta = np.logaddexp(0.0, np.einsum("blgr,grd->blgd", proj[..., :r], params.dt_weight.data)
                         + params.dt_bias.data)
    a = -np.exp(params.A_log.data)
    a_bar, b_bar = discretize_zoh(a, proj[..., None, r:r + n], delta[..., None], params.discretization)
    c = np.broadcast_to(proj[..., None, r + n:], a_bar.shape)
    d = None if params.D_skip is None else params.D_skip.data
    return DiscreteSsm(np.moveaxis(a_bar, 1, 0), np.moveaxis(b_bar, 1, 0), np.moveaxis(c, 1, 0),
                       d, per_step=True)
