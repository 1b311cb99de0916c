"""Network layers as taped ops: 3D convolution, per-view 2D convolution,
max pooling, fully-connected, softmax, dropout and cross-entropy.

Feature maps use the layout ``[B, C, V, H, W]`` (batch, channel, view,
height, width). Unbatched ``[C, V, H, W]`` inputs are accepted by the
convolution and pooling ops and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .tensor import ShapeError, Tensor, note_branch, record, reshape

SPATIAL_KERNEL = 3


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 5:
        raise ShapeError(f"expected [B, C, V, H, W] or [C, V, H, W], got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    if not squeeze:
        return out
    return reshape(out, out.shape[1:])


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, same_padding: bool = True) -> Tensor:
    """Joint view/spatial convolution with a ``[C_out, C_in, v, 3, 3]`` kernel.

    With ``same_padding`` the input is zero padded by ``(v - 1) / 2`` along
    views and by 1 on each spatial side, so ``(V, H, W)`` is preserved. No
    activation is applied.
    """
    x, squeeze = _batched(x)
    if weight.ndim != 5 or weight.shape[3:] != (SPATIAL_KERNEL, SPATIAL_KERNEL):
        raise ShapeError(f"conv3d weight must be [C_out, C_in, v, 3, 3], got {weight.shape}")
    c_out, c_in, kv = weight.shape[:3]
    if kv % 2 == 0:
        raise ValueError(f"viewpoint kernel extent must be odd, got {kv}")
    B, C, V, H, W = x.shape
    if C != c_in:
        raise ShapeError(f"conv3d: input has {C} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias must be [{c_out}], got {bias.shape}")

    pv, ps = ((kv - 1) // 2, 1) if same_padding else (0, 0)
    Vo, Ho, Wo = V + 2 * pv - kv + 1, H + 2 * ps - 2, W + 2 * ps - 2
    if min(Vo, Ho, Wo) < 1:
        raise ShapeError(f"conv3d: input {x.shape} too small for kernel without padding")

    xp = np.pad(x.data.transpose(1, 0, 2, 3, 4), ((0, 0), (0, 0), (pv, pv), (ps, ps), (ps, ps)))
    cols = np.empty((c_in, kv, 3, 3, B, Vo, Ho, Wo), dtype=x.data.dtype)
    for dv, dy, dx in product(range(kv), range(3), range(3)):
        cols[:, dv, dy, dx] = xp[:, :, dv : dv + Vo, dy : dy + Ho, dx : dx + Wo]
    cols = cols.reshape(c_in * kv * 9, -1)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, B, Vo, Ho, Wo).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1, 1)

    def rule(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c_in, kv, 3, 3, B, Vo, Ho, Wo)
            dxp = np.zeros_like(xp)
            for dv, dy, dx in product(range(kv), range(3), range(3)):
                dxp[:, :, dv : dv + Vo, dy : dy + Ho, dx : dx + Wo] += dcols[:, dv, dy, dx]
            gx = dxp[:, :, pv : pv + V, ps : ps + H, ps : ps + W].transpose(1, 0, 2, 3, 4)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _unbatch(record("conv3d", inputs, out, rule), squeeze)


def conv2d_independent(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-view 2D convolution: view ``j`` only sees kernel set ``weight[j]``.

    ``weight`` is ``[V, C_out, C_in, 3, 3]`` (one kernel set per view),
    ``bias`` is ``[V, C_out]``. Spatial same padding, no cross-view terms.
    """
    x, squeeze = _batched(x)
    B, C, V, H, W = x.shape
    if weight.ndim != 5 or weight.shape[3:] != (SPATIAL_KERNEL, SPATIAL_KERNEL):
        raise ShapeError(f"per-view weight must be [V, C_out, C_in, 3, 3], got {weight.shape}")
    nv, c_out, c_in = weight.shape[:3]
    if nv != V:
        raise ShapeError(f"conv2d_independent: {nv} kernel sets for {V} views")
    if C != c_in:
        raise ShapeError(f"conv2d_independent: input has {C} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (V, c_out):
        raise ShapeError(f"per-view bias must be [{V}, {c_out}], got {bias.shape}")

    xp = np.pad(x.data.transpose(2, 1, 0, 3, 4), ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((V, c_in, 3, 3, B, H, W), dtype=x.data.dtype)
    for dy, dx in product(range(3), range(3)):
        cols[:, :, dy, dx] = xp[:, :, :, dy : dy + H, dx : dx + W]
    cols = cols.reshape(V, c_in * 9, B * H * W)
    wmat = weight.data.reshape(V, c_out, c_in * 9)
    out = np.matmul(wmat, cols).reshape(V, c_out, B, H, W)
    if bias is not None:
        out = out + bias.data.reshape(V, c_out, 1, 1, 1)
    out = out.transpose(2, 1, 0, 3, 4)

    def rule(g):
        gm = g.transpose(2, 1, 0, 3, 4).reshape(V, c_out, B * H * W)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm).reshape(V, c_in, 3, 3, B, H, W)
            dxp = np.zeros_like(xp)
            for dy, dx in product(range(3), range(3)):
                dxp[:, :, :, dy : dy + H, dx : dx + W] += dcols[:, :, dy, dx]
            gx = dxp[:, :, :, 1 : 1 + H, 1 : 1 + W].transpose(2, 1, 0, 3, 4)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 3, 4)).T

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _unbatch(record("conv2d_independent", inputs, out, rule), squeeze)


# --------------------------------------------------------------------------
# Pooling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolSpec:
    """Max-pool window over ``(view, height, width)``.

    The view axis floors (clamped to one output, kernel truncated when the
    input is shorter than the window); spatial axes use ceil mode with
    ``-inf`` padding.
    """

    kernel: tuple[int, int, int] = (2, 2, 2)
    stride: tuple[int, int, int] = (2, 2, 2)
    viewpoint_rounding: str = "floor"
    spatial_rounding: str = "ceil"

    def __post_init__(self):
        if len(self.kernel) != 3 or len(self.stride) != 3:
            raise ValueError("kernel and stride need three components")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride must be positive: {self.kernel} / {self.stride}")
        for r in (self.viewpoint_rounding, self.spatial_rounding):
            if r not in ("floor", "ceil"):
                raise ValueError(f"unknown rounding {r!r}")

    def roundings(self) -> tuple[str, str, str]:
        return (self.viewpoint_rounding, self.spatial_rounding, self.spatial_rounding)


def _pool_axis(n: int, k: int, s: int, rounding: str) -> tuple[int, int]:
    """(output extent, effective kernel) along one axis."""
    k_eff = min(k, n)
    span = n - k_eff
    out = (-(-span // s) if rounding == "ceil" else span // s) + 1
    return max(1, out), k_eff


def pool_output_shape(extents: tuple[int, int, int], spec: PoolSpec) -> tuple[int, int, int]:
    return tuple(
        _pool_axis(n, k, s, r)[0] for n, k, s, r in zip(extents, spec.kernel, spec.stride, spec.roundings())
    )


def maxpool3d(x: Tensor, spec: PoolSpec = PoolSpec()) -> tuple[Tensor, np.ndarray]:
    """Max pool over (view, height, width); returns (output, argmax offsets).

    Argmax offsets index the window in ``(dv, dy, dx)`` scan order; ties go
    to the first element found.
    """
    xb, squeeze = _batched(x)
    B, C = xb.shape[:2]
    ext = xb.shape[2:]
    axes = [_pool_axis(n, k, s, r) for n, k, s, r in zip(ext, spec.kernel, spec.stride, spec.roundings())]
    outs = tuple(a[0] for a in axes)
    keff = tuple(a[1] for a in axes)
    need = tuple((o - 1) * s + k for o, s, k in zip(outs, spec.stride, keff))

    xp = xb.data[:, :, : need[0], : need[1], : need[2]]
    pads = [(0, 0), (0, 0)] + [(0, max(0, nd - n)) for nd, n in zip(need, ext)]
    if any(p[1] for p in pads):
        xp = np.pad(xp, pads, constant_values=-np.inf)

    sv, sh, sw = spec.stride
    Vo, Ho, Wo = outs

    def window(arr, dv, dy, dx):
        return arr[:, :, dv : dv + (Vo - 1) * sv + 1 : sv, dy : dy + (Ho - 1) * sh + 1 : sh, dx : dx + (Wo - 1) * sw + 1 : sw]

    offsets = list(product(range(keff[0]), range(keff[1]), range(keff[2])))
    best = np.full((B, C, Vo, Ho, Wo), -np.inf, dtype=xb.data.dtype)
    arg = np.zeros(best.shape, dtype=np.int64)
    for i, (dv, dy, dx) in enumerate(offsets):
        w = window(xp, dv, dy, dx)
        better = w > best if i else np.ones(w.shape, dtype=bool)
        best = np.where(better, w, best)
        arg[better] = i
    note_branch(arg)

    def rule(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i, (dv, dy, dx) in enumerate(offsets):
            window(dxp, dv, dy, dx)[...] += np.where(arg == i, g, 0.0)
        full = np.zeros(xb.shape, dtype=g.dtype)
        cv, ch, cw = (min(a, b) for a, b in zip(need, ext))
        full[:, :, :cv, :ch, :cw] = dxp[:, :, :cv, :ch, :cw]
        return (full,)

    out = _unbatch(record("maxpool3d", (xb,), best, rule), squeeze)
    return out, (arg[0] if squeeze else arg)


# --------------------------------------------------------------------------
# Dense layers and heads
# --------------------------------------------------------------------------


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[B, D_in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def rule(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return record("fully_connected", (x, weight, bias), out, rule)


def _check_logits(logits: Tensor) -> None:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, k], got {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("need at least two classes")
    if not np.isfinite(logits.data).all():
        raise ValueError("logits contain non-finite values")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    _check_logits(logits)
    p = _softmax_np(logits.data)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax", (logits,), p, rule)


LOG_FLOOR = np.log(1e-12)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true labels.

    Log-probabilities are clamped at ``log(1e-12)``; clamped rows pass no
    gradient.
    """
    _check_logits(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, k = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels must be [{B}], got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = logp[np.arange(B), labels]
    live = picked > LOG_FLOOR
    loss = -np.where(live, picked, LOG_FLOOR).mean()

    def rule(g):
        grad = np.exp(logp)
        grad[np.arange(B), labels] -= 1.0
        grad *= live[:, None]
        return (grad * (float(g) / B),)

    return record("cross_entropy", (logits,), np.asarray(loss), rule)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))
