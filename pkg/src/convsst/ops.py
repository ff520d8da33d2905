"""Differentiable numeric kernels on `Tensor`.

Every op validates shapes, computes its forward value with numpy, and,
when a tape is active, records a backward closure. Convolutions run as
windowed einsum contractions (stride fixed at 1). In float32 mode the
reductions inside matmul, einsum, moments, and sums accumulate in
float64 and cast back, which keeps 32-bit error bounded.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import (
    Parameter,
    Tensor,
    TensorError,
    guard_output,
    record,
    tape_active,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x) -> Tensor:
    """Unwrap a Parameter or coerce raw data into a Tensor."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.value
    return Tensor(x)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TensorError(f"dtype mismatch: {dt.name} vs {t.dtype.name}")
    return dt


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = _acc_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = _acc_sum(g, axis=axes, keepdims=True)
    return g.reshape(shape)


def _acc_sum(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    if a.dtype == np.float32:
        out = a.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
        return out.astype(np.float32)
    return a.sum(axis=axis, keepdims=keepdims)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.dtype == np.float32:
        out = np.matmul(a.astype(np.float64), b.astype(np.float64))
        return out.astype(np.float32)
    return np.matmul(a, b)


def _ein(subscripts: str, *operands: np.ndarray, dtype) -> np.ndarray:
    out = np.einsum(subscripts, *operands, dtype=np.float64, optimize=True)
    return out.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    out = guard_output(Tensor(a.data + b.data))
    if tape_active():
        a_shape, b_shape = a.shape, b.shape

        def bwd(g, accum):
            accum(a, _reduce_to(g, a_shape))
            accum(b, _reduce_to(g, b_shape))

        record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    out = guard_output(Tensor(a.data - b.data))
    if tape_active():
        a_shape, b_shape = a.shape, b.shape

        def bwd(g, accum):
            accum(a, _reduce_to(g, a_shape))
            accum(b, _reduce_to(-g, b_shape))

        record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    out = guard_output(Tensor(a.data * b.data))
    if tape_active():
        ad, bd = a.data, b.data

        def bwd(g, accum):
            accum(a, _reduce_to(g * bd, ad.shape))
            accum(b, _reduce_to(g * ad, bd.shape))

        record(out, bwd)
    return out


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = guard_output(Tensor(a.data * a.dtype.type(s)))
    if tape_active():
        record(out, lambda g, accum: accum(a, g * s))
    return out


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = guard_output(Tensor(_mm(a.data, b.data)))
    if tape_active():
        ad, bd = a.data, b.data

        def bwd(g, accum):
            accum(a, _reduce_to(_mm(g, bd.swapaxes(-1, -2)), ad.shape))
            accum(b, _reduce_to(_mm(ad.swapaxes(-1, -2), g), bd.shape))

        record(out, bwd)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = guard_output(Tensor(x.data.reshape(shape)))
    if tape_active():
        src_shape = x.shape
        record(out, lambda g, accum: accum(x, g.reshape(src_shape)))
    return out


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = guard_output(Tensor(np.transpose(x.data, axes)))
    if tape_active():
        inverse = tuple(np.argsort(axes))
        record(out, lambda g, accum: accum(x, np.transpose(g, inverse)))
    return out


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = guard_output(Tensor(np.broadcast_to(x.data, shape)))
    if tape_active():
        src_shape = x.shape
        record(out, lambda g, accum: accum(x, _reduce_to(g, src_shape)))
    return out


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise TensorError("concat needs at least one tensor")
    _same_dtype(*ts)
    out = guard_output(Tensor(np.concatenate([t.data for t in ts], axis=axis)))
    if tape_active():
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g, accum):
            for t, piece in zip(ts, np.split(g, splits, axis=axis)):
                accum(t, piece)

        record(out, bwd)
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    n = x.shape[axis]
    if not (0 <= start and start + length <= n):
        raise TensorError(f"narrow [{start}:{start + length}) out of range for size {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = guard_output(Tensor(x.data[idx]))
    if tape_active():

        def bwd(g, accum):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            accum(x, gx)

        record(out, bwd)
    return out


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = guard_output(Tensor(_acc_sum(x.data, axis=axis, keepdims=keepdims)))
    if tape_active():
        src_shape = x.shape

        def bwd(g, accum):
            accum(x, np.broadcast_to(_restore_axes(g, src_shape, axis, keepdims), src_shape))

        record(out, bwd)
    return out


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = _axis_count(x.shape, axis)
    if count == 0:
        raise TensorError("mean over an empty axis")
    out_data = _acc_sum(x.data, axis=axis, keepdims=keepdims) / x.dtype.type(count)
    out = guard_output(Tensor(out_data.astype(x.dtype, copy=False)))
    if tape_active():
        src_shape = x.shape

        def bwd(g, accum):
            gx = _restore_axes(g, src_shape, axis, keepdims) / count
            accum(x, np.broadcast_to(gx.astype(g.dtype, copy=False), src_shape))

        record(out, bwd)
    return out


def _axis_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


def _restore_axes(g: np.ndarray, src_shape, axis, keepdims) -> np.ndarray:
    """Reshape a reduced gradient so it broadcasts against the source."""
    if keepdims:
        return g
    if axis is None:
        return g.reshape((1,) * len(src_shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(src_shape) for a in axes)
    shape = [1 if i in axes else s for i, s in enumerate(src_shape)]
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Convolutions (stride 1)
# ---------------------------------------------------------------------------


def _pair(p) -> tuple[int, int]:
    if isinstance(p, int):
        return (p, p)
    ph, pw = p
    return (int(ph), int(pw))


def conv2d(x, w, groups: int = 1, padding=0) -> Tensor:
    """Grouped 2D cross-correlation.

    x: (N, Cin, H, W) or (Cin, H, W); w: (Cout, Cin/groups, kh, kw).
    Output spatial dims are `in + 2p - k + 1`.
    """
    x, w = as_tensor(x), as_tensor(w)
    _same_dtype(x, w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d expects 4D input/weight, got {x.shape} and {w.shape}")
    n, cin, h, wid = xd.shape
    cout, cg, kh, kw = w.shape
    g_ = int(groups)
    if g_ < 1 or cin % g_ or cout % g_:
        raise TensorError(f"groups={g_} does not divide Cin={cin}, Cout={cout}")
    if cg * g_ != cin:
        raise TensorError(f"weight expects Cin={cg * g_}, input has {cin}")
    ph, pw = _pair(padding)
    ho, wo = h + 2 * ph - kh + 1, wid + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{wid + 2 * pw})")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xpg = xp.reshape(n, g_, cg, h + 2 * ph, wid + 2 * pw)
    win = sliding_window_view(xpg, (kh, kw), axis=(3, 4))  # (n,g,cg,ho,wo,kh,kw)
    wg = w.data.reshape(g_, cout // g_, cg, kh, kw)
    out_data = _ein("gocab,ngcijab->ngoij", wg, win, dtype=x.dtype).reshape(n, cout, ho, wo)
    out = guard_output(Tensor(out_data[0] if squeeze else out_data))
    if tape_active():

        def bwd(g, accum):
            gg = (g[None] if squeeze else g).reshape(n, g_, cout // g_, ho, wo)
            gw = _ein("ngoij,ngcijab->gocab", gg, win, dtype=w.dtype)
            accum(w, gw.reshape(w.shape))
            gxp = np.zeros_like(xp)
            gxpg = gxp.reshape(n, g_, cg, h + 2 * ph, wid + 2 * pw)
            for a in range(kh):
                for b in range(kw):
                    gxpg[:, :, :, a : a + ho, b : b + wo] += _ein(
                        "ngoij,goc->ngcij", gg, wg[:, :, :, a, b], dtype=x.dtype
                    )
            gx = gxp[:, :, ph : ph + h, pw : pw + wid]
            accum(x, gx[0] if squeeze else gx)

        record(out, bwd)
    return out


def _triple(p) -> tuple[int, int, int]:
    if isinstance(p, int):
        return (p, p, p)
    pd, ph, pw = p
    return (int(pd), int(ph), int(pw))


def conv3d(x, w, padding=0) -> Tensor:
    """3D cross-correlation.

    x: (N, Cin, D, H, W) or (Cin, D, H, W); w: (Cout, Cin, kd, kh, kw).
    Each output dim is `in + 2p - k + 1`.
    """
    x, w = as_tensor(x), as_tensor(w)
    _same_dtype(x, w)
    squeeze = x.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5 or w.ndim != 5:
        raise TensorError(f"conv3d expects 5D input/weight, got {x.shape} and {w.shape}")
    n, cin, d, h, wid = xd.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin_w != cin:
        raise TensorError(f"weight expects Cin={cin_w}, input has {cin}")
    pd, ph, pw = _triple(padding)
    do, ho, wo = d + 2 * pd - kd + 1, h + 2 * ph - kh + 1, wid + 2 * pw - kw + 1
    if do < 1 or ho < 1 or wo < 1:
        raise TensorError(
            f"kernel ({kd},{kh},{kw}) larger than padded input "
            f"({d + 2 * pd},{h + 2 * ph},{wid + 2 * pw})"
        )

    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))  # (n,cin,do,ho,wo,kd,kh,kw)
    out_data = _ein("oqabc,nqijkabc->noijk", w.data, win, dtype=x.dtype)
    out = guard_output(Tensor(out_data[0] if squeeze else out_data))
    if tape_active():
        wd = w.data

        def bwd(g, accum):
            gb = g[None] if squeeze else g
            gw = _ein("noijk,nqijkabc->oqabc", gb, win, dtype=w.dtype)
            accum(w, gw)
            gxp = np.zeros_like(xp)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxp[:, :, a : a + do, b : b + ho, c : c + wo] += _ein(
                            "noijk,oq->nqijk", gb, wd[:, :, a, b, c], dtype=x.dtype
                        )
            gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wid]
            accum(x, gx[0] if squeeze else gx)

        record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Normalization, activations, regularization
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise TensorError("softmax over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / _acc_sum(e, axis=axis, keepdims=True)
    out = guard_output(Tensor(y.astype(x.dtype, copy=False)))
    if tape_active():
        yd = out.data

        def bwd(g, accum):
            inner = _acc_sum(g * yd, axis=axis, keepdims=True)
            accum(x, yd * (g - inner))

        record(out, bwd)
    return out


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _same_dtype(x, gamma, beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise TensorError("layernorm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise TensorError(f"affine params must have shape ({d},)")
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype, copy=False)
    out = guard_output(Tensor(xhat * gamma.data + beta.data))
    if tape_active():
        lead = tuple(range(x.ndim - 1))

        def bwd(g, accum):
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
            gx = inv * (dxhat - m1 - xhat * m2)
            accum(x, gx.astype(g.dtype, copy=False))
            accum(gamma, _acc_sum(g * xhat, axis=lead))
            accum(beta, _acc_sum(g, axis=lead))

        record(out, bwd)
    return out


def batchnorm(x, gamma, beta, running_mean, running_var, *, training: bool,
              momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over channel axis 1 of an (N, C, ...) tensor.

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, standard momentum rule).
    Eval mode normalizes with the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _same_dtype(x, gamma, beta)
    rm = running_mean.value if isinstance(running_mean, Parameter) else as_tensor(running_mean)
    rv = running_var.value if isinstance(running_var, Parameter) else as_tensor(running_var)
    if x.ndim < 2:
        raise TensorError("batchnorm input needs at least (N, C) dims")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"affine params must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = _axis_count(x.shape, axes)

    if training:
        if m < 2:
            raise TensorError("training-mode batchnorm needs at least 2 values per channel")
        xd = x.data.astype(np.float64, copy=False)
        mu = xd.mean(axis=axes)
        xc = xd - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        rm.data[...] = ((1.0 - momentum) * rm.data + momentum * mu).astype(x.dtype)
        rv.data[...] = ((1.0 - momentum) * rv.data + momentum * var * (m / (m - 1))).astype(x.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xc * inv.reshape(bshape)).astype(x.dtype, copy=False)
    else:
        inv = 1.0 / np.sqrt(rv.data.astype(np.float64) + eps)
        xhat = ((x.data - rm.data.reshape(bshape)) * inv.reshape(bshape)).astype(x.dtype, copy=False)

    out = guard_output(Tensor(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)))
    if tape_active():

        def bwd(g, accum):
            dxhat = g * gamma.data.reshape(bshape)
            accum(gamma, _acc_sum(g * xhat, axis=axes))
            accum(beta, _acc_sum(g, axis=axes))
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True, dtype=np.float64)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64)
                gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
            accum(x, gx.astype(g.dtype, copy=False))

        record(out, bwd)
    return out


def activation(x, kind: str) -> Tensor:
    """Elementwise nonlinearity: 'relu' or 'gelu' (exact erf form)."""
    x = as_tensor(x)
    xd = x.data
    if kind == "relu":
        out = guard_output(Tensor(np.maximum(xd, 0)))
        if tape_active():
            record(out, lambda g, accum: accum(x, g * (xd > 0)))
        return out
    if kind == "gelu":
        phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
        out = guard_output(Tensor((xd * phi).astype(x.dtype, copy=False)))
        if tape_active():

            def bwd(g, accum):
                pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
                accum(x, (g * (phi + xd * pdf)).astype(g.dtype, copy=False))

            record(out, bwd)
        return out
    raise TensorError(f"unknown activation kind {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def gelu(x) -> Tensor:
    return activation(x, "gelu")


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time mask scaled by 1/(1-rate); eval identity."""
    x = as_tensor(x)
    if not (0.0 <= rate < 1.0):
        raise TensorError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise TensorError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))
    out = guard_output(Tensor(x.data * keep))
    if tape_active():
        record(out, lambda g, accum: accum(x, g * keep))
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if logits.ndim != 2:
        raise TensorError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if t.shape != (n,):
        raise TensorError(f"targets must have shape ({n},), got {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TensorError("targets must be integer class indices")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise TensorError(f"target out of range [0, {c})")
    z = logits.data.astype(np.float64, copy=False)
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    nll = lse[:, 0] - z[rows, t]
    out = guard_output(Tensor(np.asarray(nll.mean(), dtype=logits.dtype)))
    if tape_active():

        def bwd(g, accum):
            p = np.exp(z - lse)
            p[rows, t] -= 1.0
            gs = float(g.reshape(-1)[0])
            accum(logits, (gs / n * p).astype(logits.dtype, copy=False))

        record(out, bwd)
    return out
