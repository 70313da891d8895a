"""Rank-4 tensor arithmetic with explicit per-op backward rules.

Conventions (fixed, so independent oracles can match):
  * convolution is cross-correlation (no kernel flip) with zero padding
  * bilinear interpolation uses the align-corners=false coordinate mapping
  * no broadcasting: elementwise ops require exact shape equality
  * everything is float64

Each operation returns ``(Tensor4, BackwardRecord)``. A record maps an
output gradient to the gradients of the op's inputs; composition is chained
explicitly by callers (the pipeline is fixed and shallow, a global tape
would buy nothing).
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GradientCheckError, ShapeError


class Tensor4:
    """Immutable-by-convention (batch, channels, height, width) float64 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("Tensor4 values must be finite")
        self.data = arr

    @property
    def dims(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[1]

    @classmethod
    def zeros(cls, n, c, h, w):
        return cls(np.zeros((n, c, h, w)))

    def __repr__(self):
        return f"Tensor4{self.data.shape}"


@dataclass
class BackwardRecord:
    """Backward rule of one op: output gradient -> per-input gradients."""

    op: str
    inputs: tuple
    fn: Callable = field(repr=False)

    def backward(self, grad_output):
        return self.fn(np.asarray(grad_output, dtype=np.float64))


def _conv_out_size(size, k, stride, dilation, padding):
    eff = dilation * (k - 1) + 1
    return (size + 2 * padding - eff) // stride + 1


def _patch_indices(kh, kw, hout, wout, stride, dilation):
    rows = dilation * np.arange(kh)[:, None] + stride * np.arange(hout)[None, :]
    cols = dilation * np.arange(kw)[:, None] + stride * np.arange(wout)[None, :]
    # index arrays broadcasting to (kh, kw, hout, wout)
    return rows[:, None, :, None], cols[None, :, None, :]


def conv2d(input, kernel, stride=1, dilation=1, groups=1, padding=0):
    """Grouped 2D cross-correlation.

    input (N, Cin, H, W), kernel (Cout, Cin/groups, kh, kw). Depthwise is
    groups == Cin. Returns the output tensor and a record producing
    gradients w.r.t. input and kernel.
    """
    x, k = input.data, kernel.data
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"bad conv parameters stride={stride} dilation={dilation} padding={padding}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = k.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"channels in={cin} out={cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"kernel expects {cg} channels per group, input supplies {cin // groups}")
    hout = _conv_out_size(h, kh, stride, dilation, padding)
    wout = _conv_out_size(w, kw, stride, dilation, padding)
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv output would be {hout}x{wout} for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ridx, cidx = _patch_indices(kh, kw, hout, wout, stride, dilation)
    patches = xp[:, :, ridx, cidx]                       # (n, cin, kh, kw, hout, wout)
    cog = cout // groups
    pmat = patches.reshape(n, groups, cg * kh * kw, hout * wout)
    kmat = k.reshape(groups, cog, cg * kh * kw)
    out = np.matmul(kmat, pmat)                          # (n, groups, cog, hout*wout)
    out = out.reshape(n, cout, hout, wout)

    def backward(g):
        if g.shape != out.shape:
            raise ShapeError(f"conv2d backward expects grad {out.shape}, got {g.shape}")
        gmat = g.reshape(n, groups, cog, hout * wout)
        gk = np.einsum("ngop,ngkp->gok", gmat, pmat).reshape(k.shape)
        gp = np.matmul(kmat.transpose(0, 2, 1), gmat)    # (n, groups, cg*kh*kw, hout*wout)
        gp = gp.reshape(n, cin, kh, kw, hout, wout)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), slice(None), ridx, cidx), gp)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx.copy(), gk

    record = BackwardRecord("conv2d", (input, kernel), backward)
    return Tensor4(out), record


def pointwise_conv(input, kernel):
    """1x1 convolution: pure channel mixing, spatial dims preserved."""
    if kernel.data.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernel must be 1x1, got {kernel.data.shape[2:]}")
    out, rec = conv2d(input, kernel)
    return out, BackwardRecord("pointwise_conv", rec.inputs, rec.fn)


def _bilinear_axis(src_size, dst_size):
    # align-corners=false: src = (dst + 0.5) * (src/dst) - 0.5
    pos = (np.arange(dst_size) + 0.5) * (src_size / dst_size) - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hi = np.clip(lo + 1, 0, src_size - 1)
    lo = np.clip(lo, 0, src_size - 1)
    return lo, hi, frac


def interpolate(input, target_h, target_w, mode="bilinear"):
    """Spatial resampling to (target_h, target_w); channels preserved."""
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target dims must be >= 1, got {target_h}x{target_w}")
    if mode not in ("nearest", "bilinear"):
        raise ShapeError(f"unknown interpolation mode {mode!r}")
    x = input.data
    n, c, h, w = x.shape

    if (target_h, target_w) == (h, w):
        out = x.copy()

        def backward_id(g):
            return (g.copy(),)

        return Tensor4(out), BackwardRecord(f"interpolate_{mode}", (input,), backward_id)

    if mode == "nearest":
        ys = np.minimum((np.arange(target_h) * h // target_h), h - 1)
        xs = np.minimum((np.arange(target_w) * w // target_w), w - 1)
        out = x[:, :, ys[:, None], xs[None, :]]

        def backward_nearest(g):
            gx = np.zeros_like(x)
            np.add.at(gx, (slice(None), slice(None), ys[:, None], xs[None, :]), g)
            return (gx,)

        return Tensor4(out), BackwardRecord("interpolate_nearest", (input,), backward_nearest)

    y0, y1, fy = _bilinear_axis(h, target_h)
    x0, x1, fx = _bilinear_axis(w, target_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    out = ((x[:, :, y0[:, None], x0[None, :]] * wx0 + x[:, :, y0[:, None], x1[None, :]] * wx1) * wy0
           + (x[:, :, y1[:, None], x0[None, :]] * wx0 + x[:, :, y1[:, None], x1[None, :]] * wx1) * wy1)

    def backward_bilinear(g):
        gx = np.zeros_like(x)
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(gx, (slice(None), slice(None), yi[:, None], xi[None, :]), g * (wy * wx))
        return (gx,)

    return Tensor4(out), BackwardRecord("interpolate_bilinear", (input,), backward_bilinear)


def elementwise(a, b, op):
    """Elementwise add or mul; shapes must match exactly (no broadcasting)."""
    if a.dims != b.dims:
        raise ShapeError(f"elementwise {op} needs equal shapes, got {a.dims} vs {b.dims}")
    if op == "add":
        out = a.data + b.data

        def backward(g):
            return g.copy(), g.copy()

    elif op == "mul":
        out = a.data * b.data
        ad, bd = a.data, b.data

        def backward(g):
            return g * bd, g * ad

    else:
        raise ShapeError(f"unknown elementwise op {op!r}")
    return Tensor4(out), BackwardRecord(f"elementwise_{op}", (a, b), backward)


def relu(a):
    """max(x, 0); backward masks by positivity of the forward input."""
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return Tensor4(np.where(mask, a.data, 0.0)), BackwardRecord("relu", (a,), backward)


def concat_channels(tensors):
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0].dims
    for t in tensors[1:]:
        if (t.dims[0],) + t.dims[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat_channels dims mismatch: {t.dims} vs {ref}")
    sizes = [t.channels for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(sizes)))

    return Tensor4(out), BackwardRecord("concat_channels", tuple(tensors), backward)


def split_channels(a, parts):
    """Split into `parts` equal channel blocks. split(concat(..)) is the identity."""
    c = a.channels
    if parts < 1 or c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    outs = [Tensor4(a.data[:, i * step:(i + 1) * step].copy()) for i in range(parts)]

    def backward(grads):
        if len(grads) != parts:
            raise ShapeError(f"split backward needs {parts} gradients, got {len(grads)}")
        return (np.concatenate([np.asarray(g, dtype=np.float64) for g in grads], axis=1),)

    return outs, BackwardRecord("split_channels", (a,), backward)


def fully_connected(x, weights, bias):
    """Affine map y = W x + b for a flat input vector."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected shapes W{w.shape} x{x.shape} b{b.shape} are inconsistent")
    out = w @ x + b

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        return w.T @ g, np.outer(g, x), g.copy()

    return out, BackwardRecord("fully_connected", (x, w, b), backward)


def global_average_pool(a):
    """Per-sample mean of each channel over all spatial positions -> (N, C)."""
    n, c, h, w = a.dims
    out = a.data.mean(axis=(2, 3))

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (n, c):
            raise ShapeError(f"pool backward expects grad ({n}, {c}), got {g.shape}")
        return (np.broadcast_to(g[:, :, None, None] / (h * w), a.dims).copy(),)

    return out, BackwardRecord("global_average_pool", (a,), backward)


def gradcheck(f, inputs, eps=1e-5, seed=0):
    """Compare an op's backward rule against central finite differences.

    `f` maps raw float64 arrays to ``(output_array, backward_fn)`` where
    ``backward_fn(grad_out)`` returns one gradient per input. A random
    cotangent g probes the scalar sum(g * f(x)); the analytic gradient of
    that scalar is backward_fn(g). Returns
    max over input entries of |analytic - fd| / max(1, |fd|).
    """
    if eps <= 0:
        raise GradientCheckError(f"eps must be positive, got {eps}")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out, back = f(*inputs)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(np.shape(out))
    analytic = back(g)
    if len(analytic) != len(inputs):
        raise GradientCheckError(f"backward returned {len(analytic)} grads for {len(inputs)} inputs")

    worst = 0.0
    for idx, x in enumerate(inputs):
        ana = np.asarray(analytic[idx], dtype=np.float64)
        if ana.shape != x.shape:
            raise GradientCheckError(f"gradient {idx} has shape {ana.shape}, input has {x.shape}")
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(np.sum(g * f(*inputs)[0]))
            flat[j] = orig - eps
            lo = float(np.sum(g * f(*inputs)[0]))
            flat[j] = orig
            fd = (hi - lo) / (2.0 * eps)
            if not (np.isfinite(fd) and np.isfinite(ana.reshape(-1)[j])):
                raise GradientCheckError(f"non-finite value probing input {idx} entry {j}")
            err = abs(ana.reshape(-1)[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
