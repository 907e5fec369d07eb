"""3D network primitives: convolution, transposed convolution, pooling, BN, ReLU.

All activations use the (batch, channels, depth, height, width) layout.
Convolutions are cross-correlations lowered to one matrix product per batch
chunk over an im2col patch matrix; patch matrices are rebuilt in the
backward pass rather than kept alive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, as_tensor


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def transposed_output_extent(n: int, k: int, stride: int, padding: int,
                             output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{what} expects a 5-D (B, C, D, H, W) tensor, got shape {x.shape}")


def _tap_slices(offsets, stride, extents):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offsets, extents))


def _taps(k: int):
    for a in range(k):
        for b in range(k):
            for c in range(k):
                yield a, b, c


# cap on im2col buffer size (elements); larger batches are processed in chunks
COL_BUDGET = 8_000_000


def _batch_chunks(B: int, per_sample: int):
    step = max(1, COL_BUDGET // max(per_sample, 1))
    for start in range(0, B, step):
        yield slice(start, min(B, start + step))


def _im2col(src: np.ndarray, bs: slice, k: int, stride: int, extents) -> np.ndarray:
    """(k^3 * C, n) patch matrix of ``src`` (C, B, ...) for batch slice ``bs``; tap-major rows."""
    C = src.shape[0]
    nb = bs.stop - bs.start
    cols = np.empty((k ** 3, C, nb, *extents), dtype=src.dtype)
    for t, offs in enumerate(_taps(k)):
        cols[t] = src[(slice(None), bs) + _tap_slices(offs, stride, extents)]
    return cols.reshape(k ** 3 * C, -1)


def _col2im_add(dst: np.ndarray, cols: np.ndarray, bs: slice, k: int, stride: int,
                extents) -> None:
    C = dst.shape[0]
    nb = bs.stop - bs.start
    cols = cols.reshape(k ** 3, C, nb, *extents)
    for t, offs in enumerate(_taps(k)):
        dst[(slice(None), bs) + _tap_slices(offs, stride, extents)] += cols[t]


def _flat_offsets(k: int, padded) -> list:
    _, hp, wp = padded
    return [a * hp * wp + b * wp + c for a, b, c in _taps(k)]


def _correlate_thin(xp: np.ndarray, w: np.ndarray, out_sp) -> np.ndarray:
    """Stride-1 correlation for Cout < Cin: multiply per voxel, then shift-add taps.

    Works on the flattened padded grid; valid outputs never read across the
    boundary between two batch items, so junk values stay in the margins.
    """
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    B, padded = xp.shape[1], xp.shape[2:]
    n_pad = int(np.prod(padded))
    offs = _flat_offsets(k, padded)
    wstack = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)).reshape(-1, cin)
    out = np.empty((cout, B, *out_sp), dtype=xp.dtype)
    for bs in _batch_chunks(B, k ** 3 * cout * n_pad):
        nb = bs.stop - bs.start
        T = nb * n_pad
        prod = (wstack @ xp[:, bs].reshape(cin, T)).reshape(k ** 3, cout, T)
        acc = np.zeros((cout, T), dtype=xp.dtype)
        for t, off in enumerate(offs):
            acc[:, :T - off] += prod[t, :, off:]
        acc = acc.reshape(cout, nb, *padded)
        out[:, bs] = acc[(slice(None), slice(None)) + tuple(slice(0, n) for n in out_sp)]
    return out


def _correlate_thin_grads(xp: np.ndarray, w: np.ndarray, gc: np.ndarray, need_w: bool,
                          need_x: bool):
    """Weight and padded-input gradients matching :func:`_correlate_thin`."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    B, padded = xp.shape[1], xp.shape[2:]
    out_sp = gc.shape[2:]
    n_pad = int(np.prod(padded))
    offs = _flat_offsets(k, padded)
    wstack = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)).reshape(-1, cin)
    gw = np.zeros_like(wstack) if need_w else None
    gxp = np.empty_like(xp) if need_x else None
    for bs in _batch_chunks(B, k ** 3 * cout * n_pad):
        nb = bs.stop - bs.start
        T = nb * n_pad
        G = np.zeros((cout, nb, *padded), dtype=xp.dtype)
        G[(slice(None), slice(None)) + tuple(slice(0, n) for n in out_sp)] = gc[:, bs]
        G = G.reshape(cout, T)
        gs = np.zeros((k ** 3, cout, T), dtype=xp.dtype)
        for t, off in enumerate(offs):
            gs[t, :, off:] = G[:, :T - off]
        gs = gs.reshape(-1, T)
        if need_w:
            gw += gs @ xp[:, bs].reshape(cin, T).T
        if need_x:
            gxp[:, bs] = (wstack.T @ gs).reshape(cin, nb, *padded)
    if need_w:
        gw = np.ascontiguousarray(gw.reshape(k, k, k, cout, cin).transpose(3, 4, 0, 1, 2))
    return gw, gxp


def _correlate(src: np.ndarray, w: np.ndarray, stride: int, out_sp, keep: bool = False):
    """Cross-correlation of a padded (C, B, ...) array with ``w`` (Cout, Cin, k, k, k).

    Returns ``(out, cols)`` with ``out`` shaped (Cout, B, *out_sp); ``cols`` is
    the im2col matrix when it was built in one piece and ``keep`` is set.
    """
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if stride == 1 and cout < cin:
        return _correlate_thin(src, w, out_sp), None
    B = src.shape[1]
    n_sp = int(np.prod(out_sp))
    # (Cout, k^3 * Cin), tap-major to match _im2col rows
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(cout, -1)
    out = np.empty((cout, B, n_sp), dtype=src.dtype)
    chunks = list(_batch_chunks(B, wmat.shape[1] * n_sp))
    kept = None
    for bs in chunks:
        cols = _im2col(src, bs, k, stride, out_sp)
        out[:, bs] = (wmat @ cols).reshape(cout, -1, n_sp)
        if keep and len(chunks) == 1:
            kept = cols
    return out.reshape(cout, B, *out_sp), kept


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 3D cross-correlation.

    ``weight`` has shape (Cout, Cin, k, k, k) with odd ``k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_5d(x, "conv3d")
    B, cin, *spatial = x.shape
    cout, cin_w, k, k2, k3 = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv3d: input has {cin} channels but weight expects {cin_w}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ValueError(f"conv3d: kernel must be cubic with odd size, got {weight.shape[2:]}")
    if padding < 0 or stride < 1:
        raise ValueError("conv3d: need padding >= 0 and stride >= 1")
    out_sp = [conv_output_extent(n, k, stride, padding) for n in spatial]
    if min(spatial) < 1 or any(n + 2 * padding < k for n in spatial) or min(out_sp) < 1:
        raise ValueError(f"conv3d: non-positive output extent {out_sp} for input {spatial}")

    pad = [(0, 0), (0, 0)] + [(padding, padding)] * 3
    xp = np.pad(np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)), pad)
    w = weight.data
    thin = stride == 1 and cout < cin
    out, cols = _correlate(xp, w, stride, out_sp, keep=weight.requires_grad)
    if bias is not None:
        out += bias.data[:, None, None, None, None]
    y = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))

    def _bw(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4))
        gb = gc.reshape(cout, -1).sum(axis=1) if bias is not None else None
        crop = (slice(None), slice(None)) + tuple(slice(padding, padding + n) for n in spatial)
        if thin:
            gw, gxp = _correlate_thin_grads(xp, w, gc, weight.requires_grad, x.requires_grad)
            gx = np.ascontiguousarray(gxp[crop].transpose(1, 0, 2, 3, 4)) if gxp is not None \
                else None
            return gx, gw, gb
        wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(cout, -1)
        n_sp = int(np.prod(out_sp))
        chunks = list(_batch_chunks(B, wmat.shape[1] * n_sp))
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(wmat)
            for bs in chunks:
                patches = cols if cols is not None else _im2col(xp, bs, k, stride, out_sp)
                gw += gc[:, bs].reshape(cout, -1) @ patches.T
            gw = np.ascontiguousarray(gw.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3))
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= k - 1:
                # full correlation with the flipped, channel-transposed kernel
                q = k - 1 - padding
                gpad = np.pad(gc, [(0, 0), (0, 0)] + [(q, q)] * 3)
                wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gx, _ = _correlate(gpad, wflip, 1, spatial)
            else:
                gxp = np.zeros_like(xp)
                for bs in chunks:
                    _col2im_add(gxp, wmat.T @ gc[:, bs].reshape(cout, -1), bs, k, stride, out_sp)
                gx = gxp[crop]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor.from_op(y, parents, _bw, "conv3d")


def transposed_conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0,
                      output_padding: int = 0) -> Tensor:
    """Gradient-of-convolution upsampling; ``weight`` has shape (Cin, Cout, k, k, k).

    With k=3, stride=2, padding=1, output_padding=1 every spatial extent doubles.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_5d(x, "transposed_conv3d")
    B, cin, *spatial = x.shape
    cin_w, cout, k, k2, k3 = weight.shape
    if cin != cin_w:
        raise ValueError(f"transposed_conv3d: input has {cin} channels but weight expects {cin_w}")
    if not (k == k2 == k3):
        raise ValueError("transposed_conv3d: kernel must be cubic")
    if padding < 0 or stride < 1 or output_padding < 0:
        raise ValueError("transposed_conv3d: need padding, output_padding >= 0 and stride >= 1")
    out_sp = [transposed_output_extent(n, k, stride, padding, output_padding) for n in spatial]
    if min(out_sp) < 1:
        raise ValueError(f"transposed_conv3d: negative output extent {out_sp}")

    dt = x.data.dtype
    full_sp = [max((n - 1) * stride + k, padding + o) for n, o in zip(spatial, out_sp)]
    n_sp = int(np.prod(spatial))
    xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(cin, B, n_sp)
    # (k^3 * Cout, Cin), tap-major rows
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 4, 1, 0)).reshape(-1, cin)
    full = np.zeros((cout, B, *full_sp), dtype=dt)
    chunks = list(_batch_chunks(B, k ** 3 * cout * n_sp))
    for bs in chunks:
        _col2im_add(full, wmat @ xc[:, bs].reshape(cin, -1), bs, k, stride, spatial)
    crop = (slice(None), slice(None)) + tuple(slice(padding, padding + o) for o in out_sp)
    y = full[crop]
    if bias is not None:
        y = y + bias.data[:, None, None, None, None]
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4))

    def _bw(g):
        gfull = np.zeros((cout, B, *full_sp), dtype=dt)
        gfull[crop] = g.transpose(1, 0, 2, 3, 4)
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        gxc = np.zeros_like(xc) if x.requires_grad else None
        for bs in chunks:
            cols = _im2col(gfull, bs, k, stride, spatial)
            xchunk = xc[:, bs].reshape(cin, -1)
            if gw is not None:
                gw += cols @ xchunk.T
            if gxc is not None:
                gxc[:, bs] = (wmat.T @ cols).reshape(cin, -1, n_sp)
        gx = None
        if gxc is not None:
            gx = np.ascontiguousarray(gxc.reshape(cin, B, *spatial).transpose(1, 0, 2, 3, 4))
        if gw is not None:
            gw = np.ascontiguousarray(gw.reshape(k, k, k, cout, cin).transpose(4, 3, 0, 1, 2))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor.from_op(y, parents, _bw, "transposed_conv3d")


def avgpool3d(x, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Average pooling whose divisor counts in-bounds window elements only."""
    x = as_tensor(x)
    _check_5d(x, "avgpool3d")
    B, C, *spatial = x.shape
    out_sp = [conv_output_extent(n, kernel, stride, padding) for n in spatial]
    if min(out_sp) < 1 or any(n + 2 * padding < kernel for n in spatial):
        raise ValueError(f"avgpool3d: non-positive output extent {out_sp} for input {spatial}")

    counts = []
    for n, o in zip(spatial, out_sp):
        start = np.arange(o) * stride - padding
        lo = np.maximum(start, 0)
        hi = np.minimum(start + kernel, n)
        counts.append(np.maximum(hi - lo, 0))
    count = counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]
    if np.any(count == 0):
        raise ValueError("avgpool3d: a pooling window lies entirely in the padding")
    inv = (1.0 / count).astype(x.data.dtype)

    pad = [(0, 0), (0, 0)] + [(padding, padding)] * 3
    xp = np.pad(x.data, pad)
    acc = np.zeros((B, C, *out_sp), dtype=x.data.dtype)
    for a, b, c in _taps(kernel):
        acc += xp[(slice(None), slice(None)) + _tap_slices((a, b, c), stride, out_sp)]
    y = acc * inv

    def _bw(g):
        gs = g * inv
        gxp = np.zeros_like(xp)
        for a, b, c in _taps(kernel):
            gxp[(slice(None), slice(None)) + _tap_slices((a, b, c), stride, out_sp)] += gs
        crop = (slice(None), slice(None)) + tuple(slice(padding, padding + n) for n in spatial)
        return (np.ascontiguousarray(gxp[crop]),)

    return Tensor.from_op(y, (x,), _bw, "avgpool3d")


@dataclass
class BatchNormState:
    """Running per-channel statistics; initialised to mean 0, variance 1."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train",
              eps: float = 1e-5, momentum: float = 0.9, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation over the (B, D, H, W) axes.

    In train mode the batch statistics (biased variance) normalise the input and
    the running statistics move as ``running = momentum * running + (1 - momentum)
    * batch`` using the unbiased variance.  Eval mode reads the running
    statistics, which start at mean 0 and variance 1 if never updated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_5d(x, "batchnorm")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("batchnorm: gamma/beta must have one entry per channel")
    axes = (0, 2, 3, 4)
    bshape = (1, C, 1, 1, 1)
    dt = x.data.dtype
    n = x.size // C

    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        if update_stats:
            state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mean
            state.running_var[...] = (momentum * state.running_var
                                      + (1 - momentum) * var * n / (n - 1))
    elif mode == "eval":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    invstd = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(bshape)
    xhat = (x.data - mean.astype(dt).reshape(bshape)) * invstd
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def _bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                s1 = gxhat.mean(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = invstd * (gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd
        return gx, ggamma, gbeta

    return Tensor.from_op(y, (x, gamma, beta), _bw, "batchnorm")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 2:
        raise ValueError("concat_channels: inputs must share rank >= 2")
    if a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")
