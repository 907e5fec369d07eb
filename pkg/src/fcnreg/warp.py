"""Dense spatial transformation of volumes by displacement fields.

The warped image is ``out(v) = moving(v + d(v))``.  Source coordinates are
clamped to the grid per axis (border replication) before interpolation.
"""
from __future__ import annotations

from typing import Union

import numpy as np

from .tensor import Tensor, as_tensor
from .volume import DisplacementField, Volume

ArrayOrVolume = Union[np.ndarray, Volume]


def _grid_coords(dims, dtype):
    return [np.arange(n, dtype=dtype).reshape([-1 if i == a else 1 for i in range(3)])
            for a, n in enumerate(dims)]


def _axis_setup(raw: np.ndarray, n: int):
    """Lower corner index, fraction, and in-range mask for one axis."""
    inside = (raw >= 0) & (raw <= n - 1)
    p = np.clip(raw, 0, n - 1)
    if n == 1:
        i0 = np.zeros(p.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(p), np.zeros_like(inside)
    i0 = np.minimum(np.floor(p).astype(np.int64), n - 2)
    return i0, i0 + 1, p - i0, inside


def _check_pair(moving_shape, field_shape):
    if len(moving_shape) != 5 or len(field_shape) != 5 or field_shape[1] != 3:
        raise ValueError(f"warp expects moving (B,C,D,H,W) and field (B,3,D,H,W); "
                         f"got {moving_shape} and {field_shape}")
    if moving_shape[0] != field_shape[0] or moving_shape[2:] != field_shape[2:]:
        raise ValueError(f"warp: moving dims {tuple(moving_shape[2:])} do not match "
                         f"field dims {tuple(field_shape[2:])}")


def warp_tensor(moving, field) -> Tensor:
    """Differentiable trilinear warp of a (B, C, D, H, W) tensor.

    Gradients flow to both the field (through the interpolation weights) and
    the moving intensities.  Where a coordinate is clamped the field gradient
    along that axis is zero.
    """
    moving, field = as_tensor(moving), as_tensor(field)
    _check_pair(moving.shape, field.shape)
    B, C, D, H, W = moving.shape
    N = D * H * W
    dt = moving.data.dtype
    fd = field.data.astype(dt, copy=False)

    gz, gy, gx = _grid_coords((D, H, W), dt)
    z0, z1, tz, mz = _axis_setup(gz + fd[:, 0], D)
    y0, y1, ty, my = _axis_setup(gy + fd[:, 1], H)
    x0, x1, tx, mx = _axis_setup(gx + fd[:, 2], W)

    base = (np.arange(B, dtype=np.int64) * N).reshape(B, 1, 1, 1)
    mflat = np.ascontiguousarray(moving.data.transpose(1, 0, 2, 3, 4)).reshape(C, B * N)

    zs, ys, xs = (z0, z1), (y0, y1), (x0, x1)
    wz, wy, wx = (1 - tz, tz), (1 - ty, ty), (1 - tx, tx)
    idx, vals = {}, {}
    out = np.zeros((C, B, D, H, W), dtype=dt)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                flat = (base + (zs[a] * H + ys[b]) * W + xs[c]).reshape(-1)
                v = mflat[:, flat].reshape(C, B, D, H, W)
                idx[a, b, c], vals[a, b, c] = flat, v
                out += (wz[a] * wy[b] * wx[c]) * v
    y = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))

    def _bw(g):
        gc = g.transpose(1, 0, 2, 3, 4)  # (C, B, D, H, W)
        gfield = None
        if field.requires_grad:
            dz = np.zeros((C, B, D, H, W), dtype=dt)
            dy = np.zeros_like(dz)
            dx = np.zeros_like(dz)
            sign = (-1, 1)
            for (a, b, c), v in vals.items():
                dz += sign[a] * (wy[b] * wx[c]) * v
                dy += sign[b] * (wz[a] * wx[c]) * v
                dx += sign[c] * (wz[a] * wy[b]) * v
            gfield = np.stack([(gc * dz).sum(axis=0) * mz,
                               (gc * dy).sum(axis=0) * my,
                               (gc * dx).sum(axis=0) * mx], axis=1).astype(field.data.dtype)
        gmoving = None
        if moving.requires_grad:
            acc = np.zeros((C, B * N), dtype=np.float64)
            for (a, b, c), flat in idx.items():
                w = (wz[a] * wy[b] * wx[c]).reshape(-1)
                for ch in range(C):
                    acc[ch] += np.bincount(flat, weights=gc[ch].reshape(-1) * w,
                                           minlength=B * N)
            gmoving = np.ascontiguousarray(
                acc.astype(dt).reshape(C, B, D, H, W).transpose(1, 0, 2, 3, 4))
        return gmoving, gfield

    return Tensor.from_op(y, (moving, field), _bw, "warp_trilinear")


def warp_trilinear(moving, field):
    """Sample ``moving`` at ``v + field(v)`` with trilinear interpolation.

    Accepts either a :class:`Volume` and :class:`DisplacementField` (returns a
    Volume) or tensors/arrays in (B, C, D, H, W) / (B, 3, D, H, W) layout
    (returns a differentiable :class:`Tensor`).
    """
    if isinstance(moving, Volume) or isinstance(field, DisplacementField):
        mv = moving.channel_first() if isinstance(moving, Volume) else np.asarray(moving)
        fd = field.data if isinstance(field, DisplacementField) else np.asarray(field)
        if mv.shape[-3:] != fd.shape[-3:]:
            raise ValueError(f"warp: moving dims {mv.shape[-3:]} do not match field dims "
                             f"{fd.shape[-3:]}")
        out = warp_tensor(Tensor(mv[None]), Tensor(fd[None])).data[0]
        return Volume(out[0] if out.shape[0] == 1 else out)
    return warp_tensor(moving, field)


def warp_nearest(labels, field):
    """Nearest-neighbour warp for integer label maps; never invents new codes.

    Rounding is half away from zero, applied after clamping to the grid.
    """
    lab = labels.data if isinstance(labels, Volume) else np.asarray(labels)
    fd = field.data if isinstance(field, DisplacementField) else np.asarray(field)
    dims = lab.shape[-3:]
    if fd.shape != (3, *dims):
        raise ValueError(f"warp_nearest: label dims {dims} do not match field dims "
                         f"{fd.shape[1:]}")
    coords = []
    for axis, (g, n) in enumerate(zip(_grid_coords(dims, np.float64), dims)):
        p = np.clip(g + fd[axis].astype(np.float64), 0, n - 1)
        coords.append(np.floor(p + 0.5).astype(np.int64))
    out = lab[..., coords[0], coords[1], coords[2]]
    return Volume(out) if isinstance(labels, Volume) else out


def downsample_half(vol: ArrayOrVolume):
    """Average non-overlapping 2x2x2 blocks over the last three axes."""
    arr = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float32)
    *lead, D, H, W = arr.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"downsample_half needs even dims, got {(D, H, W)}")
    blocks = arr.reshape(*lead, D // 2, 2, H // 2, 2, W // 2, 2).astype(np.float64)
    n = len(lead)
    out = blocks.mean(axis=(n + 1, n + 3, n + 5)).astype(np.float32)
    return Volume(out) if isinstance(vol, Volume) else out


def pyramid(arr: np.ndarray, levels: int) -> list:
    """``[full, half, quarter, ...]`` with ``levels`` entries."""
    out = [np.asarray(arr, dtype=np.float32)]
    for _ in range(levels - 1):
        out.append(downsample_half(out[-1]))
    return out


def _interp_matrix(n_coarse: int, factor: int, dtype) -> np.ndarray:
    n_fine = n_coarse * factor
    u = np.clip((np.arange(n_fine) + 0.5) / factor - 0.5, 0, n_coarse - 1)
    i0 = np.minimum(np.floor(u).astype(int), max(n_coarse - 2, 0))
    t = u - i0
    m = np.zeros((n_fine, n_coarse))
    m[np.arange(n_fine), i0] += 1 - t
    if n_coarse > 1:
        m[np.arange(n_fine), i0 + 1] += t
    return m.astype(dtype)


def _apply_separable(x: np.ndarray, mats) -> np.ndarray:
    for axis, m in zip((2, 3, 4), mats):
        x = np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)
    return np.ascontiguousarray(x)


def upsample_field(field, factor: int):
    """Trilinear upsampling of a displacement field by an integer factor.

    Displacements are in voxels of their own grid, so values are multiplied by
    ``factor``.  Sample centres are aligned (coarse voxel i covers fine voxels
    ``i*factor .. i*factor + factor - 1``).  Tensors stay differentiable.
    """
    if isinstance(field, DisplacementField):
        out = upsample_field(Tensor(field.data[None]), factor).data[0]
        return DisplacementField(out, level=max(field.level - int(np.log2(factor)), 0))
    field = as_tensor(field)
    if field.ndim != 5:
        raise ValueError("upsample_field expects a (B, 3, D, H, W) tensor")
    dt = field.data.dtype
    mats = [_interp_matrix(n, factor, dt) for n in field.shape[2:]]
    y = _apply_separable(field.data, mats) * dt.type(factor)

    def _bw(g):
        return (_apply_separable(g, [m.T for m in mats]) * dt.type(factor),)

    return Tensor.from_op(y, (field,), _bw, "upsample_field")
