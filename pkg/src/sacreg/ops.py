"""Differentiable volumetric primitives on channel-first [C, D, H, W] tensors.

Padding is replicate (edge clamp) everywhere a window leaves the volume.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, Tensor, as_tensor, concat, mean, sqrt, unbroadcast

_SPATIAL = (1, 2, 3)


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ContractError(f"{what} expects a [C, D, H, W] tensor, got shape {x.shape}")


def _check_odd(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ContractError(f"window size must be odd, got {k}")


def _pad_edge(x: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return x
    return np.pad(x, ((0, 0), (r, r), (r, r), (r, r)), mode="edge")


def _fold_edge(g: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of ``_pad_edge``: pour the padded border back onto the edge voxels."""
    if r == 0:
        return g
    for ax in _SPATIAL:
        n = g.shape[ax]
        sl = [slice(None)] * 4
        sl[ax] = slice(r, n - r)
        core = g[tuple(sl)].copy()
        sl[ax] = slice(0, r)
        lo = g[tuple(sl)].sum(axis=ax, keepdims=True)
        sl[ax] = slice(n - r, n)
        hi = g[tuple(sl)].sum(axis=ax, keepdims=True)
        sl[ax] = slice(0, 1)
        core[tuple(sl)] += lo
        sl[ax] = slice(core.shape[ax] - 1, core.shape[ax])
        core[tuple(sl)] += hi
        g = core
    return g


def window_offsets(k: int) -> np.ndarray:
    """Integer offsets (d', h', w') of a k^3 window in lexicographic order, shape [k^3, 3]."""
    _check_odd(k)
    r = k // 2
    rng = np.arange(-r, r + 1)
    dd, hh, ww = np.meshgrid(rng, rng, rng, indexing="ij")
    return np.stack([dd.ravel(), hh.ravel(), ww.ravel()], axis=1)


def unfold3d(x: Tensor, k: int = 3) -> Tensor:
    """Replicate-padded k^3 patches around every voxel, shape [C, D*H*W, k^3].

    Entry (c, v, j) is the value at offset ``window_offsets(k)[j]`` from voxel v.
    """
    _check_4d(x, "unfold3d")
    _check_odd(k)
    C, D, H, W = x.shape
    r = k // 2
    xp = _pad_edge(x.data, r)
    win = sliding_window_view(xp, (k, k, k), axis=_SPATIAL)
    out = win.reshape(C, D * H * W, k**3)

    def backward(g):
        g = g.reshape(C, D, H, W, k, k, k)
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    gp[:, a : a + D, b : b + H, c : c + W] += g[..., a, b, c]
        return (_fold_edge(gp, r),)

    return Tensor._result(out, (x,), backward)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Shape-preserving 3D cross-correlation with replicate padding."""
    _check_4d(x, "conv3d")
    if kernel.ndim != 5:
        raise ContractError(f"kernel must be [C_out, C_in, k, k, k], got {kernel.shape}")
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ContractError(f"kernel must be cubic, got {kernel.shape}")
    _check_odd(k)
    if cin != x.shape[0]:
        raise ContractError(f"input has {x.shape[0]} channels, kernel expects {cin}")
    r = k // 2
    if padding is not None and padding != r:
        raise ContractError(f"padding must be (k-1)/2 = {r}, got {padding}")
    if bias is None:
        bias = Tensor(np.zeros(cout))
    if bias.shape != (cout,):
        raise ContractError(f"bias must have shape ({cout},), got {bias.shape}")
    _, D, H, W = x.shape
    xp = _pad_edge(x.data, r)
    Dp, Hp, Wp = xp.shape[1:]
    flat = xp.reshape(cin, -1)
    # Work on the flattened padded grid: output voxel (d, h, w) lives at padded
    # index q = (d*Hp + h)*Wp + w and reads flat[q + shift] for every window offset,
    # so each offset is one matmul over a contiguous slice.
    span = (D - 1) * Hp * Wp + (H - 1) * Wp + W
    shifts = [(a * Hp + b) * Wp + c for a in range(k) for b in range(k) for c in range(k)]
    # kernel as [C_out, k^3 * C_in], matching the row order of the column matrix
    wmat = kernel.data.reshape(cout, cin, k**3).transpose(0, 2, 1).reshape(cout, k**3 * cin)

    def columns():
        cols = np.empty((len(shifts), cin, span), dtype=flat.dtype)
        for j, s in enumerate(shifts):
            cols[j] = flat[:, s : s + span]
        return cols.reshape(len(shifts) * cin, span)

    def valid(a):
        full = np.zeros((a.shape[0], Dp * Hp * Wp), dtype=a.dtype)
        full[:, :span] = a
        return full.reshape(a.shape[0], Dp, Hp, Wp)[:, :D, :H, :W]

    out = valid(wmat @ columns()) + bias.data.reshape(-1, 1, 1, 1)

    def backward(g):
        gs = np.zeros((cout, Dp, Hp, Wp), dtype=g.dtype)
        gs[:, :D, :H, :W] = g
        gs = gs.reshape(cout, -1)[:, :span]
        gx = gw = None
        if kernel.requires_grad:
            gw = (gs @ columns().T).reshape(cout, k**3, cin).transpose(0, 2, 1).reshape(kernel.shape)
        if x.requires_grad:
            gcols = (wmat.T @ gs).reshape(len(shifts), cin, span)
            gflat = np.zeros(flat.shape, dtype=g.dtype)
            for j, s in enumerate(shifts):
                gflat[:, s : s + span] += gcols[j]
            gx = _fold_edge(gflat.reshape(xp.shape), r)
        return gx, gw, g.sum(axis=(1, 2, 3))

    return Tensor._result(np.ascontiguousarray(out), (x, kernel, bias), backward)


def avg_pool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping block mean; trailing voxels that do not fill a block are dropped."""
    _check_4d(x, "avg_pool3d")
    C, D, H, W = x.shape
    s = window
    if min(D, H, W) < s:
        raise ContractError(f"spatial extents {x.shape[1:]} smaller than pooling window {s}")
    d2, h2, w2 = D // s, H // s, W // s
    crop = x.data[:, : d2 * s, : h2 * s, : w2 * s]
    out = crop.reshape(C, d2, s, h2, s, w2, s).mean(axis=(2, 4, 6))
    scale = 1.0 / s**3

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        block = np.broadcast_to(g[:, :, None, :, None, :, None] * scale, (C, d2, s, h2, s, w2, s))
        full[:, : d2 * s, : h2 * s, : w2 * s] = block.reshape(C, d2 * s, h2 * s, w2 * s)
        return (full,)

    return Tensor._result(out, (x,), backward)


def instance_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check_4d(x, "instance_norm")
    if x.size // x.shape[0] <= 1:
        raise ContractError("instance_norm needs more than one spatial voxel")
    mu = mean(x, axis=_SPATIAL, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=_SPATIAL, keepdims=True)
    y = xc / sqrt(var + eps)
    return y * weight.reshape(-1, 1, 1, 1) + bias.reshape(-1, 1, 1, 1)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    slope = float(slope)
    out = np.where(pos, x.data, x.data * slope)
    return Tensor._result(out, (x,), lambda g: (np.where(pos, g, g * slope),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map: x [M, in] -> [M, out] with weight [out, in]."""
    y = x @ weight.transpose()
    return y if bias is None else y + bias


def grouped_linear(rows: Tensor, weights: Tensor, biases: Tensor, groups: np.ndarray) -> Tensor:
    """Apply a per-group affine map to each row: out[m] = weights[g] @ rows[m] + biases[g], g = groups[m]."""
    groups = np.asarray(groups)
    M, K = rows.shape
    N, cout, kw = weights.shape
    if kw != K or biases.shape != (N, cout) or groups.shape != (M,):
        raise ContractError(
            f"grouped_linear shapes rows={rows.shape} weights={weights.shape} biases={biases.shape} groups={groups.shape}"
        )
    if groups.size and (groups.min() < 0 or groups.max() >= N):
        raise ContractError(f"group index out of range [0, {N})")
    members = [np.flatnonzero(groups == n) for n in range(N)]
    rd, wd, bd = rows.data, weights.data, biases.data
    out = np.empty((M, cout), dtype=np.result_type(rd, wd))
    for n, idx in enumerate(members):
        if idx.size:
            out[idx] = rd[idx] @ wd[n].T + bd[n]

    def backward(g):
        gr = np.zeros(rd.shape, dtype=g.dtype) if rows.requires_grad else None
        gw = np.zeros(wd.shape, dtype=g.dtype)
        gb = np.zeros(bd.shape, dtype=g.dtype)
        for n, idx in enumerate(members):
            if not idx.size:
                continue
            gn = g[idx]
            if gr is not None:
                gr[idx] = gn @ wd[n]
            gw[n] = gn.T @ rd[idx]
            gb[n] = gn.sum(axis=0)
        return gr, gw, gb

    return Tensor._result(out, (rows, weights, biases), backward)


# -- sampling ----------------------------------------------------------------


def _sample_coords(flow: np.ndarray):
    """Per-axis lower index, fractional weight and in-range mask for x + flow (border clamp)."""
    _, D, H, W = flow.shape
    grids = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    lo, frac, inside = [], [], []
    for ax, n in enumerate((D, H, W)):
        pos = grids[ax] + flow[ax]
        ok = (pos > 0) & (pos < n - 1)
        pos = np.clip(pos, 0, n - 1)
        i0 = np.clip(np.floor(pos), 0, max(n - 2, 0)).astype(np.int64)
        lo.append(i0)
        frac.append((pos - i0).astype(flow.dtype))
        inside.append(ok)
    return lo, frac, inside


def warp(src: Tensor, flow: Tensor) -> Tensor:
    """Trilinear resampling out(x) = src(x + flow(x)), positions clamped to the volume."""
    _check_4d(src, "warp")
    if flow.ndim != 4 or flow.shape[0] != 3 or flow.shape[1:] != src.shape[1:]:
        raise ContractError(f"flow {flow.shape} does not match source {src.shape}")
    C, D, H, W = src.shape
    M = D * H * W
    lo, frac, inside = _sample_coords(flow.data)
    dims = (D, H, W)
    hi = [np.minimum(lo[a] + 1, dims[a] - 1) for a in range(3)]
    flat_src = src.data.reshape(C, M)
    corners = []
    for bd in (0, 1):
        for bh in (0, 1):
            for bw in (0, 1):
                idx = [(hi if b else lo)[a] for a, b in enumerate((bd, bh, bw))]
                lin = ((idx[0] * H + idx[1]) * W + idx[2]).ravel()
                fac = [frac[a] if b else 1.0 - frac[a] for a, b in enumerate((bd, bh, bw))]
                corners.append(((bd, bh, bw), lin, fac))
    out = np.zeros((C, M), dtype=np.result_type(src.data, flow.data))
    vals = []
    for _, lin, fac in corners:
        v = flat_src[:, lin]
        vals.append(v)
        out += v * (fac[0] * fac[1] * fac[2]).ravel()

    def backward(g):
        g = g.reshape(C, M)
        gsrc = gflow = None
        if src.requires_grad:
            rows = np.concatenate([np.arange(M)] * 8)
            cols = np.concatenate([lin for _, lin, _ in corners])
            wts = np.concatenate([(f[0] * f[1] * f[2]).ravel() for _, _, f in corners])
            S = sp.csr_matrix((wts, (rows, cols)), shape=(M, M))
            gsrc = np.asarray((S.T @ g.T).T).reshape(C, D, H, W)
        if flow.requires_grad:
            gflow = np.zeros((3, M), dtype=g.dtype)
            for (bits, _, fac), v in zip(corners, vals):
                gv = (g * v).sum(axis=0)
                for a in range(3):
                    others = [fac[b] for b in range(3) if b != a]
                    dw = (others[0] * others[1]).ravel()
                    gflow[a] += gv * dw if bits[a] else -gv * dw
            for a in range(3):
                gflow[a] *= inside[a].ravel()
            gflow = gflow.reshape(3, D, H, W)
        return gsrc, gflow

    return Tensor._result(out.reshape(C, D, H, W), (src, flow), backward)


def warp_nearest(labels: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Nearest-neighbour resampling of a [D, H, W] label grid; keeps label codes integral."""
    D, H, W = labels.shape
    grids = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    idx = []
    for ax, n in enumerate((D, H, W)):
        pos = np.clip(np.rint(grids[ax] + flow[ax]), 0, n - 1).astype(np.int64)
        idx.append(pos)
    return labels[idx[0], idx[1], idx[2]]


def linear_resize_matrix(n_src: int, n_dst: int, dtype=np.float64) -> np.ndarray:
    """[n_dst, n_src] linear interpolation matrix with half-voxel aligned centres and edge clamp."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0, n_src - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, max(n_src - 2, 0))
    i1 = np.minimum(i0 + 1, n_src - 1)
    t = pos - i0
    mat = np.zeros((n_dst, n_src), dtype=dtype)
    rows = np.arange(n_dst)
    np.add.at(mat, (rows, i0), 1.0 - t)
    np.add.at(mat, (rows, i1), t)
    return mat


def apply_along_axis(x: Tensor, mat: np.ndarray, axis: int) -> Tensor:
    """Contract ``mat`` [n_out, n_in] against ``axis`` of x."""
    mat = mat.astype(x.dtype, copy=False)
    out = np.moveaxis(np.tensordot(mat, x.data, axes=([1], [axis])), 0, axis)

    def backward(g):
        return (np.moveaxis(np.tensordot(mat.T, g, axes=([1], [axis])), 0, axis),)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward)


def resize_trilinear(x: Tensor, size: tuple[int, int, int]) -> Tensor:
    _check_4d(x, "resize_trilinear")
    for ax, n in zip(_SPATIAL, size):
        if x.shape[ax] != n:
            x = apply_along_axis(x, linear_resize_matrix(x.shape[ax], n), ax)
    return x


def _box_axis(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    cs = np.cumsum(x, axis=axis)
    zero_shape = list(x.shape)
    zero_shape[axis] = 1
    cs = np.concatenate([np.zeros(zero_shape, dtype=x.dtype), cs], axis=axis)
    i = np.arange(n)
    upper = np.minimum(i + r + 1, n)
    lower = np.maximum(i - r, 0)
    return np.take(cs, upper, axis=axis) - np.take(cs, lower, axis=axis)


def box_sum(x: Tensor, w: int) -> Tensor:
    """Sum over the in-bounds part of a w^3 window centred at every voxel of a [C, D, H, W] tensor."""
    _check_4d(x, "box_sum")
    _check_odd(w)
    r = w // 2

    def run(a):
        for ax in _SPATIAL:
            a = _box_axis(a, r, ax)
        return a

    # the truncated symmetric window is self-adjoint
    return Tensor._result(run(x.data), (x,), lambda g: (run(g),))


__all__ = [
    "unfold3d",
    "conv3d",
    "avg_pool3d",
    "instance_norm",
    "leaky_relu",
    "softmax",
    "linear",
    "grouped_linear",
    "warp",
    "warp_nearest",
    "resize_trilinear",
    "box_sum",
    "window_offsets",
    "concat",
    "as_tensor",
    "unbroadcast",
]
