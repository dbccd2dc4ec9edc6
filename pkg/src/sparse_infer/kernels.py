"""Core sparse convolution and transpose kernels.

All kernels are pure functions compiled with numba (nogil, no fastmath) so
float32 results are bit-reproducible run to run and thread to thread.  The
accumulation order inside one output element is fixed: filter column (l)
outer, filter row (k) inner, then node order within the segment.  The dense
reference kernel deliberately uses a different fixed order, (k, l, c), and
is the correctness oracle the sparse paths are compared against.

Padding is virtual: window positions falling outside the input contribute
nothing and the corresponding segment walk is skipped; no padded tensor is
ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .sparse_core import (
    NODE_DTYPE,
    AxisOrder2,
    AxisOrder3,
    DenseTensor3,
    FormatError,
    SparseMatrix,
    SparseTensor3,
    SparseVector,
)


@dataclass(frozen=True)
class ConvGeometry:
    """Shape contract of one convolution: dims, stride, symmetric zero padding."""

    input_dims: tuple[int, int, int]  # (C_I, H_I, W_I)
    filter_dims: tuple[int, int, int]  # (C_F, H_F, W_F)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        c_i, h_i, w_i = self.input_dims
        c_f, h_f, w_f = self.filter_dims
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if c_i != c_f:
            raise ValueError(f"channel mismatch: input C={c_i}, filter C={c_f}")
        if h_f > h_i + 2 * self.padding or w_f > w_i + 2 * self.padding:
            raise ValueError(f"filter {self.filter_dims} exceeds padded input {self.input_dims}")

    @property
    def n_h(self) -> int:
        c, h_i, _ = self.input_dims
        _, h_f, _ = self.filter_dims
        return (h_i + 2 * self.padding - h_f) // self.stride + 1

    @property
    def n_w(self) -> int:
        _, _, w_i = self.input_dims
        _, _, w_f = self.filter_dims
        return (w_i + 2 * self.padding - w_f) // self.stride + 1


@njit(nogil=True, cache=True)
def _dot_kernel(d, idx, val, start):
    x = np.float32(0.0)
    p = start
    while idx[p] != -1:
        x += d[idx[p]] * val[p]
        p += 1
    return x


@njit(nogil=True, cache=True)
def _window_acc(inp, idx, val, seg_off, seg_base, w_f, h_f, w0, h0):
    """Accumulate one output element: l outer, k inner, node order innermost."""
    w_i = inp.shape[0]
    h_i = inp.shape[1]
    x = np.float32(0.0)
    for l in range(w_f):
        w_in = l + w0
        if w_in < 0 or w_in >= w_i:
            continue
        col = seg_base + l * h_f
        for k in range(h_f):
            h_in = k + h0
            if h_in < 0 or h_in >= h_i:
                continue
            p = seg_off[col + k]
            while idx[p] != -1:
                x += inp[w_in, h_in, idx[p]] * val[p]
                p += 1
    return x


@njit(nogil=True, cache=True)
def _conv_filter_sparse_kernel(inp, idx, val, seg_off, seg_base, w_f, h_f, s, p, out):
    n_h, n_w = out.shape
    for i in range(n_h):
        for j in range(n_w):
            out[i, j] = _window_acc(inp, idx, val, seg_off, seg_base, w_f, h_f, j * s - p, i * s - p)


@njit(nogil=True, cache=True)
def _conv_filter_sparse_counted_kernel(inp, idx, val, seg_off, seg_base, w_f, h_f, s, p, out):
    """Same arithmetic as the uncounted kernel, plus a multiply tally."""
    w_i = inp.shape[0]
    h_i = inp.shape[1]
    n_h, n_w = out.shape
    total = 0
    for i in range(n_h):
        for j in range(n_w):
            x = np.float32(0.0)
            for l in range(w_f):
                w_in = l + j * s - p
                if w_in < 0 or w_in >= w_i:
                    continue
                col = seg_base + l * h_f
                for k in range(h_f):
                    h_in = k + i * s - p
                    if h_in < 0 or h_in >= h_i:
                        continue
                    q = seg_off[col + k]
                    while idx[q] != -1:
                        x += inp[w_in, h_in, idx[q]] * val[q]
                        total += 1
                        q += 1
            out[i, j] = x
    return total


@njit(nogil=True, cache=True)
def _conv_input_sparse_kernel(
    in_idx, in_val, in_seg_off, h_i, w_i, filt, s, p, n_h, n_w, out_idx, out_val, out_seg_off
):
    """Sparse-input convolution; appends only nonzero elements plus row sentinels."""
    w_f, h_f, _ = filt.shape
    pos = 0
    for i in range(n_h):
        out_seg_off[i] = pos
        for j in range(n_w):
            x = np.float32(0.0)
            for l in range(w_f):
                w_in = l + j * s - p
                if w_in < 0 or w_in >= w_i:
                    continue
                for k in range(h_f):
                    h_in = k + i * s - p
                    if h_in < 0 or h_in >= h_i:
                        continue
                    q = in_seg_off[w_in * h_i + h_in]
                    while in_idx[q] != -1:
                        x += filt[l, k, in_idx[q]] * in_val[q]
                        q += 1
            if x != 0.0:
                out_idx[pos] = j
                out_val[pos] = x
                pos += 1
        out_idx[pos] = -1
        out_val[pos] = 0.0
        pos += 1
    return pos


@njit(nogil=True, cache=True)
def _dense_conv_kernel(inp, filt, s, p, out):
    """Dense cross-correlation; accumulation order fixed as (k, l, c)."""
    w_i = inp.shape[0]
    h_i = inp.shape[1]
    c_i = inp.shape[2]
    w_f = filt.shape[0]
    h_f = filt.shape[1]
    n_h, n_w = out.shape
    for i in range(n_h):
        for j in range(n_w):
            x = np.float32(0.0)
            for k in range(h_f):
                h_in = k + i * s - p
                if h_in < 0 or h_in >= h_i:
                    continue
                for l in range(w_f):
                    w_in = l + j * s - p
                    if w_in < 0 or w_in >= w_i:
                        continue
                    for c in range(c_i):
                        x += inp[w_in, h_in, c] * filt[l, k, c]
            out[i, j] = x
    return out


@njit(nogil=True, cache=True)
def _transpose_segments_kernel(idx, val, start, end, n_new_segs, base, new_idx, new_val, new_off):
    """Re-bucket one segment run by node index: count, scatter, then sentinels.

    Reads nodes in [start, end), writes from position ``base``; ``new_off``
    receives the n_new_segs segment starts.  Returns the write end position.
    """
    counts = np.zeros(n_new_segs, np.int64)
    for p in range(start, end):
        if idx[p] != -1:
            counts[idx[p]] += 1
    cursor = np.empty(n_new_segs, np.int64)
    pos = base
    for i in range(n_new_segs):
        new_off[i] = pos
        cursor[i] = pos
        pos += counts[i] + 1
    seg = 0
    for p in range(start, end):
        j = idx[p]
        if j == -1:
            seg += 1
        else:
            new_idx[cursor[j]] = seg
            new_val[cursor[j]] = val[p]
            cursor[j] += 1
    for i in range(n_new_segs):
        new_idx[cursor[i]] = -1
        new_val[cursor[i]] = 0.0
    return pos


@njit(nogil=True, cache=True)
def _gather_chw_kernel(mid_idx, mid_val, mid_off, c_n, h_n, w_n, out_idx, out_val, out_seg_off):
    """Walk per-channel column segments in (w, h, c) order, emitting channel fibers."""
    pos = 0
    cur = np.empty(c_n, np.int64)
    for w in range(w_n):
        for c in range(c_n):
            cur[c] = mid_off[c, w]
        for h in range(h_n):
            out_seg_off[w * h_n + h] = pos
            for c in range(c_n):
                p = cur[c]
                if mid_idx[p] == h:
                    out_idx[pos] = c
                    out_val[pos] = mid_val[p]
                    pos += 1
                    cur[c] = p + 1
            out_idx[pos] = -1
            out_val[pos] = 0.0
            pos += 1
    return pos


def dot_dense_sparse(d: np.ndarray, s: SparseVector) -> float:
    """Inner product of a dense fiber with a sparse vector, in node order."""
    d = np.ascontiguousarray(d, dtype=np.float32)
    s.validate()
    if s.length > len(d):
        raise FormatError(f"sparse length {s.length} exceeds dense length {len(d)}")
    return float(_dot_kernel(d, s.nodes["index"], s.nodes["value"], 0))


def _require_order3(t: SparseTensor3, order: AxisOrder3, what: str) -> None:
    if t.order is not order:
        raise FormatError(f"{what} must be stored {order.name}, got {t.order.name}")


def conv_dense_input_sparse_filter(
    t_in: DenseTensor3, t_f: SparseTensor3, geom: ConvGeometry
) -> np.ndarray:
    """Convolve a dense input with one sparse filter; returns a dense (n_h, n_w) matrix."""
    _require_order3(t_f, AxisOrder3.CHW, "filter tensor")
    _check_conv_args(t_in.dims, t_f.dims, geom)
    out = np.empty((geom.n_h, geom.n_w), dtype=np.float32)
    _conv_filter_sparse_kernel(
        t_in.as_whc(),
        t_f.nodes["index"],
        t_f.nodes["value"],
        t_f.segment_offsets,
        0,
        t_f.dims[2],
        t_f.dims[1],
        geom.stride,
        geom.padding,
        out,
    )
    return out


def conv_dense_input_sparse_filter_counted(
    t_in: DenseTensor3, t_f: SparseTensor3, geom: ConvGeometry
) -> tuple[np.ndarray, int]:
    """Instrumented variant: identical result plus the exact multiply count."""
    _require_order3(t_f, AxisOrder3.CHW, "filter tensor")
    _check_conv_args(t_in.dims, t_f.dims, geom)
    out = np.empty((geom.n_h, geom.n_w), dtype=np.float32)
    count = _conv_filter_sparse_counted_kernel(
        t_in.as_whc(),
        t_f.nodes["index"],
        t_f.nodes["value"],
        t_f.segment_offsets,
        0,
        t_f.dims[2],
        t_f.dims[1],
        geom.stride,
        geom.padding,
        out,
    )
    return out, int(count)


def conv_sparse_input_dense_filter(
    t_in: SparseTensor3, t_f: DenseTensor3, geom: ConvGeometry
) -> SparseMatrix:
    """Convolve a sparse input with a dense filter; exact zeros are not stored."""
    _require_order3(t_in, AxisOrder3.CHW, "input tensor")
    _check_conv_args(t_in.dims, t_f.dims, geom)
    n_h, n_w = geom.n_h, geom.n_w
    buf = np.empty(n_h * (n_w + 1), dtype=NODE_DTYPE)
    seg_off = np.empty(n_h, dtype=np.int64)
    c_f, h_f, w_f = t_f.dims
    used = _conv_input_sparse_kernel(
        t_in.nodes["index"],
        t_in.nodes["value"],
        t_in.segment_offsets,
        t_in.dims[1],
        t_in.dims[2],
        t_f.data.reshape(w_f, h_f, c_f),
        geom.stride,
        geom.padding,
        n_h,
        n_w,
        buf["index"],
        buf["value"],
        seg_off,
    )
    return SparseMatrix(
        order=AxisOrder2.WH,
        n_rows=n_h,
        n_cols=n_w,
        nodes=buf[:used].copy(),
        segment_offsets=seg_off,
    )


def dense_conv_reference(t_in: DenseTensor3, t_f: DenseTensor3, geom: ConvGeometry) -> np.ndarray:
    """Triple-loop dense cross-correlation; the oracle both sparse variants match."""
    _check_conv_args(t_in.dims, t_f.dims, geom)
    c_f, h_f, w_f = t_f.dims
    out = np.empty((geom.n_h, geom.n_w), dtype=np.float32)
    _dense_conv_kernel(
        t_in.as_whc(), t_f.data.reshape(w_f, h_f, c_f), geom.stride, geom.padding, out
    )
    return out


def _check_conv_args(input_dims, filter_dims, geom: ConvGeometry) -> None:
    if tuple(input_dims) != tuple(geom.input_dims):
        raise ValueError(f"input dims {input_dims} != geometry {geom.input_dims}")
    if tuple(filter_dims) != tuple(geom.filter_dims):
        raise ValueError(f"filter dims {filter_dims} != geometry {geom.filter_dims}")


def transpose_matrix(m: SparseMatrix) -> SparseMatrix:
    """Switch storage order (WH <-> HW) via count, scatter, and sentinel passes."""
    n_new_segs = m.segment_length
    buf = np.empty(m.nnz + n_new_segs, dtype=NODE_DTYPE)
    new_off = np.empty(n_new_segs, dtype=np.int64)
    _transpose_segments_kernel(
        m.nodes["index"],
        m.nodes["value"],
        0,
        len(m.nodes),
        n_new_segs,
        0,
        buf["index"],
        buf["value"],
        new_off,
    )
    flipped = AxisOrder2.HW if m.order is AxisOrder2.WH else AxisOrder2.WH
    return SparseMatrix(
        order=flipped, n_rows=m.n_rows, n_cols=m.n_cols, nodes=buf, segment_offsets=new_off
    )


def transpose_tensor3(t: SparseTensor3) -> SparseTensor3:
    """Reorder a WHC tensor into CHW without touching any value.

    Each per-channel matrix is first re-bucketed WH -> HW, then one gather
    pass walks all channels per (w, h) position emitting channel fibers.
    """
    _require_order3(t, AxisOrder3.WHC, "tensor")
    c_n, h_n, w_n = t.dims
    nnz = t.nnz
    mid = np.empty(nnz + c_n * w_n, dtype=NODE_DTYPE)
    mid_off = np.empty((c_n, w_n), dtype=np.int64)
    pos = 0
    idx, val = t.nodes["index"], t.nodes["value"]
    for c in range(c_n):
        end = t.matrix_offsets[c + 1] if c + 1 < c_n else len(t.nodes)
        pos = _transpose_segments_kernel(
            idx, val, t.matrix_offsets[c], end, w_n, pos, mid["index"], mid["value"], mid_off[c]
        )
    out = np.empty(nnz + h_n * w_n, dtype=NODE_DTYPE)
    out_seg_off = np.empty(h_n * w_n, dtype=np.int64)
    _gather_chw_kernel(
        mid["index"], mid["value"], mid_off, c_n, h_n, w_n, out["index"], out["value"], out_seg_off
    )
    return SparseTensor3(
        order=AxisOrder3.CHW,
        dims=t.dims,
        nodes=out,
        matrix_offsets=out_seg_off[::h_n].copy(),
        segment_offsets=out_seg_off,
    )
