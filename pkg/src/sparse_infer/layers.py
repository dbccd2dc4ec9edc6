"""Network layers assembled from the sparse kernels.

Two forward paths exist for a convolutional layer with sparse filters:
strategy I convolves with each filter independently (parallelizable across
filters) and then restacks, while strategy II writes every output element
directly in one fused loop nest.  Both accumulate each output element in
the identical order, so their results are bit-equal; an auto mode switches
on batch size.

The sparse-input path keeps tensors in node format end to end and can fold
a directly following pooling layer into the convolution via a running
per-region tracker, avoiding the materialized intermediate.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit

from . import kernels
from .kernels import ConvGeometry, _window_acc
from .sparse_core import (
    NODE_DTYPE,
    AxisOrder2,
    AxisOrder3,
    DenseTensor3,
    SparseMatrix,
    SparseTensor3,
    SparseTensor4,
    _build_segmented,
    densify_tensor3,
    rebuild_tensor3,
    segment_ids,
    sparsify_tensor3,
)

POOL_MAX = "max"
POOL_AVG = "avg"


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; parameter values live in the weights."""

    kind: str  # conv | maxpool | avgpool | relu | leaky_relu | batchnorm | pad
    out_channels: int = 0  # conv only
    kernel: tuple[int, int] = (0, 0)  # conv filter (H_F, W_F) or pool window (H_P, W_P)
    stride: int = 1
    padding: int = 0  # conv padding, or border width for pad layers
    slope: float = 0.0  # leaky_relu only

    def out_dims(self, in_dims: tuple[int, int, int]) -> tuple[int, int, int]:
        """Shape contract: output dims for the given input dims, or ValueError."""
        c, h, w = in_dims
        if self.kind == "conv":
            geom = ConvGeometry(
                input_dims=in_dims,
                filter_dims=(c,) + self.kernel,
                stride=self.stride,
                padding=self.padding,
            )
            return (self.out_channels, geom.n_h, geom.n_w)
        if self.kind in ("maxpool", "avgpool"):
            h_p, w_p = self.kernel
            if h_p <= 0 or w_p <= 0:
                raise ValueError(f"pool window must be positive, got {self.kernel}")
            if h % h_p or w % w_p:
                raise ValueError(f"input {h}x{w} not divisible by pool window {h_p}x{w_p}")
            return (c, h // h_p, w // w_p)
        if self.kind == "pad":
            return (c, h + 2 * self.padding, w + 2 * self.padding)
        if self.kind in ("relu", "leaky_relu", "batchnorm"):
            return in_dims
        raise ValueError(f"unknown layer kind {self.kind!r}")


class StrategyKind(Enum):
    STRATEGY_I = "1"
    STRATEGY_II = "2"
    AUTO = "auto"


@dataclass(frozen=True)
class ForwardStrategy:
    """Strategy selection for sparse-filter conv layers; auto switches on batch size."""

    kind: StrategyKind = StrategyKind.AUTO
    threshold: int = 4

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("auto-switch threshold must be positive")

    def resolve(self, batch_size: int) -> StrategyKind:
        if self.kind is not StrategyKind.AUTO:
            return self.kind
        if batch_size <= self.threshold:
            return StrategyKind.STRATEGY_I
        return StrategyKind.STRATEGY_II


@dataclass(frozen=True)
class BatchNormParams:
    """Per-channel inference-mode statistics and affine terms.

    Everything is float32, epsilon included: the weight file stores f32, so
    holding a wider epsilon would break round-trip exactness.
    """

    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("scale", "shift", "mean", "var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        object.__setattr__(self, "epsilon", float(np.float32(self.epsilon)))

    def validate(self, channels: int) -> None:
        for name in ("scale", "shift", "mean", "var"):
            arr = getattr(self, name)
            if arr.shape != (channels,):
                raise ValueError(f"batchnorm {name} must have shape ({channels},)")
        if np.any(self.var + np.float32(self.epsilon) <= 0):
            raise ValueError("batchnorm requires var + epsilon > 0 per channel")


_pool_lock = threading.Lock()
_pools: dict[int, ThreadPoolExecutor] = {}


def _executor(workers: int) -> ThreadPoolExecutor:
    """Process-lifetime pools, one per worker count; per-call creation would
    dwarf the kernels at desk scale."""
    with _pool_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = _pools[workers] = ThreadPoolExecutor(max_workers=workers)
    return pool


def _map_tasks(fn, n: int, workers: int) -> None:
    """Run fn(0..n-1); worker count never affects results, only scheduling.

    Indices go to workers in contiguous chunks, one task per worker: the
    per-index work can be tens of microseconds, so per-index dispatch would
    cost more than it buys.
    """
    if workers <= 1 or n <= 1:
        for i in range(n):
            fn(i)
        return
    workers = min(workers, n)
    bounds = [n * k // workers for k in range(workers + 1)]

    def chunk(k: int) -> None:
        for i in range(bounds[k], bounds[k + 1]):
            fn(i)

    list(_executor(workers).map(chunk, range(workers)))


@njit(nogil=True, cache=True)
def _conv_all_filters_kernel(inp, idx, val, seg_off, segs_per_filter, w_f, h_f, s, p, bias, out):
    """Direct output construction: every element accumulated in place, no restack."""
    n_w, n_h, n_f = out.shape
    for w in range(n_w):
        for h in range(n_h):
            for f in range(n_f):
                x = _window_acc(
                    inp, idx, val, seg_off, f * segs_per_filter, w_f, h_f, w * s - p, h * s - p
                )
                out[w, h, f] = x + bias[f]


@njit(nogil=True, cache=True)
def _merged_conv_pool_kernel(
    in_idx,
    in_val,
    in_seg_off,
    h_i,
    w_i,
    filt,
    s,
    p,
    n_h_conv,
    n_w_conv,
    h_p,
    w_p,
    use_max,
    out_idx,
    out_val,
    out_seg_off,
):
    """Convolution rows stream through a running per-region aggregate buffer."""
    w_f, h_f, _ = filt.shape
    n_w_pool = n_w_conv // w_p
    area = np.float32(h_p * w_p)
    track = np.empty(n_w_pool, np.float32)
    if use_max:
        track[:] = -np.inf
    else:
        track[:] = 0.0
    pos = 0
    out_row = 0
    for i in range(n_h_conv):
        for j in range(n_w_conv):
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
            r = j // w_p
            if use_max:
                if x > track[r]:
                    track[r] = x
            else:
                track[r] += x
        if (i + 1) % h_p == 0:
            out_seg_off[out_row] = pos
            for r in range(n_w_pool):
                v = track[r] if use_max else track[r] / area
                if v != 0.0:
                    out_idx[pos] = r
                    out_val[pos] = v
                    pos += 1
                track[r] = -np.inf if use_max else 0.0
            out_idx[pos] = -1
            out_val[pos] = 0.0
            pos += 1
            out_row += 1
    return pos


@njit(nogil=True, cache=True)
def _pool_dense_kernel(inp, h_p, w_p, use_max, out):
    """Non-overlapping window pooling; regions accumulate row-major like the fused path."""
    w_o, h_o, c_n = out.shape
    area = np.float32(h_p * w_p)
    for wo in range(w_o):
        for ho in range(h_o):
            for c in range(c_n):
                if use_max:
                    acc = np.float32(-np.inf)
                    for ph in range(h_p):
                        for pw in range(w_p):
                            v = inp[wo * w_p + pw, ho * h_p + ph, c]
                            if v > acc:
                                acc = v
                    out[wo, ho, c] = acc
                else:
                    acc = np.float32(0.0)
                    for ph in range(h_p):
                        for pw in range(w_p):
                            acc += inp[wo * w_p + pw, ho * h_p + ph, c]
                    out[wo, ho, c] = acc / area


def _stack_to_chw(mats: list[np.ndarray], bias: np.ndarray) -> DenseTensor3:
    """Stack per-filter matrices along the channel axis and relayout channel-innermost."""
    n_h, n_w = mats[0].shape
    whc = np.ascontiguousarray(np.stack(mats, axis=0).transpose(2, 1, 0))
    whc += bias
    return DenseTensor3(dims=(len(mats), n_h, n_w), data=whc.ravel())


def conv_forward_strategy_I(
    t_in: DenseTensor3,
    filters: SparseTensor4,
    stride: int,
    padding: int,
    bias: np.ndarray,
    workers: int = 1,
) -> DenseTensor3:
    """Per-filter convolutions, stacked and relayouted; parallel across filters."""
    geom = ConvGeometry(t_in.dims, filters.dims[1:], stride, padding)
    n = filters.count
    mats: list = [None] * n

    def task(f: int) -> None:
        mats[f] = kernels.conv_dense_input_sparse_filter(t_in, filters.tensor(f), geom)

    _map_tasks(task, n, workers)
    return _stack_to_chw(mats, bias)


def conv_forward_strategy_II(
    t_in: DenseTensor3, filters: SparseTensor4, stride: int, padding: int, bias: np.ndarray
) -> DenseTensor3:
    """Fused loop nest writing the output tensor directly; no intermediate matrices."""
    geom = ConvGeometry(t_in.dims, filters.dims[1:], stride, padding)
    n = filters.count
    _, h_f, w_f = filters.dims[1:]
    out = np.empty((geom.n_w, geom.n_h, n), dtype=np.float32)
    _conv_all_filters_kernel(
        t_in.as_whc(),
        filters.nodes["index"],
        filters.nodes["value"],
        np.ascontiguousarray(filters.segment_offsets).ravel(),
        h_f * w_f,
        w_f,
        h_f,
        stride,
        padding,
        bias,
        out,
    )
    return DenseTensor3(dims=(n, geom.n_h, geom.n_w), data=out.ravel())


def conv_forward_dense(
    t_in: DenseTensor3,
    filters: list[DenseTensor3],
    stride: int,
    padding: int,
    bias: np.ndarray,
    workers: int = 1,
) -> DenseTensor3:
    """All-dense convolution layer: the 100%-density baseline path."""
    geom = ConvGeometry(t_in.dims, filters[0].dims, stride, padding)
    mats: list = [None] * len(filters)

    def task(f: int) -> None:
        mats[f] = kernels.dense_conv_reference(t_in, filters[f], geom)

    _map_tasks(task, len(filters), workers)
    return _stack_to_chw(mats, bias)


def merged_conv_pool(
    t_in: SparseTensor3,
    t_f: DenseTensor3,
    stride: int,
    pool: tuple[int, int],
    mode: str,
    padding: int = 0,
) -> SparseMatrix:
    """Convolve and pool in one pass; exactly equal to conv followed by pooling."""
    geom = ConvGeometry(t_in.dims, t_f.dims, stride, padding)
    h_p, w_p = pool
    if h_p <= 0 or w_p <= 0:
        raise ValueError(f"pool window must be positive, got {pool}")
    if geom.n_h % h_p or geom.n_w % w_p:
        raise ValueError(f"conv output {geom.n_h}x{geom.n_w} not divisible by pool {h_p}x{w_p}")
    if mode not in (POOL_MAX, POOL_AVG):
        raise ValueError(f"unknown pool mode {mode!r}")
    n_h_pool, n_w_pool = geom.n_h // h_p, geom.n_w // w_p
    buf = np.empty(n_h_pool * (n_w_pool + 1), dtype=NODE_DTYPE)
    seg_off = np.empty(n_h_pool, dtype=np.int64)
    c_f, h_f, w_f = t_f.dims
    used = _merged_conv_pool_kernel(
        t_in.nodes["index"],
        t_in.nodes["value"],
        t_in.segment_offsets,
        t_in.dims[1],
        t_in.dims[2],
        t_f.data.reshape(w_f, h_f, c_f),
        stride,
        padding,
        geom.n_h,
        geom.n_w,
        h_p,
        w_p,
        mode == POOL_MAX,
        buf["index"],
        buf["value"],
        seg_off,
    )
    return SparseMatrix(
        order=AxisOrder2.WH,
        n_rows=n_h_pool,
        n_cols=n_w_pool,
        nodes=buf[:used].copy(),
        segment_offsets=seg_off,
    )


def conv_forward_sparse_input(
    t_in: SparseTensor3,
    filters: list[DenseTensor3],
    stride: int,
    padding: int,
    bias: np.ndarray,
    workers: int = 1,
    fused_pool: tuple[int, int] | None = None,
    pool_mode: str = POOL_MAX,
) -> SparseTensor3 | DenseTensor3:
    """Sparse-input convolution layer, optionally with pooling folded in.

    A nonzero bias would materialize a node for every output element, so in
    that case the layer emits a dense tensor instead and the pipeline
    continues dense.
    """
    geom = ConvGeometry(t_in.dims, filters[0].dims, stride, padding)
    mats: list = [None] * len(filters)

    if fused_pool is None:

        def task(f: int) -> None:
            mats[f] = kernels.conv_sparse_input_dense_filter(t_in, filters[f], geom)

    else:

        def task(f: int) -> None:
            mats[f] = merged_conv_pool(t_in, filters[f], stride, fused_pool, pool_mode, padding)

    _map_tasks(task, len(filters), workers)
    stacked = stack_matrices_whc(mats)
    out = kernels.transpose_tensor3(stacked)
    if np.any(bias != 0):
        dense = densify_tensor3(out)
        dense.as_whc()[...] += bias.astype(np.float32)
        return dense
    return out


def stack_matrices_whc(mats: list[SparseMatrix]) -> SparseTensor3:
    """Treat each WH matrix as one channel of a WHC tensor sharing a buffer."""
    n_rows, n_cols = mats[0].n_rows, mats[0].n_cols
    for m in mats:
        if m.order is not AxisOrder2.WH or (m.n_rows, m.n_cols) != (n_rows, n_cols):
            raise ValueError("stacked matrices must all be WH with equal dims")
    sizes = [len(m.nodes) for m in mats]
    bases = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return SparseTensor3(
        order=AxisOrder3.WHC,
        dims=(len(mats), n_rows, n_cols),
        nodes=np.concatenate([m.nodes for m in mats]),
        matrix_offsets=bases,
        segment_offsets=np.concatenate([m.segment_offsets + b for m, b in zip(mats, bases)]),
    )


def pool_standalone(t: DenseTensor3, pool: tuple[int, int], mode: str) -> DenseTensor3:
    """Per-channel non-overlapping window pooling with stride equal to the window."""
    c, h, w = t.dims
    h_p, w_p = pool
    if h_p <= 0 or w_p <= 0:
        raise ValueError(f"pool window must be positive, got {pool}")
    if h % h_p or w % w_p:
        raise ValueError(f"input {h}x{w} not divisible by pool window {h_p}x{w_p}")
    if mode not in (POOL_MAX, POOL_AVG):
        raise ValueError(f"unknown pool mode {mode!r}")
    out = np.empty((w // w_p, h // h_p, c), dtype=np.float32)
    _pool_dense_kernel(t.as_whc(), h_p, w_p, mode == POOL_MAX, out)
    return DenseTensor3(dims=(c, h // h_p, w // w_p), data=out.ravel())


def pool_sparse(t: SparseTensor3, pool: tuple[int, int], mode: str) -> SparseTensor3:
    """Standalone pooling for node-format tensors (densify, pool, re-sparsify)."""
    return sparsify_tensor3(pool_standalone(densify_tensor3(t), pool, mode), t.order)


def apply_activation(t, kind: str, slope: float = 0.0):
    """ReLU or LeakyReLU, preserving the input representation.

    On node-format tensors ReLU drops non-positive nodes (density shrinks);
    LeakyReLU rescales negative nodes in place, so a positive slope keeps
    the nonzero support intact.
    """
    if kind not in ("relu", "leaky_relu"):
        raise ValueError(f"unknown activation {kind!r}")
    if slope < 0:
        raise ValueError("leaky slope must be non-negative")
    s = np.float32(slope)
    if isinstance(t, DenseTensor3):
        if kind == "relu":
            return DenseTensor3(dims=t.dims, data=np.maximum(t.data, np.float32(0.0)))
        return DenseTensor3(dims=t.dims, data=np.where(t.data > 0, t.data, s * t.data))
    if isinstance(t, SparseTensor3):
        idx = t.nodes["index"]
        vals = t.nodes["value"][idx != -1]
        if kind == "relu":
            return rebuild_tensor3(t, vals, vals > 0)
        new_vals = np.where(vals > 0, vals, s * vals)
        return rebuild_tensor3(t, new_vals, new_vals != 0)
    raise TypeError(f"apply_activation does not support {type(t).__name__}")


def apply_batchnorm(t, params: BatchNormParams):
    """Inference-mode batch normalization with fixed per-channel statistics.

    Zero entries map to nonzero values in general, so the node-format path
    densifies first and re-sparsifies after; the result is effectively
    fully dense.
    """
    dims = t.dims
    params.validate(dims[0])
    if isinstance(t, SparseTensor3):
        return sparsify_tensor3(apply_batchnorm(densify_tensor3(t), params), t.order)
    if not isinstance(t, DenseTensor3):
        raise TypeError(f"apply_batchnorm does not support {type(t).__name__}")
    std = np.sqrt(params.var + np.float32(params.epsilon))
    out = ((t.as_whc() - params.mean) / std) * params.scale + params.shift
    return DenseTensor3(dims=dims, data=np.ascontiguousarray(out, dtype=np.float32).ravel())


def pad_tensor(t, p: int):
    """Zero-pad the spatial extents by ``p`` on every side."""
    if p < 0:
        raise ValueError("pad width must be non-negative")
    if p == 0:
        return t
    if isinstance(t, DenseTensor3):
        c, h, w = t.dims
        whc = np.pad(t.as_whc(), ((p, p), (p, p), (0, 0)))
        return DenseTensor3(dims=(c, h + 2 * p, w + 2 * p), data=whc.ravel())
    if isinstance(t, SparseTensor3):
        if t.order is not AxisOrder3.CHW:
            return sparsify_tensor3(pad_tensor(densify_tensor3(t), p), t.order)
        # channel fibers keep their node indices; only segment placement shifts
        c, h, w = t.dims
        idx = t.nodes["index"]
        data = idx != -1
        segs = segment_ids(t)
        new_h, new_w = h + 2 * p, w + 2 * p
        new_segs = (segs // h + p) * new_h + (segs % h + p)
        buf, seg_off = _build_segmented(new_segs, idx[data], t.nodes["value"][data], new_h * new_w)
        return SparseTensor3(
            order=t.order,
            dims=(c, new_h, new_w),
            nodes=buf,
            matrix_offsets=seg_off[::new_h].copy(),
            segment_offsets=seg_off,
        )
    raise TypeError(f"pad_tensor does not support {type(t).__name__}")
