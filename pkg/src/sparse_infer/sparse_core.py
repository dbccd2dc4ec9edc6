"""Node-based sparse tensor formats and conversions.

Every sparse container in this package stores its entries as one contiguous
buffer of (index, value) nodes.  A node's index is the coordinate along the
innermost stored axis; a node with index -1 is a sentinel terminating one
segment (a 1-D fiber).  Offset tables locate the first node of each segment
so random access and loop termination both stay O(1).

Axis-order tags name the storage nesting innermost-first: in ``CHW`` the
channel coordinate is the node index, segments are channel fibers at fixed
(w, h), and segments are laid out h-fastest inside w.  A dense 3-D tensor
uses the matching memory layout: element (c, h, w) lives at offset
``(w*H + h)*C + c``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

NODE_DTYPE = np.dtype([("index", "<i4"), ("value", "<f4")])

MAX_EXTENT = 2**31 - 1  # node indices are int32; -1 is reserved for sentinels


class FormatError(ValueError):
    """Malformed sparse structure, unsupported order tag, or bad serialization."""


class AxisOrder2(Enum):
    """Storage orders for sparse matrices, named innermost axis first.

    WH: node index = column (w), one segment per row (h).
    HW: node index = row (h), one segment per column (w).
    """

    WH = 0
    HW = 1


class AxisOrder3(Enum):
    """Storage orders for sparse 3-D tensors, named innermost axis first.

    The first letter is the axis stored as each node's index, the last is
    the outermost layout axis.  CHW therefore means channel-fiber segments
    laid out h-fastest, w-outermost.  Tag values are the serialization ids.
    """

    WHC = 0
    WCH = 1
    HWC = 2
    HCW = 3
    CHW = 4
    CWH = 5

    @property
    def axes(self) -> tuple[int, int, int]:
        """(inner, mid, outer) as canonical axis ids: 0=C, 1=H, 2=W."""
        return _ORDER3_AXES[self]


_AXIS_ID = {"c": 0, "h": 1, "w": 2}
_ORDER3_AXES = {o: tuple(_AXIS_ID[ch] for ch in o.name.lower()) for o in AxisOrder3}


@dataclass(frozen=True)
class Node:
    """One stored entry: coordinate along the innermost axis plus its value."""

    index: int
    value: float

    @property
    def is_sentinel(self) -> bool:
        return self.index == -1


def _as_node_buffer(nodes) -> np.ndarray:
    buf = np.asarray(nodes)
    if buf.dtype != NODE_DTYPE:
        raise FormatError(f"node buffer must have dtype {NODE_DTYPE}, got {buf.dtype}")
    return buf


@dataclass(frozen=True)
class SparseVector:
    """Index-sorted nodes of one fiber, terminated by a single sentinel."""

    length: int
    nodes: np.ndarray

    def validate(self) -> None:
        idx = self.nodes["index"]
        if len(idx) == 0 or idx[-1] != -1:
            raise FormatError("sparse vector must end with a sentinel node")
        data = idx[:-1]
        if np.any(data == -1):
            raise FormatError("sentinel found before end of sparse vector")
        if np.any(data < 0) or np.any(data >= self.length):
            raise FormatError("node index out of range")
        if np.any(np.diff(data) <= 0):
            raise FormatError("node indices must strictly increase")

    @property
    def nnz(self) -> int:
        return len(self.nodes) - 1

    @classmethod
    def from_dense(cls, values) -> "SparseVector":
        arr = np.asarray(values, dtype=np.float32)
        (nz,) = np.nonzero(arr)
        buf = np.empty(len(nz) + 1, dtype=NODE_DTYPE)
        buf["index"][:-1] = nz
        buf["value"][:-1] = arr[nz]
        buf[-1] = (-1, 0.0)
        return cls(length=len(arr), nodes=buf)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.length, dtype=np.float32)
        data = self.nodes[:-1]
        out[data["index"]] = data["value"]
        return out


@dataclass(frozen=True)
class DenseTensor3:
    """Contiguous float32 tensor with dims (C, H, W), channel-innermost layout."""

    dims: tuple[int, int, int]
    data: np.ndarray

    def validate(self) -> None:
        c, h, w = self.dims
        if self.data.dtype != np.float32 or self.data.ndim != 1:
            raise FormatError("dense tensor payload must be a flat float32 array")
        if len(self.data) != c * h * w:
            raise FormatError(f"payload length {len(self.data)} != C*H*W = {c * h * w}")
        if max(self.dims) > MAX_EXTENT:
            raise FormatError(f"axis extents are limited to {MAX_EXTENT}")

    @classmethod
    def from_array(cls, arr) -> "DenseTensor3":
        """Build from a (C, H, W)-indexed array; values are cast to float32."""
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != 3:
            raise FormatError(f"expected a 3-D array, got ndim={a.ndim}")
        c, h, w = a.shape
        return cls(dims=(c, h, w), data=np.ascontiguousarray(a.transpose(2, 1, 0)).ravel())

    def to_array(self) -> np.ndarray:
        """Return a (C, H, W)-indexed copy."""
        c, h, w = self.dims
        return np.ascontiguousarray(self.data.reshape(w, h, c).transpose(2, 1, 0))

    def as_whc(self) -> np.ndarray:
        """Zero-copy view shaped (W, H, C); axis order matches memory layout."""
        c, h, w = self.dims
        return self.data.reshape(w, h, c)


@dataclass(frozen=True)
class SparseMatrix:
    """Sparse matrix as sentinel-terminated segments over one node buffer."""

    order: AxisOrder2
    n_rows: int
    n_cols: int
    nodes: np.ndarray
    segment_offsets: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.n_rows if self.order is AxisOrder2.WH else self.n_cols

    @property
    def segment_length(self) -> int:
        """Logical length of each segment (the innermost-axis extent)."""
        return self.n_cols if self.order is AxisOrder2.WH else self.n_rows

    @property
    def nnz(self) -> int:
        return len(self.nodes) - self.n_segments

    def validate(self) -> None:
        _validate_segments(self.nodes, self.segment_offsets, self.n_segments, self.segment_length)


@dataclass(frozen=True)
class SparseTensor3:
    """Sparse 3-D tensor: a list of sparse matrices sharing one node buffer.

    ``matrix_offsets`` has one entry per outermost-axis slice;
    ``segment_offsets`` one per (outer, mid) pair, mid-fastest.
    """

    order: AxisOrder3
    dims: tuple[int, int, int]
    nodes: np.ndarray
    matrix_offsets: np.ndarray
    segment_offsets: np.ndarray

    def extents(self) -> tuple[int, int, int]:
        """(inner, mid, outer) extents for this order."""
        i, m, o = self.order.axes
        return self.dims[i], self.dims[m], self.dims[o]

    @property
    def n_segments(self) -> int:
        _, mid, outer = self.extents()
        return mid * outer

    @property
    def nnz(self) -> int:
        return len(self.nodes) - self.n_segments

    def validate(self) -> None:
        inner, mid, outer = self.extents()
        if len(self.matrix_offsets) != outer:
            raise FormatError(
                f"matrix offset count {len(self.matrix_offsets)} != outer extent {outer}"
            )
        if np.any(self.matrix_offsets != self.segment_offsets[::mid]):
            raise FormatError("matrix offsets disagree with segment offsets")
        _validate_segments(self.nodes, self.segment_offsets, mid * outer, inner)


@dataclass(frozen=True)
class SparseTensor4:
    """Batch of sparse 3-D tensors (inputs or a filter set) in one buffer.

    All offset tables are global positions into the shared node buffer;
    per-constituent tables are rows of the 2-D arrays.
    """

    order: AxisOrder3
    dims: tuple[int, int, int, int]
    nodes: np.ndarray
    tensor_offsets: np.ndarray
    matrix_offsets: np.ndarray
    segment_offsets: np.ndarray

    @property
    def count(self) -> int:
        return self.dims[0]

    @property
    def nnz(self) -> int:
        return len(self.nodes) - self.segment_offsets.size

    def tensor(self, i: int) -> SparseTensor3:
        """Constituent tensor i; node slice is a view, offsets are localized."""
        base = self.tensor_offsets[i]
        end = self.tensor_offsets[i + 1] if i + 1 < self.count else len(self.nodes)
        return SparseTensor3(
            order=self.order,
            dims=self.dims[1:],
            nodes=self.nodes[base:end],
            matrix_offsets=self.matrix_offsets[i] - base,
            segment_offsets=self.segment_offsets[i] - base,
        )

    def validate(self) -> None:
        if len(self.tensor_offsets) != self.count:
            raise FormatError("tensor offset count != batch extent")
        if np.any(np.diff(self.tensor_offsets) <= 0):
            raise FormatError("tensor offsets must strictly increase")
        for i in range(self.count):
            self.tensor(i).validate()

    @classmethod
    def stack(cls, tensors: list[SparseTensor3]) -> "SparseTensor4":
        if not tensors:
            raise FormatError("cannot stack an empty tensor list")
        order, dims = tensors[0].order, tensors[0].dims
        for t in tensors:
            if t.order is not order or t.dims != dims:
                raise FormatError("stacked tensors must share order and dims")
        sizes = [len(t.nodes) for t in tensors]
        bases = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        return cls(
            order=order,
            dims=(len(tensors),) + dims,
            nodes=np.concatenate([t.nodes for t in tensors]),
            tensor_offsets=bases,
            matrix_offsets=np.stack([t.matrix_offsets + b for t, b in zip(tensors, bases)]),
            segment_offsets=np.stack([t.segment_offsets + b for t, b in zip(tensors, bases)]),
        )


def _validate_segments(nodes, offsets, n_segments, segment_length) -> None:
    idx = _as_node_buffer(nodes)["index"]
    offsets = np.asarray(offsets)
    if len(offsets) != n_segments:
        raise FormatError(f"segment offset count {len(offsets)} != {n_segments}")
    if int(np.count_nonzero(idx == -1)) != n_segments:
        raise FormatError("sentinel count must equal segment count")
    if n_segments == 0:
        if len(idx) != 0:
            raise FormatError("nodes present but no segments")
        return
    if offsets[0] != 0 or np.any(np.diff(offsets) <= 0):
        raise FormatError("segment offsets must start at 0 and strictly increase")
    ends = np.append(offsets[1:], len(idx))
    if np.any(ends <= offsets):
        raise FormatError("empty segment storage (missing sentinel)")
    if np.any(idx[ends - 1] != -1):
        raise FormatError("every segment must be sentinel-terminated")
    data = idx[idx != -1]
    if data.size and (data.min() < 0 or data.max() >= segment_length):
        raise FormatError(f"node index out of [0, {segment_length})")
    step = np.diff(idx)
    if np.any((step <= 0) & (idx[1:] != -1) & (idx[:-1] != -1)):
        raise FormatError("node indices must strictly increase within a segment")


def _build_segmented(seg_ids, inner_idx, values, n_segments) -> tuple[np.ndarray, np.ndarray]:
    """Assemble a node buffer + offsets from per-entry segment ids (pre-sorted)."""
    counts = np.bincount(seg_ids, minlength=n_segments).astype(np.int64)
    offsets = np.zeros(n_segments, dtype=np.int64)
    np.cumsum(counts[:-1] + 1, out=offsets[1:])
    buf = np.empty(len(inner_idx) + n_segments, dtype=NODE_DTYPE)
    buf["index"] = -1
    buf["value"] = 0.0
    starts = np.cumsum(counts) - counts
    pos = offsets[seg_ids] + (np.arange(len(inner_idx)) - starts[seg_ids])
    buf["index"][pos] = inner_idx
    buf["value"][pos] = values
    return buf, offsets


def sparsify_tensor3(t: DenseTensor3, order: AxisOrder3) -> SparseTensor3:
    """Store exactly the nonzero entries of ``t`` in the requested order."""
    if not isinstance(order, AxisOrder3):
        raise FormatError(f"unsupported order tag: {order!r}")
    t.validate()
    inner_ax, mid_ax, outer_ax = order.axes
    mid, outer = t.dims[mid_ax], t.dims[outer_ax]
    whc = t.as_whc()  # canonical axis ids of whc axes: (2, 1, 0)
    perm = tuple((2, 1, 0).index(a) for a in (outer_ax, mid_ax, inner_ax))
    arranged = whc.transpose(perm)
    o_co, m_co, i_co = np.nonzero(arranged)  # row-major == storage order
    seg_ids = o_co * mid + m_co
    buf, seg_offsets = _build_segmented(seg_ids, i_co, arranged[o_co, m_co, i_co], mid * outer)
    return SparseTensor3(
        order=order,
        dims=t.dims,
        nodes=buf,
        matrix_offsets=seg_offsets[::mid].copy(),
        segment_offsets=seg_offsets,
    )


def densify_tensor3(t: SparseTensor3) -> DenseTensor3:
    """Place every stored entry at its coordinates; everything else is zero."""
    t.validate()
    inner_ax, mid_ax, outer_ax = t.order.axes
    inner, mid, outer = t.extents()
    arranged = np.zeros((outer, mid, inner), dtype=np.float32)
    idx = t.nodes["index"]
    data = idx != -1
    seg_ids = np.repeat(np.arange(mid * outer), np.diff(np.append(t.segment_offsets, len(idx))) - 1)
    arranged[seg_ids // mid, seg_ids % mid, idx[data]] = t.nodes["value"][data]
    perm = tuple((outer_ax, mid_ax, inner_ax).index(a) for a in (2, 1, 0))
    whc = np.ascontiguousarray(arranged.transpose(perm))
    return DenseTensor3(dims=t.dims, data=whc.ravel())


def sparsify_matrix(arr, order: AxisOrder2) -> SparseMatrix:
    """Sparse form of a dense (n_rows, n_cols) float32 matrix."""
    if not isinstance(order, AxisOrder2):
        raise FormatError(f"unsupported order tag: {order!r}")
    a = np.asarray(arr, dtype=np.float32)
    n_rows, n_cols = a.shape
    scan = a if order is AxisOrder2.WH else a.T
    seg_ids, inner_idx = np.nonzero(scan)
    buf, offsets = _build_segmented(seg_ids, inner_idx, scan[seg_ids, inner_idx], len(scan))
    return SparseMatrix(
        order=order, n_rows=n_rows, n_cols=n_cols, nodes=buf, segment_offsets=offsets
    )


def densify_matrix(m: SparseMatrix) -> np.ndarray:
    """Dense (n_rows, n_cols) float32 array with m's entries placed."""
    m.validate()
    out = np.zeros((m.n_segments, m.segment_length), dtype=np.float32)
    idx = m.nodes["index"]
    data = idx != -1
    counts = np.diff(np.append(m.segment_offsets, len(idx))) - 1
    seg_ids = np.repeat(np.arange(m.n_segments), counts)
    out[seg_ids, idx[data]] = m.nodes["value"][data]
    return out if m.order is AxisOrder2.WH else np.ascontiguousarray(out.T)


def density(t) -> float:
    """Fraction of nonzero entries; dense inputs are scanned value by value."""
    if isinstance(t, DenseTensor3):
        return float(np.count_nonzero(t.data)) / t.data.size
    if isinstance(t, (SparseTensor3, SparseTensor4)):
        total = 1
        for d in t.dims:
            total *= d
        return float(t.nnz) / total
    if isinstance(t, SparseMatrix):
        return float(t.nnz) / (t.n_rows * t.n_cols)
    raise FormatError(f"density() does not support {type(t).__name__}")


def _target_count(target_density: float, total: int) -> int:
    if not 0.0 < target_density <= 1.0:
        raise ValueError(f"target density must be in (0, 1], got {target_density}")
    return int(np.floor(target_density * total + 0.5))  # round half up


def prune_array(arr: np.ndarray, target_density: float, seed) -> np.ndarray:
    """Keep a uniform random subset of entries, zeroing the rest."""
    kept = _target_count(target_density, arr.size)
    rng = np.random.default_rng(seed)
    keep = rng.permutation(arr.size)[:kept]
    out = np.zeros(arr.size, dtype=np.float32)
    out[keep] = arr.ravel()[keep]
    return out.reshape(arr.shape)


def prune_random(t, target_density: float, seed: int):
    """Randomly prune a tensor (or filter set) to the requested density.

    Keeps round(target_density * total) entries chosen uniformly at random;
    deterministic for a fixed seed.  Filter sets are pruned jointly across
    all constituent tensors so the set-wide density hits the target.
    """
    if isinstance(t, DenseTensor3):
        return DenseTensor3(dims=t.dims, data=prune_array(t.data, target_density, seed))
    if isinstance(t, np.ndarray):
        return prune_array(np.asarray(t, dtype=np.float32), target_density, seed)
    if isinstance(t, SparseTensor4):
        stackarr = np.stack([densify_tensor3(t.tensor(i)).as_whc() for i in range(t.count)])
        pruned = prune_array(stackarr, target_density, seed)
        tensors = [
            sparsify_tensor3(DenseTensor3(dims=t.dims[1:], data=pruned[i].ravel()), t.order)
            for i in range(t.count)
        ]
        return SparseTensor4.stack(tensors)
    raise ValueError(f"prune_random() does not support {type(t).__name__}")


# -- internals shared by layer ops -------------------------------------------


def segment_ids(t) -> np.ndarray:
    """Segment id of every data node, in buffer order."""
    idx = t.nodes["index"]
    offsets = t.segment_offsets.ravel()
    counts = np.diff(np.append(offsets, len(idx))) - 1
    return np.repeat(np.arange(len(offsets)), counts)


def rebuild_tensor3(t: SparseTensor3, new_values: np.ndarray, keep: np.ndarray) -> SparseTensor3:
    """Rebuild with transformed data-node values, dropping nodes where ~keep."""
    idx = t.nodes["index"]
    data = idx != -1
    segs = segment_ids(t)[keep]
    mid = t.extents()[1]
    buf, seg_offsets = _build_segmented(segs, idx[data][keep], new_values[keep], t.n_segments)
    return SparseTensor3(
        order=t.order,
        dims=t.dims,
        nodes=buf,
        matrix_offsets=seg_offsets[::mid].copy(),
        segment_offsets=seg_offsets,
    )


# -- binary serialization ------------------------------------------------------

_MAGIC_SPARSE3 = b"FSCT"
_MAGIC_DENSE3 = b"FDT3"


def sparse3_to_bytes(t: SparseTensor3) -> bytes:
    """Little-endian encoding: magic, order tag, dims, nodes, offset tables."""
    c, h, w = t.dims
    head = _MAGIC_SPARSE3 + struct.pack("<BIIIQ", t.order.value, c, h, w, len(t.nodes))
    parts = [head, t.nodes.astype(NODE_DTYPE, copy=False).tobytes()]
    for table in (t.matrix_offsets, t.segment_offsets):
        parts.append(struct.pack("<Q", len(table)))
        parts.append(np.asarray(table, dtype="<u8").tobytes())
    return b"".join(parts)


def sparse3_from_bytes(raw: bytes) -> SparseTensor3:
    if raw[:4] != _MAGIC_SPARSE3:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {_MAGIC_SPARSE3!r}")
    try:
        tag, c, h, w, n_nodes = struct.unpack_from("<BIIIQ", raw, 4)
    except struct.error as e:
        raise FormatError(f"truncated sparse tensor header: {e}") from None
    try:
        order = AxisOrder3(tag)
    except ValueError:
        raise FormatError(f"unknown order tag {tag}") from None
    pos = 4 + struct.calcsize("<BIIIQ")
    end = pos + n_nodes * NODE_DTYPE.itemsize
    if end > len(raw):
        raise FormatError("truncated sparse tensor payload")
    nodes = np.frombuffer(raw[pos:end], dtype=NODE_DTYPE).copy()
    pos = end
    tables = []
    for _ in range(2):
        if pos + 8 > len(raw):
            raise FormatError("truncated offset table length")
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        end = pos + n * 8
        if end > len(raw):
            raise FormatError("truncated offset table")
        tables.append(np.frombuffer(raw[pos:end], dtype="<u8").astype(np.int64))
        pos = end
    t = SparseTensor3(
        order=order,
        dims=(c, h, w),
        nodes=nodes,
        matrix_offsets=tables[0],
        segment_offsets=tables[1],
    )
    t.validate()
    return t


def dense3_to_bytes(t: DenseTensor3) -> bytes:
    c, h, w = t.dims
    return _MAGIC_DENSE3 + struct.pack("<III", c, h, w) + t.data.astype("<f4").tobytes()


def dense3_from_bytes(raw: bytes) -> DenseTensor3:
    if raw[:4] != _MAGIC_DENSE3:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {_MAGIC_DENSE3!r}")
    try:
        c, h, w = struct.unpack_from("<III", raw, 4)
    except struct.error as e:
        raise FormatError(f"truncated dense tensor header: {e}") from None
    payload = raw[16:]
    if len(payload) != c * h * w * 4:
        raise FormatError(f"dense payload is {len(payload)} bytes, expected {c * h * w * 4}")
    return DenseTensor3(dims=(c, h, w), data=np.frombuffer(payload, dtype="<f4").copy())
