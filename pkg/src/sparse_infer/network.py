"""Network-level orchestration: model description, weight I/O, forward pass.

A network is a sequential layer stack described either programmatically or
by a line-oriented text format (one layer per line, ``key=value`` fields).
Weights live in a separate binary file ("FSNW") holding dense filters, so a
single file serves every density sweep: filters are pruned and/or converted
to node format when the network is prepared for a given variant.

Three variants share the same layer stack:

* ``sparse_filter``  - filters in node format, tensors dense.
* ``sparse_input``   - network input in node format, filters dense.
* ``dense_baseline`` - everything dense; the engine's own comparison column.
"""

from __future__ import annotations

import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import layers as ly
from .sparse_core import (
    AxisOrder3,
    DenseTensor3,
    FormatError,
    SparseTensor3,
    SparseTensor4,
    dense3_from_bytes,
    dense3_to_bytes,
    density,
    prune_array,
    prune_random,
    sparsify_tensor3,
)

VARIANT_SPARSE_FILTER = "sparse_filter"
VARIANT_SPARSE_INPUT = "sparse_input"
VARIANT_DENSE = "dense_baseline"
VARIANTS = (VARIANT_SPARSE_FILTER, VARIANT_SPARSE_INPUT, VARIANT_DENSE)

WEIGHT_MAGIC = b"FSNW"
WEIGHT_VERSION = 1


@dataclass
class NetworkSpec:
    """Declarative sequential network: input dims plus an ordered layer list."""

    name: str
    input_dims: tuple[int, int, int]
    layers: list[ly.LayerSpec]
    variant: str = VARIANT_DENSE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """Output dims of every layer in order; raises if shapes do not chain."""
        dims = self.input_dims
        chain = []
        for i, layer in enumerate(self.layers):
            try:
                dims = layer.out_dims(dims)
            except ValueError as e:
                raise ValueError(f"layer {i} ({layer.kind}): {e}") from None
            chain.append(dims)
        return chain

    def with_variant(self, variant: str) -> "NetworkSpec":
        return replace(self, variant=variant)


@dataclass
class ConvParams:
    """Dense filter bank (N, C, H, W) and per-filter bias for one conv layer."""

    filters: np.ndarray
    bias: np.ndarray


@dataclass
class NetworkWeights:
    """Parameter entries for the parameterized layers, in layer order."""

    entries: list


def parameterized_layers(net: NetworkSpec) -> list[tuple[int, ly.LayerSpec]]:
    return [(i, l) for i, l in enumerate(net.layers) if l.kind in ("conv", "batchnorm")]


# -- model text format ---------------------------------------------------------


def parse_model_text(text: str, name: str = "model") -> NetworkSpec:
    """Parse the line-oriented model format; '#' starts a comment."""
    input_dims = None
    layer_list: list[ly.LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *pairs = line.split()
        try:
            args = dict(p.split("=", 1) for p in pairs)
        except ValueError:
            raise FormatError(f"line {lineno}: malformed key=value field") from None
        try:
            if kind == "input":
                input_dims = (int(args["c"]), int(args["h"]), int(args["w"]))
            elif kind == "conv":
                k = int(args["k"])
                layer_list.append(
                    ly.LayerSpec(
                        kind="conv",
                        out_channels=int(args["out"]),
                        kernel=(k, k),
                        stride=int(args.get("s", 1)),
                        padding=int(args.get("p", 0)),
                    )
                )
            elif kind in ("maxpool", "avgpool"):
                k = int(args["k"])
                layer_list.append(ly.LayerSpec(kind=kind, kernel=(k, k)))
            elif kind == "relu":
                layer_list.append(ly.LayerSpec(kind="relu"))
            elif kind == "leaky_relu":
                layer_list.append(ly.LayerSpec(kind="leaky_relu", slope=float(args["slope"])))
            elif kind == "batchnorm":
                layer_list.append(ly.LayerSpec(kind="batchnorm"))
            elif kind == "pad":
                layer_list.append(ly.LayerSpec(kind="pad", padding=int(args["p"])))
            else:
                raise FormatError(f"line {lineno}: unknown layer kind {kind!r}")
        except (KeyError, ValueError) as e:
            raise FormatError(f"line {lineno}: {e}") from None
    if input_dims is None:
        raise FormatError("model text is missing an 'input c= h= w=' line")
    net = NetworkSpec(name=name, input_dims=input_dims, layers=layer_list)
    net.shape_chain()
    return net


def format_model_text(net: NetworkSpec) -> str:
    c, h, w = net.input_dims
    lines = [f"input c={c} h={h} w={w}"]
    for layer in net.layers:
        if layer.kind == "conv":
            lines.append(
                f"conv out={layer.out_channels} k={layer.kernel[0]}"
                f" s={layer.stride} p={layer.padding}"
            )
        elif layer.kind in ("maxpool", "avgpool"):
            lines.append(f"{layer.kind} k={layer.kernel[0]}")
        elif layer.kind == "leaky_relu":
            lines.append(f"leaky_relu slope={layer.slope:g}")
        elif layer.kind == "pad":
            lines.append(f"pad p={layer.padding}")
        else:
            lines.append(layer.kind)
    return "\n".join(lines) + "\n"


# -- weights -------------------------------------------------------------------


def random_weights(net: NetworkSpec, seed: int) -> NetworkWeights:
    """Per-layer parameters from a fixed distribution: filters uniform on
    [-0.5, 0.5], biases zero, batchnorm stats uniform with var in [0.5, 1.5]."""
    chain = [net.input_dims] + net.shape_chain()
    entries = []
    for li, layer in parameterized_layers(net):
        rng = np.random.default_rng([seed, li])
        c_in = chain[li][0]
        if layer.kind == "conv":
            shape = (layer.out_channels, c_in) + layer.kernel
            filters = rng.uniform(-0.5, 0.5, shape).astype(np.float32)
            entries.append(ConvParams(filters=filters, bias=np.zeros(layer.out_channels, np.float32)))
        else:
            entries.append(
                ly.BatchNormParams(
                    scale=rng.uniform(0.5, 1.5, c_in).astype(np.float32),
                    shift=rng.uniform(-0.5, 0.5, c_in).astype(np.float32),
                    mean=rng.uniform(-0.5, 0.5, c_in).astype(np.float32),
                    var=rng.uniform(0.5, 1.5, c_in).astype(np.float32),
                    epsilon=1e-5,
                )
            )
    return NetworkWeights(entries=entries)


def prune_weights(weights: NetworkWeights, target_density: float, seed: int) -> NetworkWeights:
    """Prune every conv layer's filter bank to the target density (jointly per layer)."""
    entries = []
    for i, entry in enumerate(weights.entries):
        if isinstance(entry, ConvParams):
            pruned = prune_array(entry.filters, target_density, [seed, i])
            entries.append(ConvParams(filters=pruned, bias=entry.bias))
        else:
            entries.append(entry)
    return NetworkWeights(entries=entries)


def save_weights(path, net: NetworkSpec, weights: NetworkWeights) -> None:
    """Write the FSNW weight file: dense filters, so one file serves every sweep."""
    params = parameterized_layers(net)
    if len(params) != len(weights.entries):
        raise ValueError(f"{len(weights.entries)} entries for {len(params)} parameterized layers")
    out = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(params))]
    for (li, layer), entry in zip(params, weights.entries):
        if layer.kind == "conv":
            n, c, h, w = entry.filters.shape
            out.append(struct.pack("<IIII", n, c, h, w))
            for f in range(n):
                out.append(dense3_to_bytes(DenseTensor3.from_array(entry.filters[f])))
            out.append(np.asarray(entry.bias, dtype="<f4").tobytes())
        else:
            for arr in (entry.scale, entry.shift, entry.mean, entry.var):
                out.append(np.asarray(arr, dtype="<f4").tobytes())
            out.append(struct.pack("<f", entry.epsilon))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_weights(path, net: NetworkSpec) -> NetworkWeights:
    """Read and validate an FSNW file against the network's layer stack."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {WEIGHT_MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
    except struct.error:
        raise FormatError("truncated weight file header") from None
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    params = parameterized_layers(net)
    if count != len(params):
        raise FormatError(
            f"weight file has {count} parameterized layers, network expects {len(params)}"
        )
    chain = [net.input_dims] + net.shape_chain()
    pos = 12
    entries = []
    for li, layer in params:
        where = f"layer {li} ({layer.kind})"
        if layer.kind == "conv":
            if pos + 16 > len(raw):
                raise FormatError(f"truncated weight file in {where}")
            n, c, h, w = struct.unpack_from("<IIII", raw, pos)
            pos += 16
            expect = (layer.out_channels, chain[li][0]) + layer.kernel
            if (n, c, h, w) != expect:
                raise FormatError(f"filter dims {(n, c, h, w)} != {expect} in {where}")
            filters = np.empty((n, c, h, w), dtype=np.float32)
            blob = 16 + c * h * w * 4
            for f in range(n):
                if pos + blob > len(raw):
                    raise FormatError(f"truncated weight file in {where}")
                t = dense3_from_bytes(raw[pos : pos + blob])
                if t.dims != (c, h, w):
                    raise FormatError(f"filter {f} dims {t.dims} != {(c, h, w)} in {where}")
                filters[f] = t.to_array()
                pos += blob
            if pos + n * 4 > len(raw):
                raise FormatError(f"truncated weight file in {where}")
            bias = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).copy()
            pos += n * 4
            entries.append(ConvParams(filters=filters, bias=bias))
        else:
            c_in = chain[li][0]
            need = 4 * c_in * 4 + 4
            if pos + need > len(raw):
                raise FormatError(f"truncated weight file in {where}")
            arrs = []
            for _ in range(4):
                arrs.append(np.frombuffer(raw, dtype="<f4", count=c_in, offset=pos).copy())
                pos += c_in * 4
            (eps,) = struct.unpack_from("<f", raw, pos)
            pos += 4
            entries.append(
                ly.BatchNormParams(
                    scale=arrs[0], shift=arrs[1], mean=arrs[2], var=arrs[3], epsilon=float(eps)
                )
            )
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last layer")
    return NetworkWeights(entries=entries)


# -- prepared execution plan ---------------------------------------------------


@dataclass
class _Step:
    """One runnable pipeline step; a fused step consumes two layer indices."""

    layer_index: int
    kind: str
    params: object = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    kernel: tuple[int, int] = (0, 0)
    slope: float = 0.0
    fused_pool: tuple[int, int] | None = None
    fused_pool_mode: str = ly.POOL_MAX
    fused_layer_index: int = -1


@dataclass
class PreparedNet:
    """A network bound to weights and a variant, ready to run."""

    net: NetworkSpec
    steps: list[_Step]
    n_layers: int


@dataclass
class RunReport:
    """Configuration and observations of one forward run (timing in seconds)."""

    variant: str
    density_setting: float
    batch: int
    workers: int
    strategy: str
    seconds: float
    layer_densities: list[float] | None = None


@dataclass
class ForwardResult:
    outputs: list
    report: RunReport


def prepare(net: NetworkSpec, weights: NetworkWeights) -> PreparedNet:
    """Bind weights to the layer stack in the representation the variant needs.

    On the sparse-input path a conv directly followed by a pool fuses into
    one step when the conv carries no bias and the pool window divides the
    conv output; the pool layer is consumed by the conv step.
    """
    params = dict(zip((li for li, _ in parameterized_layers(net)), weights.entries))
    chain = [net.input_dims] + net.shape_chain()
    steps: list[_Step] = []
    skip = -1
    for li, layer in enumerate(net.layers):
        if li == skip:
            continue
        if layer.kind == "conv":
            entry = params[li]
            if not isinstance(entry, ConvParams):
                raise ValueError(f"layer {li} expects conv parameters")
            step = _Step(
                layer_index=li,
                kind="conv",
                bias=np.asarray(entry.bias, dtype=np.float32),
                stride=layer.stride,
                padding=layer.padding,
                kernel=layer.kernel,
            )
            if net.variant == VARIANT_SPARSE_FILTER:
                step.params = SparseTensor4.stack(
                    [
                        sparsify_tensor3(DenseTensor3.from_array(f), AxisOrder3.CHW)
                        for f in entry.filters
                    ]
                )
            else:
                step.params = [DenseTensor3.from_array(f) for f in entry.filters]
            if net.variant == VARIANT_SPARSE_INPUT and li + 1 < len(net.layers):
                nxt = net.layers[li + 1]
                if nxt.kind in ("maxpool", "avgpool") and not np.any(step.bias != 0):
                    c, h, w = chain[li + 1]
                    h_p, w_p = nxt.kernel
                    if h % h_p == 0 and w % w_p == 0:
                        step.fused_pool = nxt.kernel
                        step.fused_pool_mode = ly.POOL_MAX if nxt.kind == "maxpool" else ly.POOL_AVG
                        step.fused_layer_index = li + 1
                        skip = li + 1
            steps.append(step)
        elif layer.kind == "batchnorm":
            entry = params[li]
            if not isinstance(entry, ly.BatchNormParams):
                raise ValueError(f"layer {li} expects batchnorm parameters")
            entry.validate(chain[li][0])
            steps.append(_Step(layer_index=li, kind="batchnorm", params=entry))
        else:
            steps.append(
                _Step(
                    layer_index=li,
                    kind=layer.kind,
                    kernel=layer.kernel,
                    padding=layer.padding,
                    slope=layer.slope,
                )
            )
    return PreparedNet(net=net, steps=steps, n_layers=len(net.layers))


def _run_step(step: _Step, x, variant: str, strat: ly.StrategyKind, workers: int):
    if step.kind == "conv":
        if isinstance(x, SparseTensor3):
            return ly.conv_forward_sparse_input(
                x,
                step.params,
                step.stride,
                step.padding,
                step.bias,
                workers=workers,
                fused_pool=step.fused_pool,
                pool_mode=step.fused_pool_mode,
            )
        if variant == VARIANT_SPARSE_FILTER:
            if strat is ly.StrategyKind.STRATEGY_I:
                return ly.conv_forward_strategy_I(
                    x, step.params, step.stride, step.padding, step.bias, workers=workers
                )
            return ly.conv_forward_strategy_II(x, step.params, step.stride, step.padding, step.bias)
        out = ly.conv_forward_dense(
            x, step.params, step.stride, step.padding, step.bias, workers=workers
        )
        if step.fused_pool is not None:
            # an upstream biased conv turned the pipeline dense; the consumed
            # pool layer still has to run
            out = ly.pool_standalone(out, step.fused_pool, step.fused_pool_mode)
        return out
    if step.kind in ("maxpool", "avgpool"):
        mode = ly.POOL_MAX if step.kind == "maxpool" else ly.POOL_AVG
        if isinstance(x, SparseTensor3):
            return ly.pool_sparse(x, step.kernel, mode)
        return ly.pool_standalone(x, step.kernel, mode)
    if step.kind in ("relu", "leaky_relu"):
        return ly.apply_activation(x, step.kind, step.slope)
    if step.kind == "batchnorm":
        return ly.apply_batchnorm(x, step.params)
    if step.kind == "pad":
        return ly.pad_tensor(x, step.padding)
    raise ValueError(f"unknown step kind {step.kind!r}")


def _forward_instance(prepared: PreparedNet, x, strat, workers, densities):
    """Run one instance through all steps; densities is a per-layer list or None."""
    for step in prepared.steps:
        x = _run_step(step, x, prepared.net.variant, strat, workers)
        if densities is not None:
            densities[step.layer_index].append(density(x))
            if step.fused_layer_index >= 0:
                # the conv intermediate never materializes; both layers observe
                # the pooled output
                densities[step.fused_layer_index].append(density(x))
    return x


def _check_batch(prepared: PreparedNet, batch) -> None:
    variant = prepared.net.variant
    if not batch:
        raise ValueError("batch must be nonempty")
    for t in batch:
        if variant == VARIANT_SPARSE_INPUT:
            if not isinstance(t, SparseTensor3):
                raise ValueError(f"variant {variant} expects sparse inputs, got {type(t).__name__}")
        elif not isinstance(t, DenseTensor3):
            raise ValueError(f"variant {variant} expects dense inputs, got {type(t).__name__}")
        if tuple(t.dims) != tuple(prepared.net.input_dims):
            raise ValueError(f"input dims {t.dims} != network input {prepared.net.input_dims}")


def forward(
    prepared: PreparedNet,
    batch: list,
    workers: int = 1,
    strategy: ly.ForwardStrategy = ly.ForwardStrategy(),
    record_density: bool = False,
    density_setting: float = 1.0,
) -> ForwardResult:
    """Apply the layer stack to every batch instance and time the pass.

    Strategy I parallelizes across filters inside each instance; strategy II
    (and the non-strategy variants with batch > 1) parallelize across batch
    instances.  Results are identical for any worker count.
    """
    _check_batch(prepared, batch)
    variant = prepared.net.variant
    strat = strategy.resolve(len(batch))
    densities = [[] for _ in range(prepared.n_layers)] if record_density else None
    outputs: list = [None] * len(batch)

    instance_parallel = workers > 1 and len(batch) > 1 and (
        variant != VARIANT_SPARSE_FILTER or strat is ly.StrategyKind.STRATEGY_II
    )
    t0 = time.perf_counter()
    if instance_parallel:
        per_densities = [
            [[] for _ in range(prepared.n_layers)] if record_density else None
            for _ in batch
        ]

        def run(i: int) -> None:
            outputs[i] = _forward_instance(prepared, batch[i], strat, 1, per_densities[i])

        ly._map_tasks(run, len(batch), workers)
        if record_density:
            for d in per_densities:
                for li in range(prepared.n_layers):
                    densities[li].extend(d[li])
    else:
        inner_workers = workers if strat is ly.StrategyKind.STRATEGY_I or variant != VARIANT_SPARSE_FILTER else 1
        for i, t in enumerate(batch):
            outputs[i] = _forward_instance(prepared, t, strat, inner_workers, densities)
    seconds = time.perf_counter() - t0

    layer_densities = None
    if record_density:
        layer_densities = [float(np.mean(d)) if d else float("nan") for d in densities]
    report = RunReport(
        variant=variant,
        density_setting=density_setting,
        batch=len(batch),
        workers=workers,
        strategy=strat.name.lower() if variant == VARIANT_SPARSE_FILTER else "-",
        seconds=seconds,
        layer_densities=layer_densities,
    )
    return ForwardResult(outputs=outputs, report=report)


# -- benchmark architectures ---------------------------------------------------

BENCH_KINDS = ("vgg16_desk", "yolo_desk", "vgg16_desk_noact", "yolo_desk_nobn")

_VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
_YOLO_BLOCKS = [16, 32, 64, 128, 256]  # conv+pool blocks, then two head convs
_YOLO_HEAD = [512, 256]


def _scaled(width: int, scale: float) -> int:
    return max(1, math.ceil(width * scale))


def build_benchmark_net(
    kind: str, scale: float, input_hw: int = 32, variant: str = VARIANT_DENSE
) -> NetworkSpec:
    """Desk-scale VGG16-shaped and YOLO-shaped stacks with scalable widths."""
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    if kind not in BENCH_KINDS:
        raise ValueError(f"unknown benchmark net kind {kind!r}")
    layer_list: list[ly.LayerSpec] = []
    if kind.startswith("vgg16"):
        with_act = kind == "vgg16_desk"
        for item in _VGG16_PLAN:
            if item == "M":
                layer_list.append(ly.LayerSpec(kind="maxpool", kernel=(2, 2)))
            else:
                layer_list.append(
                    ly.LayerSpec(
                        kind="conv",
                        out_channels=_scaled(item, scale),
                        kernel=(3, 3),
                        stride=1,
                        padding=1,
                    )
                )
                if with_act:
                    layer_list.append(ly.LayerSpec(kind="relu"))
    else:
        with_bn = kind == "yolo_desk"

        def conv_block(width: int) -> None:
            layer_list.append(
                ly.LayerSpec(
                    kind="conv",
                    out_channels=_scaled(width, scale),
                    kernel=(3, 3),
                    stride=1,
                    padding=1,
                )
            )
            if with_bn:
                layer_list.append(ly.LayerSpec(kind="batchnorm"))
                layer_list.append(ly.LayerSpec(kind="leaky_relu", slope=0.1))

        for width in _YOLO_BLOCKS:
            conv_block(width)
            layer_list.append(ly.LayerSpec(kind="maxpool", kernel=(2, 2)))
        for width in _YOLO_HEAD:
            conv_block(width)
    net = NetworkSpec(
        name=kind, input_dims=(3, input_hw, input_hw), layers=layer_list, variant=variant
    )
    net.shape_chain()
    return net


# -- density evolution study ---------------------------------------------------


@dataclass
class DensityRecord:
    input_density: float
    layer_index: int
    layer_kind: str
    output_density: float


def random_input(dims: tuple[int, int, int], seed: int) -> DenseTensor3:
    rng = np.random.default_rng([seed, 0xBA7C4])
    return DenseTensor3.from_array(rng.uniform(-0.5, 0.5, dims).astype(np.float32))


def density_evolution(
    net: NetworkSpec, input_density_sweep: list[float], seed: int
) -> list[DensityRecord]:
    """Per-layer output densities for each input density in the sweep.

    Layer index 0 is the (pruned) network input itself; layer i+1 is the
    output of net.layers[i].
    """
    if net.variant != VARIANT_SPARSE_INPUT:
        raise ValueError("density evolution requires the sparse_input variant")
    prepared = prepare(net, random_weights(net, seed))
    base = random_input(net.input_dims, seed)
    records: list[DensityRecord] = []
    for d in input_density_sweep:
        pruned = prune_random(base, d, seed)
        sp = sparsify_tensor3(pruned, AxisOrder3.CHW)
        records.append(DensityRecord(d, 0, "input", density(sp)))
        result = forward(prepared, [sp], record_density=True)
        for li, layer in enumerate(net.layers):
            records.append(
                DensityRecord(d, li + 1, layer.kind, result.report.layer_densities[li])
            )
    return records
