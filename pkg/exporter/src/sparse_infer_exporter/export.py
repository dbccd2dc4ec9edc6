"""Convert a PyTorch sequential CNN checkpoint into engine model + weight files.

The checkpoint must be a pickled ``nn.Module`` whose flattened children form
a stack the model format can express: Conv2d (groups=1, square kernels,
zero padding mode), MaxPool2d/AvgPool2d with stride equal to the window,
BatchNorm2d, ReLU, LeakyReLU, and ZeroPad2d.  Dropout and Identity are
inference no-ops and are skipped.  Anything else aborts with the offending
layer named, so silent mis-exports cannot happen.

Weights are written dense; a pruned checkpoint simply contains its zeros,
and the per-layer density report shows the true sparsity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .formats import (
    batchnorm_record_bytes,
    conv_record_bytes,
    dense3_bytes,
    fnv1a64,
    weights_file_bytes,
)


class ExportError(RuntimeError):
    """Checkpoint cannot be expressed in the engine's model format."""


class UnsupportedLayerError(ExportError):
    """A layer kind the model format has no line for; names the layer."""


@dataclass
class LayerEntry:
    index: int
    kind: str
    model_line: str | None  # None for skipped no-op modules
    shape: tuple | None = None
    density: float | None = None
    checksum: int | None = None
    bias_checksum: int | None = None


@dataclass
class ExportManifest:
    """What was exported: layers, shapes, checksums, and the density report."""

    source: str
    input_dims: tuple[int, int, int]
    layers: list[LayerEntry] = field(default_factory=list)
    model_lines: list[str] = field(default_factory=list)
    overall_density: float = 1.0

    def to_text(self) -> str:
        c, h, w = self.input_dims
        lines = [f"source: {self.source}", f"input: c={c} h={h} w={w}"]
        for e in self.layers:
            parts = [f"layer {e.index}: kind={e.kind}"]
            if e.shape is not None:
                parts.append("shape=" + "x".join(str(d) for d in e.shape))
            if e.density is not None:
                parts.append(f"density={e.density:.6f}")
            if e.checksum is not None:
                parts.append(f"checksum={e.checksum:016x}")
            if e.bias_checksum is not None:
                parts.append(f"bias_checksum={e.bias_checksum:016x}")
            lines.append(" ".join(parts))
        lines.append("model:")
        lines.extend("  " + l for l in self.model_lines)
        lines.append(f"overall_density: {self.overall_density:.6f}")
        return "\n".join(lines) + "\n"


def _flatten(module: nn.Module):
    children = list(module.children())
    if isinstance(module, nn.Sequential) or (children and isinstance(module, nn.ModuleList)):
        for child in module:
            yield from _flatten(child)
    elif not children:
        yield module
    else:
        # a container with custom forward (residual blocks etc.) cannot be
        # expressed as a sequential stack
        raise UnsupportedLayerError(
            f"non-sequential module {type(module).__name__} is not exportable"
        )


def _square(value, what: str, layer: str) -> int:
    if isinstance(value, (tuple, list)):
        if len(value) != 2 or value[0] != value[1]:
            raise UnsupportedLayerError(f"{layer}: non-square {what} {value}")
        return int(value[0])
    return int(value)


def load_checkpoint(path: str) -> nn.Module:
    try:
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ExportError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(obj, nn.Module):
        raise ExportError(
            f"checkpoint {path} holds {type(obj).__name__}, expected a saved nn.Module"
            " (bare state dicts carry no layer structure)"
        )
    return obj


def _f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


def export(
    checkpoint_path: str,
    out_model_path: str,
    out_weights_path: str,
    input_hw: int = 32,
    manifest_path: str | None = None,
) -> ExportManifest:
    """Write engine model text and FSNW weights for a checkpoint; returns the manifest."""
    model = load_checkpoint(checkpoint_path)
    model.eval()

    modules = list(_flatten(model))
    first_conv = next((m for m in modules if isinstance(m, nn.Conv2d)), None)
    if first_conv is None:
        raise ExportError("checkpoint has no convolutional layer")
    input_dims = (first_conv.in_channels, input_hw, input_hw)

    manifest = ExportManifest(source=os.fspath(checkpoint_path), input_dims=input_dims)
    c, h, w = input_dims
    manifest_lines = manifest.model_lines
    manifest_lines.append(f"input c={c} h={h} w={w}")
    records: list[bytes] = []
    nnz_total = 0
    weight_total = 0

    for index, mod in enumerate(modules):
        name = f"layer {index} ({type(mod).__name__})"
        if isinstance(mod, nn.Conv2d):
            if mod.groups != 1:
                raise UnsupportedLayerError(f"{name}: grouped convolution")
            if any(d != 1 for d in mod.dilation):
                raise UnsupportedLayerError(f"{name}: dilation")
            if mod.padding_mode != "zeros":
                raise UnsupportedLayerError(f"{name}: padding mode {mod.padding_mode!r}")
            k = _square(mod.kernel_size, "kernel", name)
            s = _square(mod.stride, "stride", name)
            p = _square(mod.padding, "padding", name)
            if mod.in_channels != c:
                raise ExportError(f"{name}: expects {mod.in_channels} channels, chain has {c}")
            filters = _f32(mod.weight)  # (N, C, k, k)
            bias = (
                _f32(mod.bias)
                if mod.bias is not None
                else np.zeros(mod.out_channels, np.float32)
            )
            records.append(conv_record_bytes(filters, bias))
            line = f"conv out={mod.out_channels} k={k} s={s} p={p}"
            manifest_lines.append(line)
            blob = b"".join(dense3_bytes(filters[f]) for f in range(filters.shape[0]))
            dens = float(np.count_nonzero(filters)) / filters.size
            nnz_total += int(np.count_nonzero(filters))
            weight_total += filters.size
            manifest.layers.append(
                LayerEntry(
                    index=index,
                    kind="conv",
                    model_line=line,
                    shape=tuple(filters.shape),
                    density=dens,
                    checksum=fnv1a64(blob),
                    bias_checksum=fnv1a64(np.asarray(bias, dtype="<f4").tobytes()),
                )
            )
            c = mod.out_channels
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        elif isinstance(mod, (nn.MaxPool2d, nn.AvgPool2d)):
            k = _square(mod.kernel_size, "window", name)
            stride = mod.stride if mod.stride is not None else k
            if _square(stride, "stride", name) != k:
                raise UnsupportedLayerError(f"{name}: pooling stride must equal the window")
            if _square(mod.padding, "padding", name) != 0:
                raise UnsupportedLayerError(f"{name}: padded pooling")
            if h % k or w % k:
                raise ExportError(f"{name}: input {h}x{w} not divisible by window {k}")
            kind = "maxpool" if isinstance(mod, nn.MaxPool2d) else "avgpool"
            line = f"{kind} k={k}"
            manifest_lines.append(line)
            manifest.layers.append(LayerEntry(index=index, kind=kind, model_line=line))
            h //= k
            w //= k
        elif isinstance(mod, nn.BatchNorm2d):
            if not mod.track_running_stats or mod.running_mean is None:
                raise UnsupportedLayerError(f"{name}: batch norm without running statistics")
            if mod.num_features != c:
                raise ExportError(f"{name}: normalizes {mod.num_features} channels, chain has {c}")
            scale = _f32(mod.weight) if mod.affine else np.ones(c, np.float32)
            shift = _f32(mod.bias) if mod.affine else np.zeros(c, np.float32)
            mean, var = _f32(mod.running_mean), _f32(mod.running_var)
            records.append(batchnorm_record_bytes(scale, shift, mean, var, mod.eps))
            manifest_lines.append("batchnorm")
            manifest.layers.append(
                LayerEntry(
                    index=index,
                    kind="batchnorm",
                    model_line="batchnorm",
                    shape=(c,),
                    checksum=fnv1a64(batchnorm_record_bytes(scale, shift, mean, var, mod.eps)),
                )
            )
        elif isinstance(mod, nn.ReLU):
            manifest_lines.append("relu")
            manifest.layers.append(LayerEntry(index=index, kind="relu", model_line="relu"))
        elif isinstance(mod, nn.LeakyReLU):
            line = f"leaky_relu slope={mod.negative_slope:g}"
            manifest_lines.append(line)
            manifest.layers.append(LayerEntry(index=index, kind="leaky_relu", model_line=line))
        elif isinstance(mod, nn.ZeroPad2d):
            pads = mod.padding
            if len(set(pads)) != 1:
                raise UnsupportedLayerError(f"{name}: asymmetric padding {pads}")
            line = f"pad p={pads[0]}"
            manifest_lines.append(line)
            manifest.layers.append(LayerEntry(index=index, kind="pad", model_line=line))
            h += 2 * pads[0]
            w += 2 * pads[0]
        elif isinstance(mod, (nn.Identity, nn.Dropout, nn.Dropout2d)):
            manifest.layers.append(LayerEntry(index=index, kind="noop", model_line=None))
        else:
            raise UnsupportedLayerError(f"{name} is not expressible in the model format")

    manifest.overall_density = nnz_total / weight_total if weight_total else 1.0

    with open(out_model_path, "w") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    with open(out_weights_path, "wb") as fh:
        fh.write(weights_file_bytes(records))
    if manifest_path:
        with open(manifest_path, "w") as fh:
            fh.write(manifest.to_text())
    return manifest
