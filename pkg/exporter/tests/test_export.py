"""Exporter tests, including the cross-component acceptance criterion:
exported files load in the engine with matching checksums/densities, and
the engine's forward agrees with the PyTorch reference within rel. 1e-4."""

import numpy as np
import pytest
import torch
from torch import nn

from sparse_infer_exporter import (
    ExportError,
    UnsupportedLayerError,
    export,
    fnv1a64,
)
from sparse_infer_exporter.cli import main as cli_main

# engine side of the cross-component checks (consumed via its public API,
# the files themselves are the interface)
from sparse_infer import network as nw
from sparse_infer import (
    AxisOrder3,
    ConvParams,
    DenseTensor3,
    densify_tensor3,
    sparsify_tensor3,
)


def small_model(seed=0, with_bias=True):
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1, bias=with_bias),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(8, 6, 3, padding=1, bias=with_bias),
        nn.BatchNorm2d(6),
        nn.LeakyReLU(0.1),
        nn.AvgPool2d(2),
        nn.Conv2d(6, 4, 1, bias=with_bias),
    )


def bn_with_stats(model):
    """Give batch norms nontrivial running statistics."""
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.running_mean.uniform_(-0.5, 0.5)
                m.running_var.uniform_(0.5, 1.5)
    return model


def do_export(tmp_path, model, name="model", input_hw=16):
    ckpt = tmp_path / f"{name}.pt"
    torch.save(model, ckpt)
    paths = {
        "model": tmp_path / f"{name}.model",
        "weights": tmp_path / f"{name}.fsnw",
        "manifest": tmp_path / f"{name}.manifest",
    }
    manifest = export(
        str(ckpt),
        str(paths["model"]),
        str(paths["weights"]),
        input_hw=input_hw,
        manifest_path=str(paths["manifest"]),
    )
    return manifest, paths


def test_export_writes_expected_model_lines(tmp_path):
    model = bn_with_stats(small_model())
    manifest, paths = do_export(tmp_path, model)
    text = paths["model"].read_text()
    assert text.splitlines() == [
        "input c=3 h=16 w=16",
        "conv out=8 k=3 s=1 p=1",
        "relu",
        "maxpool k=2",
        "conv out=6 k=3 s=1 p=1",
        "batchnorm",
        "leaky_relu slope=0.1",
        "avgpool k=2",
        "conv out=4 k=1 s=1 p=0",
    ]
    assert manifest.overall_density == 1.0
    assert "overall_density" in paths["manifest"].read_text()


def test_export_is_byte_deterministic(tmp_path):
    model = bn_with_stats(small_model())
    _, p1 = do_export(tmp_path, model, name="a")
    _, p2 = do_export(tmp_path, model, name="b")
    assert p1["model"].read_bytes() == p2["model"].read_bytes()
    assert p1["weights"].read_bytes() == p2["weights"].read_bytes()


def test_engine_loads_export_with_matching_checksums(tmp_path):
    model = bn_with_stats(small_model(seed=1))
    # prune one conv to a known density so the density report is nontrivial
    with torch.no_grad():
        w = model[0].weight
        mask = torch.rand_like(w) < 0.25
        w.mul_(mask)
    manifest, paths = do_export(tmp_path, model)

    net = nw.parse_model_text(paths["model"].read_text())
    weights = nw.load_weights(paths["weights"], net)

    conv_entries = [e for e in manifest.layers if e.kind == "conv"]
    engine_convs = [e for e in weights.entries if isinstance(e, ConvParams)]
    assert len(conv_entries) == len(engine_convs)
    for m_entry, e_entry in zip(conv_entries, engine_convs):
        blob = b"".join(
            nw.dense3_to_bytes(DenseTensor3.from_array(f)) for f in e_entry.filters
        )
        assert fnv1a64(blob) == m_entry.checksum
        assert fnv1a64(np.asarray(e_entry.bias, dtype="<f4").tobytes()) == m_entry.bias_checksum
        dens = float(np.count_nonzero(e_entry.filters)) / e_entry.filters.size
        assert dens == pytest.approx(m_entry.density, abs=0)
    pruned = conv_entries[0]
    assert pruned.density < 0.35  # the masked layer reports its true sparsity


def relative_ok(a, b, rtol=1e-4, atol=1e-5):
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))


def test_engine_forward_matches_torch_reference(tmp_path):
    model = bn_with_stats(small_model(seed=2)).eval()
    manifest, paths = do_export(tmp_path, model)
    net = nw.parse_model_text(paths["model"].read_text())
    weights = nw.load_weights(paths["weights"], net)

    torch.manual_seed(3)
    x = torch.rand(1, 3, 16, 16) - 0.5
    with torch.no_grad():
        ref = model(x)[0].numpy()

    t = DenseTensor3.from_array(x[0].numpy())
    for variant in (nw.VARIANT_DENSE, nw.VARIANT_SPARSE_FILTER):
        prepared = nw.prepare(net.with_variant(variant), weights)
        out = nw.forward(prepared, [t]).outputs[0].to_array()
        assert out.shape == ref.shape
        assert relative_ok(out, ref), f"{variant} deviates from torch reference"


def test_pruned_checkpoint_runs_sparse_in_engine(tmp_path):
    model = bn_with_stats(small_model(seed=4, with_bias=False)).eval()
    with torch.no_grad():
        for mod in model:
            if isinstance(mod, nn.Conv2d):
                mod.weight.mul_(torch.rand_like(mod.weight) < 0.1)
    manifest, paths = do_export(tmp_path, model)
    assert manifest.overall_density < 0.2

    net = nw.parse_model_text(paths["model"].read_text())
    weights = nw.load_weights(paths["weights"], net)
    torch.manual_seed(5)
    x = torch.rand(1, 3, 16, 16) - 0.5
    with torch.no_grad():
        ref = model(x)[0].numpy()
    t = DenseTensor3.from_array(x[0].numpy())
    prepared = nw.prepare(net.with_variant(nw.VARIANT_SPARSE_FILTER), weights)
    out = nw.forward(prepared, [t]).outputs[0].to_array()
    assert relative_ok(out, ref)

    # sparse-input variant consumes the same files
    psi = nw.prepare(net.with_variant(nw.VARIANT_SPARSE_INPUT), weights)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    out_si = nw.forward(psi, [sp]).outputs[0]
    arr = (
        densify_tensor3(out_si).to_array()
        if not isinstance(out_si, DenseTensor3)
        else out_si.to_array()
    )
    assert relative_ok(arr, ref)


def test_all_zero_conv_reports_zero_density(tmp_path):
    model = small_model(seed=6)
    with torch.no_grad():
        model[0].weight.zero_()
    bn_with_stats(model)
    manifest, _ = do_export(tmp_path, model)
    first_conv = next(e for e in manifest.layers if e.kind == "conv")
    assert first_conv.density == 0.0


class Residual(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(4, 4, 3, padding=1)

    def forward(self, x):
        return x + self.conv(x)


def test_residual_block_aborts_with_layer_name(tmp_path):
    model = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), Residual())
    ckpt = tmp_path / "res.pt"
    torch.save(model, ckpt)
    with pytest.raises(UnsupportedLayerError, match="Residual"):
        export(str(ckpt), str(tmp_path / "m"), str(tmp_path / "w"))


def test_unsupported_leaf_aborts_with_layer_name(tmp_path):
    model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Flatten(), nn.Linear(4, 2))
    ckpt = tmp_path / "fc.pt"
    torch.save(model, ckpt)
    with pytest.raises(UnsupportedLayerError, match="Flatten"):
        export(str(ckpt), str(tmp_path / "m"), str(tmp_path / "w"))


def test_unreadable_checkpoint(tmp_path):
    bad = tmp_path / "junk.pt"
    bad.write_bytes(b"this is not a checkpoint")
    with pytest.raises(ExportError, match="unreadable"):
        export(str(bad), str(tmp_path / "m"), str(tmp_path / "w"))
    sd = tmp_path / "state.pt"
    torch.save(small_model().state_dict(), sd)
    with pytest.raises(ExportError, match="state dict"):
        export(str(sd), str(tmp_path / "m"), str(tmp_path / "w"))


def test_cli_round_trip(tmp_path, capsys):
    model = bn_with_stats(small_model(seed=7))
    ckpt = tmp_path / "cli.pt"
    torch.save(model, ckpt)
    rc = cli_main(
        [
            str(ckpt),
            "--model-out", str(tmp_path / "cli.model"),
            "--weights-out", str(tmp_path / "cli.fsnw"),
            "--manifest-out", str(tmp_path / "cli.manifest"),
            "--input-hw", "16",
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "overall weight density" in out
    assert (tmp_path / "cli.manifest").exists()
    net = nw.parse_model_text((tmp_path / "cli.model").read_text())
    nw.load_weights(tmp_path / "cli.fsnw", net)


def test_cli_reports_failure(tmp_path):
    model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Flatten())
    ckpt = tmp_path / "bad.pt"
    torch.save(model, ckpt)
    rc = cli_main(
        [str(ckpt), "--model-out", str(tmp_path / "m"), "--weights-out", str(tmp_path / "w")]
    )
    assert rc == 1
