"""Layer assembly: strategies, fusion, pooling, activations, batch norm."""

import numpy as np
import pytest

from sparse_infer import (
    AxisOrder3,
    BatchNormParams,
    ConvGeometry,
    DenseTensor3,
    LayerSpec,
    SparseTensor3,
    SparseTensor4,
    apply_activation,
    apply_batchnorm,
    conv_forward_dense,
    conv_forward_sparse_input,
    conv_forward_strategy_I,
    conv_forward_strategy_II,
    conv_sparse_input_dense_filter,
    dense_conv_reference,
    densify_matrix,
    densify_tensor3,
    density,
    merged_conv_pool,
    pad_tensor,
    pool_sparse,
    pool_standalone,
    sparsify_tensor3,
)

from conftest import rand_filter, rand_input


def _filter_bank(rng, n, dims, dens=0.4):
    dense = [rand_filter(rng, dims, density=dens)[0] for _ in range(n)]
    sparse = SparseTensor4.stack([sparsify_tensor3(f, AxisOrder3.CHW) for f in dense])
    return dense, sparse


def _rand_layer_case(rng):
    c = int(rng.integers(1, 9))
    hw = int(rng.integers(4, 17))
    k = int(rng.choice([1, 3]))
    s = int(rng.choice([1, 2]))
    p = int(rng.choice([0, 1]))
    n = int(rng.integers(1, 9))
    return c, hw, k, s, p, n


# -- strategy I / II -------------------------------------------------------------


def test_strategies_agree_exactly():
    rng = np.random.default_rng(50)
    for _ in range(30):
        c, hw, k, s, p, n = _rand_layer_case(rng)
        t_in, _ = rand_input(rng, (c, hw, hw))
        _, sparse = _filter_bank(rng, n, (c, k, k))
        bias = rng.uniform(-0.2, 0.2, n).astype(np.float32)
        a = conv_forward_strategy_I(t_in, sparse, s, p, bias)
        b = conv_forward_strategy_II(t_in, sparse, s, p, bias)
        assert a.dims == b.dims
        assert np.array_equal(a.data, b.data)


def test_strategy_I_worker_invariance():
    rng = np.random.default_rng(51)
    t_in, _ = rand_input(rng, (4, 12, 12))
    _, sparse = _filter_bank(rng, 6, (4, 3, 3))
    bias = np.zeros(6, np.float32)
    ref = conv_forward_strategy_I(t_in, sparse, 1, 1, bias, workers=1)
    for workers in (2, 4, 8):
        out = conv_forward_strategy_I(t_in, sparse, 1, 1, bias, workers=workers)
        assert np.array_equal(out.data, ref.data)


def test_unit_filter_identity_layer():
    rng = np.random.default_rng(52)
    t_in, arr = rand_input(rng, (1, 5, 6))
    unit = DenseTensor3.from_array(np.ones((1, 1, 1), np.float32))
    sparse = SparseTensor4.stack([sparsify_tensor3(unit, AxisOrder3.CHW)])
    out = conv_forward_strategy_I(t_in, sparse, 1, 0, np.zeros(1, np.float32))
    assert np.array_equal(out.data, t_in.data)


def test_duplicated_filters_give_identical_channels():
    rng = np.random.default_rng(53)
    t_in, _ = rand_input(rng, (3, 7, 7))
    f, _ = rand_filter(rng, (3, 3, 3))
    sparse = SparseTensor4.stack([sparsify_tensor3(f, AxisOrder3.CHW)] * 2)
    out = conv_forward_strategy_I(t_in, sparse, 1, 1, np.zeros(2, np.float32)).to_array()
    assert np.array_equal(out[0], out[1])


def test_zero_filters_give_all_bias_output():
    t_in = DenseTensor3.from_array(np.ones((2, 4, 4), np.float32))
    zero = DenseTensor3.from_array(np.zeros((2, 3, 3), np.float32))
    sparse = SparseTensor4.stack([sparsify_tensor3(zero, AxisOrder3.CHW)] * 3)
    bias = np.array([0.5, -1.0, 2.0], np.float32)
    out = conv_forward_strategy_II(t_in, sparse, 1, 1, bias).to_array()
    for f in range(3):
        assert np.all(out[f] == bias[f])


def test_full_density_matches_dense_reference_per_channel():
    rng = np.random.default_rng(54)
    t_in, _ = rand_input(rng, (4, 9, 9))
    dense, sparse = _filter_bank(rng, 3, (4, 3, 3), dens=1.0)
    out = conv_forward_strategy_II(t_in, sparse, 1, 0, np.zeros(3, np.float32)).to_array()
    geom = ConvGeometry((4, 9, 9), (4, 3, 3), 1, 0)
    for f in range(3):
        ref = dense_conv_reference(t_in, dense[f], geom)
        assert np.all(np.abs(out[f] - ref) <= 1e-6 + 1e-5 * np.abs(ref))


def test_dense_layer_matches_strategy_at_full_density():
    rng = np.random.default_rng(55)
    t_in, _ = rand_input(rng, (3, 8, 8))
    dense, sparse = _filter_bank(rng, 4, (3, 3, 3), dens=1.0)
    bias = rng.uniform(-0.1, 0.1, 4).astype(np.float32)
    a = conv_forward_dense(t_in, dense, 1, 1, bias, workers=3)
    b = conv_forward_strategy_I(t_in, sparse, 1, 1, bias)
    assert np.all(np.abs(a.data - b.data) <= 1e-6 + 1e-5 * np.abs(b.data))


# -- fusion ----------------------------------------------------------------------


def _fused_vs_unfused(rng, mode, hw=8, c=3, k=3, s=1, p=1, pool=(2, 2)):
    t_in, _ = rand_input(rng, (c, hw, hw), density=0.3)
    sp_in = sparsify_tensor3(t_in, AxisOrder3.CHW)
    t_f, _ = rand_filter(rng, (c, k, k))
    fused = merged_conv_pool(sp_in, t_f, s, pool, mode, padding=p)
    geom = ConvGeometry((c, hw, hw), (c, k, k), s, p)
    conv = conv_sparse_input_dense_filter(sp_in, t_f, geom)
    plane = DenseTensor3.from_array(densify_matrix(conv)[None])
    pooled = pool_standalone(plane, pool, mode)
    assert np.array_equal(densify_matrix(fused), pooled.to_array()[0])


def test_fusion_equals_unfused_exactly():
    rng = np.random.default_rng(56)
    for _ in range(25):
        for mode in ("max", "avg"):
            _fused_vs_unfused(rng, mode)


def test_fusion_degenerate_1x1_pool_is_plain_conv():
    rng = np.random.default_rng(57)
    t_in, _ = rand_input(rng, (2, 6, 6), density=0.4)
    sp_in = sparsify_tensor3(t_in, AxisOrder3.CHW)
    t_f, _ = rand_filter(rng, (2, 3, 3))
    fused = merged_conv_pool(sp_in, t_f, 1, (1, 1), "max")
    geom = ConvGeometry((2, 6, 6), (2, 3, 3), 1, 0)
    conv = conv_sparse_input_dense_filter(sp_in, t_f, geom)
    assert np.array_equal(densify_matrix(fused), densify_matrix(conv))


def test_fusion_constant_field_downsamples():
    t_in = DenseTensor3.from_array(np.ones((1, 4, 4), np.float32))
    sp_in = sparsify_tensor3(t_in, AxisOrder3.CHW)
    t_f = DenseTensor3.from_array(np.full((1, 1, 1), 2.0, np.float32))
    fused = merged_conv_pool(sp_in, t_f, 1, (2, 2), "max")
    assert np.array_equal(densify_matrix(fused), np.full((2, 2), 2.0, np.float32))


def test_fusion_max_handles_all_negative_regions():
    arr = -np.ones((1, 4, 4), np.float32)
    sp_in = sparsify_tensor3(DenseTensor3.from_array(arr), AxisOrder3.CHW)
    t_f = DenseTensor3.from_array(np.ones((1, 1, 1), np.float32))
    fused = merged_conv_pool(sp_in, t_f, 1, (2, 2), "max")
    assert np.array_equal(densify_matrix(fused), -np.ones((2, 2), np.float32))


def test_fusion_divisibility_and_pool_dims_errors():
    t_in, _ = rand_input(np.random.default_rng(58), (1, 5, 5))
    sp_in = sparsify_tensor3(t_in, AxisOrder3.CHW)
    t_f = DenseTensor3.from_array(np.ones((1, 1, 1), np.float32))
    with pytest.raises(ValueError, match="divisible"):
        merged_conv_pool(sp_in, t_f, 1, (2, 2), "max")
    with pytest.raises(ValueError, match="positive"):
        merged_conv_pool(sp_in, t_f, 1, (0, 2), "max")


# -- pooling ---------------------------------------------------------------------


def test_pool_identity_window():
    rng = np.random.default_rng(59)
    t, _ = rand_input(rng, (3, 4, 4))
    out = pool_standalone(t, (1, 1), "max")
    assert np.array_equal(out.data, t.data)


def test_pool_max_forced_value():
    arr = np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32)
    out = pool_standalone(DenseTensor3.from_array(arr), (2, 2), "max")
    assert out.to_array().ravel().tolist() == [4.0]
    avg = pool_standalone(DenseTensor3.from_array(arr), (2, 2), "avg")
    assert avg.to_array().ravel().tolist() == [2.5]


def test_pool_divisibility_error():
    t, _ = rand_input(np.random.default_rng(60), (1, 5, 4))
    with pytest.raises(ValueError, match="divisible"):
        pool_standalone(t, (2, 2), "max")


def test_pool_sparse_matches_dense():
    rng = np.random.default_rng(61)
    t, _ = rand_input(rng, (3, 8, 8), density=0.3)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    for mode in ("max", "avg"):
        a = pool_sparse(sp, (2, 2), mode)
        a.validate()
        b = pool_standalone(t, (2, 2), mode)
        assert np.array_equal(densify_tensor3(a).data, b.data)


# -- sparse-input conv layer -------------------------------------------------------


def test_sparse_input_layer_zero_in_zero_out():
    zero = DenseTensor3.from_array(np.zeros((2, 4, 4), np.float32))
    sp = sparsify_tensor3(zero, AxisOrder3.CHW)
    filters = [DenseTensor3.from_array(np.ones((2, 3, 3), np.float32))] * 2
    out = conv_forward_sparse_input(sp, filters, 1, 1, np.zeros(2, np.float32))
    assert isinstance(out, SparseTensor3)
    assert out.nnz == 0


def test_sparse_input_layer_unit_filter_keeps_nonzeros():
    rng = np.random.default_rng(62)
    t, arr = rand_input(rng, (1, 5, 5), density=0.4)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    unit = [DenseTensor3.from_array(np.ones((1, 1, 1), np.float32))]
    out = conv_forward_sparse_input(sp, unit, 1, 0, np.zeros(1, np.float32))
    assert out.nnz == np.count_nonzero(arr)
    assert np.array_equal(densify_tensor3(out).data, t.data)


def test_sparse_input_layer_fusion_matches_unfused():
    rng = np.random.default_rng(63)
    for mode in ("max", "avg"):
        t, _ = rand_input(rng, (3, 8, 8), density=0.3)
        sp = sparsify_tensor3(t, AxisOrder3.CHW)
        filters = [rand_filter(rng, (3, 3, 3))[0] for _ in range(4)]
        zb = np.zeros(4, np.float32)
        fused = conv_forward_sparse_input(sp, filters, 1, 1, zb, fused_pool=(2, 2), pool_mode=mode)
        unfused = conv_forward_sparse_input(sp, filters, 1, 1, zb)
        pooled = pool_sparse(unfused, (2, 2), mode)
        assert np.array_equal(densify_tensor3(fused).data, densify_tensor3(pooled).data)


def test_sparse_input_layer_nonzero_bias_goes_dense():
    rng = np.random.default_rng(64)
    t, _ = rand_input(rng, (2, 6, 6), density=0.3)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    filters = [rand_filter(rng, (2, 3, 3))[0] for _ in range(2)]
    bias = np.array([0.25, -0.5], np.float32)
    out = conv_forward_sparse_input(sp, filters, 1, 1, bias)
    assert isinstance(out, DenseTensor3)
    ref = conv_forward_dense(densify_tensor3(sp), filters, 1, 1, bias)
    assert np.all(np.abs(out.data - ref.data) <= 1e-6 + 1e-5 * np.abs(ref.data))


def test_sparse_input_layer_worker_invariance():
    rng = np.random.default_rng(65)
    t, _ = rand_input(rng, (3, 8, 8), density=0.2)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    filters = [rand_filter(rng, (3, 3, 3))[0] for _ in range(5)]
    zb = np.zeros(5, np.float32)
    ref = conv_forward_sparse_input(sp, filters, 1, 1, zb, workers=1)
    for workers in (2, 8):
        out = conv_forward_sparse_input(sp, filters, 1, 1, zb, workers=workers)
        assert np.array_equal(out.nodes, ref.nodes)


# -- activations and batch norm -----------------------------------------------------


def test_relu_all_negative_empties_tensor():
    arr = -np.abs(np.random.default_rng(66).uniform(0.1, 1, (2, 3, 3))).astype(np.float32)
    t = DenseTensor3.from_array(arr)
    assert np.all(apply_activation(t, "relu").data == 0.0)
    sp = apply_activation(sparsify_tensor3(t, AxisOrder3.CHW), "relu")
    sp.validate()
    assert sp.nnz == 0


def test_relu_all_positive_identity():
    arr = np.abs(np.random.default_rng(67).uniform(0.1, 1, (2, 3, 3))).astype(np.float32)
    t = DenseTensor3.from_array(arr)
    assert np.array_equal(apply_activation(t, "relu").data, t.data)


def test_activation_sparse_matches_dense_path():
    rng = np.random.default_rng(68)
    for kind, slope in (("relu", 0.0), ("leaky_relu", 0.1), ("leaky_relu", 0.0)):
        t, _ = rand_input(rng, (3, 6, 6), density=0.5)
        sp = sparsify_tensor3(t, AxisOrder3.CHW)
        a = apply_activation(t, kind, slope)
        b = apply_activation(sp, kind, slope)
        b.validate()
        assert np.array_equal(densify_tensor3(b).data, a.data)


def test_relu_density_non_increasing_leaky_preserves_support():
    rng = np.random.default_rng(69)
    t, arr = rand_input(rng, (4, 8, 8), density=0.4)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    relu = apply_activation(sp, "relu")
    assert density(relu) <= density(sp)
    leaky = apply_activation(sp, "leaky_relu", 0.1)
    assert leaky.nnz == sp.nnz
    assert np.array_equal(leaky.nodes["index"], sp.nodes["index"])


def test_batchnorm_identity_params():
    rng = np.random.default_rng(70)
    t, _ = rand_input(rng, (3, 4, 4))
    params = BatchNormParams(
        scale=np.ones(3, np.float32),
        shift=np.zeros(3, np.float32),
        mean=np.zeros(3, np.float32),
        var=np.ones(3, np.float32),
        epsilon=0.0,
    )
    assert np.array_equal(apply_batchnorm(t, params).data, t.data)


def test_batchnorm_zero_scale_is_constant_shift():
    rng = np.random.default_rng(71)
    t, _ = rand_input(rng, (2, 3, 3))
    shift = np.array([1.5, -2.0], np.float32)
    params = BatchNormParams(
        scale=np.zeros(2, np.float32),
        shift=shift,
        mean=np.zeros(2, np.float32),
        var=np.ones(2, np.float32),
    )
    out = apply_batchnorm(t, params).to_array()
    assert np.all(out[0] == 1.5) and np.all(out[1] == -2.0)


def test_batchnorm_matches_scalar_loop_oracle():
    rng = np.random.default_rng(72)
    t, arr = rand_input(rng, (4, 5, 5))
    params = BatchNormParams(
        scale=rng.uniform(0.5, 1.5, 4).astype(np.float32),
        shift=rng.uniform(-0.5, 0.5, 4).astype(np.float32),
        mean=rng.uniform(-0.5, 0.5, 4).astype(np.float32),
        var=rng.uniform(0.5, 1.5, 4).astype(np.float32),
        epsilon=1e-5,
    )
    got = apply_batchnorm(t, params).to_array()
    expect = np.empty_like(arr)
    for c in range(4):
        for h in range(5):
            for w in range(5):
                x = arr[c, h, w]
                expect[c, h, w] = (
                    params.scale[c]
                    * ((x - params.mean[c]) / np.float32(np.sqrt(params.var[c] + np.float32(1e-5))))
                    + params.shift[c]
                )
    assert np.allclose(got, expect, rtol=1e-6, atol=1e-7)
    sp = apply_batchnorm(sparsify_tensor3(t, AxisOrder3.CHW), params)
    assert np.array_equal(densify_tensor3(sp).data, apply_batchnorm(t, params).data)


def test_batchnorm_rejects_bad_variance():
    t, _ = rand_input(np.random.default_rng(73), (1, 2, 2))
    params = BatchNormParams(
        scale=np.ones(1, np.float32),
        shift=np.zeros(1, np.float32),
        mean=np.zeros(1, np.float32),
        var=np.array([-1.0], np.float32),
        epsilon=0.5,
    )
    with pytest.raises(ValueError, match="var"):
        apply_batchnorm(t, params)


def test_pad_layer_dense_and_sparse_agree():
    rng = np.random.default_rng(74)
    t, _ = rand_input(rng, (2, 3, 4), density=0.5)
    sp = sparsify_tensor3(t, AxisOrder3.CHW)
    pd = pad_tensor(t, 2)
    ps = pad_tensor(sp, 2)
    ps.validate()
    assert pd.dims == (2, 7, 8)
    assert np.array_equal(densify_tensor3(ps).data, pd.data)


# -- layer shape contracts ----------------------------------------------------------


def test_layer_out_dims():
    conv = LayerSpec(kind="conv", out_channels=8, kernel=(3, 3), stride=1, padding=1)
    assert conv.out_dims((3, 32, 32)) == (8, 32, 32)
    pool = LayerSpec(kind="maxpool", kernel=(2, 2))
    assert pool.out_dims((8, 32, 32)) == (8, 16, 16)
    with pytest.raises(ValueError, match="divisible"):
        pool.out_dims((8, 31, 32))
    assert LayerSpec(kind="pad", padding=2).out_dims((3, 4, 4)) == (3, 8, 8)
    assert LayerSpec(kind="relu").out_dims((3, 4, 4)) == (3, 4, 4)
    with pytest.raises(ValueError, match="unknown"):
        LayerSpec(kind="softmax").out_dims((3, 4, 4))
