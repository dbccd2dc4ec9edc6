"""Shared builders for randomized test tensors.

Filter values are drawn at trained-network magnitude (normal with variance
2/fan-in); inputs uniform on [-0.5, 0.5].  Everything is seeded, so every
run sees the same cases.
"""

import numpy as np

from sparse_infer import AxisOrder3, DenseTensor3, sparsify_tensor3


def rand_input(rng, dims, density=1.0):
    arr = rng.uniform(-0.5, 0.5, dims).astype(np.float32)
    if density < 1.0:
        arr[rng.random(dims) >= density] = 0.0
    return DenseTensor3.from_array(arr), arr


def rand_filter(rng, dims, density=1.0):
    c, h, w = dims
    arr = rng.normal(0.0, np.sqrt(2.0 / (c * h * w)), dims).astype(np.float32)
    if density < 1.0:
        arr[rng.random(dims) >= density] = 0.0
    return DenseTensor3.from_array(arr), arr


def rand_conv_case(rng, max_c=16, max_hw=32, kernels=(1, 3, 5), densities=(0.01, 0.05, 0.1, 0.5, 1.0)):
    """One random convolution configuration within the acceptance envelope."""
    while True:
        c = int(rng.integers(1, max_c + 1))
        h_i = int(rng.integers(1, max_hw + 1))
        w_i = int(rng.integers(1, max_hw + 1))
        k = int(rng.choice(kernels))
        s = int(rng.choice([1, 2]))
        p = int(rng.choice([0, 1]))
        if k <= h_i + 2 * p and k <= w_i + 2 * p:
            dens = float(rng.choice(densities))
            return c, h_i, w_i, k, s, p, dens


def sparse_of(t, order=AxisOrder3.CHW):
    return sparsify_tensor3(t, order)


def conv_oracle_f64(inp, filt, stride, padding):
    """Independent correctness oracle: float64 windowed sums over a padded copy."""
    c, h_i, w_i = inp.shape
    _, h_f, w_f = filt.shape
    padded = np.pad(inp.astype(np.float64), ((0, 0), (padding, padding), (padding, padding)))
    n_h = (h_i + 2 * padding - h_f) // stride + 1
    n_w = (w_i + 2 * padding - w_f) // stride + 1
    out = np.zeros((n_h, n_w))
    f64 = filt.astype(np.float64)
    for i in range(n_h):
        for j in range(n_w):
            window = padded[:, i * stride : i * stride + h_f, j * stride : j * stride + w_f]
            out[i, j] = np.sum(window * f64)
    return out
