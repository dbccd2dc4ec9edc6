"""CPU inference engine for CNNs with fine-grained sparsity.

Filters or input tensors are stored in a node-based sparse format (one
(index, value) pair per nonzero, sentinel-terminated segments) and the
convolution kernels skip every multiply a zero would contribute, so work
scales with the nonzero count rather than the tensor size.
"""

from .kernels import (
    ConvGeometry,
    conv_dense_input_sparse_filter,
    conv_dense_input_sparse_filter_counted,
    conv_sparse_input_dense_filter,
    dense_conv_reference,
    dot_dense_sparse,
    transpose_matrix,
    transpose_tensor3,
)
from .layers import (
    BatchNormParams,
    ForwardStrategy,
    LayerSpec,
    StrategyKind,
    apply_activation,
    apply_batchnorm,
    conv_forward_dense,
    conv_forward_sparse_input,
    conv_forward_strategy_I,
    conv_forward_strategy_II,
    merged_conv_pool,
    pad_tensor,
    pool_sparse,
    pool_standalone,
)
from .network import (
    BENCH_KINDS,
    ConvParams,
    DensityRecord,
    ForwardResult,
    NetworkSpec,
    NetworkWeights,
    RunReport,
    build_benchmark_net,
    density_evolution,
    format_model_text,
    forward,
    load_weights,
    parse_model_text,
    prepare,
    prune_weights,
    random_weights,
    save_weights,
)
from .sparse_core import (
    AxisOrder2,
    AxisOrder3,
    DenseTensor3,
    FormatError,
    Node,
    SparseMatrix,
    SparseTensor3,
    SparseTensor4,
    SparseVector,
    dense3_from_bytes,
    dense3_to_bytes,
    densify_matrix,
    densify_tensor3,
    density,
    prune_random,
    sparse3_from_bytes,
    sparse3_to_bytes,
    sparsify_matrix,
    sparsify_tensor3,
)

__version__ = "0.1.0"
