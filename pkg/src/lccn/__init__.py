"""Convolutional network engine with low-cost collaborative layers.

Each accelerated convolution carries a cheap companion convolution whose
rectified output predicts which cells of the main output are zero; those
cells are skipped by deleting the matching rows of the im2col patch matrix
before the multiplication.  The package covers inference with exact MAC
accounting, FLOP formulas and wall-clock benchmarking, desk-scale SGD
training, and model persistence.
"""

from .blocks import (
    AFT,
    BEF,
    POINTWISE,
    SHARED,
    AccelBlock,
    BatchNormParams,
    accel_forward,
    gate,
    lccl_forward,
    make_accel_block,
    smooth_l1l2,
    smooth_l1l2_grad,
)
from .convolution import (
    ConvCounters,
    ConvSpec,
    Im2colMatrix,
    RowMask,
    conv_direct,
    conv_gemm,
    conv_gemm_masked,
    gemm,
    im2col,
)
from .data import ToyDataset, make_toy_dataset
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .flops import (
    FlopsReport,
    bench_block,
    compare_realistic,
    dense_flops,
    graph_dense_flops,
    lccl_flops,
    speedup_ratio,
    speedup_ratio_basic,
)
from .graph import (
    Graph,
    block_skip_check,
    build_resnet_cifar,
    build_resnet_imagenet,
    build_small_testnet,
    forward,
)
from .serialization import load, load_tensor, save, save_tensor
from .tensor import Shape, Tensor, hadamard, relu, sparsity, zeros
from .training import SgdConfig, backward_gate, grad_check, lr_at, train

__all__ = [
    "AFT",
    "BEF",
    "POINTWISE",
    "SHARED",
    "AccelBlock",
    "BatchNormParams",
    "ConfigError",
    "ConvCounters",
    "ConvSpec",
    "FlopsReport",
    "FormatError",
    "Graph",
    "Im2colMatrix",
    "RowMask",
    "SgdConfig",
    "Shape",
    "ShapeError",
    "Tensor",
    "ToyDataset",
    "TrainingDiverged",
    "accel_forward",
    "backward_gate",
    "bench_block",
    "block_skip_check",
    "build_resnet_cifar",
    "build_resnet_imagenet",
    "build_small_testnet",
    "compare_realistic",
    "conv_direct",
    "conv_gemm",
    "conv_gemm_masked",
    "dense_flops",
    "forward",
    "gate",
    "gemm",
    "grad_check",
    "graph_dense_flops",
    "hadamard",
    "im2col",
    "lccl_flops",
    "lccl_forward",
    "load",
    "load_tensor",
    "lr_at",
    "make_accel_block",
    "make_toy_dataset",
    "relu",
    "save",
    "save_tensor",
    "smooth_l1l2",
    "smooth_l1l2_grad",
    "sparsity",
    "speedup_ratio",
    "speedup_ratio_basic",
    "train",
    "zeros",
]
