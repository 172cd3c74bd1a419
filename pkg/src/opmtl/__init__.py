"""Overparameterised multitask training with exact contraction for inference."""

from .tensor import Tensor, conv2d, hadamard, matmul, permute_axes
from .linalg import SvdResult, init_dense, spectral_factorize, svd
from .layers import (
    FactorizedConv2d,
    FactorizedLinear,
    MtlModel,
    backward,
    compose_diag,
    contract_conv,
    contract_linear,
    forward,
)
from .trainer import EpochReport, TaskLoss, TrainConfig, Trainer, frobenius_penalty, subset_sample
from .model_io import (
    CostReport,
    contract_model,
    count_flops,
    count_params,
    load_archive,
    load_model,
    save_archive,
    save_model,
    verify_equivalence,
)
from .bench import (
    MetricReport,
    MultitaskDataset,
    evaluate,
    gen_linear_teacher,
    gen_shapes_dataset,
    run_experiment,
)

__version__ = "0.1.0"
