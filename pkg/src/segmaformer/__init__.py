"""SegMaFormer: a hybrid Mamba / self-attention 3D segmentation network on a numpy autograd engine."""
from .complexity import ComplexityReport, count_flops, count_params, scaling_report
from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    DomainError,
    NumericError,
    SegMaFormerError,
)
from .network import (
    ModelConfig,
    SegMaFormer,
    StageConfig,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"
