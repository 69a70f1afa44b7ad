"""Iterative optical-flow refinement with a warping-consistency quality map
and a confidence-weighted regression loss, on a small numpy autodiff core."""

from .errors import (
    CheckpointFormatError,
    ConfigError,
    FlowFormatError,
    GraphStateError,
    LayoutError,
    NonFiniteError,
    NoValidPixelsError,
    PaddingRequiredError,
    ShapeError,
    TruncatedFileError,
)
from .flow_ops import FlowField, SciMap, local_correlation, sci_map, warp
from .losses import ConfidenceMap, LossConfig, apply_confidence_schedule, confidence_map, l1_flow_loss, rfl_loss, sequence_loss
from .metrics import EvalReport, epe, error_map, fl_all
from .model import FlowModel, IterationTrace, ModelConfig, image_to_tensor
from .tensor import Tensor, default_dtype, no_grad, set_default_dtype

__version__ = "0.1.0"
