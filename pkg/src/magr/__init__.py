"""MagR: l-infinity weight-magnitude reduction before low-bit weight quantization."""

from .errors import CapacityError, ConfigError, DataError, MagRError, PipelineError, TensorFormatError
from .magr import MagRConfig, MagRReport, magr_preprocess, objective_value
from .pipeline import LayerRecord, RunReport, run_pipeline, synth_chain, synth_layer
from .prox import (
    ProjectionResult,
    project_l1_columns,
    project_l1_grouped,
    project_l1_vector,
    prox_linf_columns,
    prox_linf_grouped,
)
from .quant import (
    Method,
    QuantConfig,
    QuantizedLayer,
    cd_refine,
    layer_error,
    optq_quantize,
    quantize_layer,
    quantize_vector,
    rtn_quantize,
)
from .tensor import (
    SpectralEstimate,
    fraction_rank,
    gram,
    jacobi_eigh,
    power_iteration,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"
