"""peft-forge: low-rank adapters, absmax quantization and magnitude pruning at desk scale,
plus ROUGE/BLEU/BERTScore and a temporal satellite image-pair dataset pipeline."""

from .errors import ConsistencyError, FormatError, NumericError, ParameterError, PeftForgeError, ShapeError
from .lora import LoraAdapter, backward, forward, init_adapter, merge, trainable_param_count
from .numerics import SeededRng, finite_difference_grad, gaussian_matrix, matmul
from .prune import PruneMask, PrunePlan, apply_mask, compute_masks, reapply_masks, sparsity_report
from .quant import QuantizedTensor, dequantize, qlora_forward, quantize, storage_footprint

__version__ = "0.1.0"
