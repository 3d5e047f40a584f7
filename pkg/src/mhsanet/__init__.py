"""Multi-head self-attention branch for occlusion-robust person re-identification.

A small numpy autodiff engine, the attention branch with its regularizers,
PK-sampled training, retrieval metrics and a synthetic occluded-person world.
"""
from .config import RunConfig
from .data_io import SyntheticSpec, attention_occlusion_score, generate_dataset
from .errors import ConfigError, ContractError, DataError, DimensionError, EvaluationError, NumericError
from .estimator import MHSANet
from .metrics import EvalReport, cmc_map
from .model import MHSAModel, ModelConfig
from .pipeline import evaluate, run, sweep
from .training import train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "EvalReport", "EvaluationError", "MHSANet",
    "MHSAModel", "ModelConfig", "NumericError", "RunConfig", "SyntheticSpec", "attention_occlusion_score",
    "cmc_map", "evaluate", "generate_dataset", "run", "sweep", "train",
]
