"""Stacked-transformer multimodal trajectory prediction with region-based training."""

from .errors import (
    ConfigError,
    ContractError,
    DegenerateMaskError,
    InvalidValueError,
    MMTransformerError,
    ParseError,
    SchemaError,
    ShapeError,
    TrainingDivergenceError,
)
from .evaluation import EvalConfig, compute_metrics, evaluate_split, mr_matrix, nms_select
from .model import MMTransformer, ModelConfig, PredictionSet, load_checkpoint, save_checkpoint
from .partition import RegionPartition, constrained_kmeans, fit_partition, manual_fan_partition, map_proposals_to_regions
from .scene import Scenario, SyntheticConfig, generate_synthetic_dataset, normalize_scenario, read_dataset, write_dataset
from .training import TrainConfig, build_model, train

__version__ = "0.1.0"
