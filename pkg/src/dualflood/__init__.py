"""Graph neural network surrogate for flood routing with mass-conservation losses."""
from .data import EventSeries, FeatureLayout, NormStats, fit_normalizer, load_dataset, save_dataset
from .errors import (ConfigError, DataError, DatasetFormatError, DivergenceError, DualFloodError,
                     SchemaMismatchError)
from .graph import FloodGraph, compute_node_fluxes, validate_graph, volume_to_depth
from .model import DualFloodGNN, ModelConfig, forward_step, init_model

__version__ = "0.1.0"
