"""Desk-scale lab for sparse Mixture-of-Experts vision transformers."""

from .analysis import (Heatmap, RoutingLog, build_heatmap, empirical_degree, expert_load,
                       recommend_layers, specialization_score)
from .counting import CountReport, count_flops, count_params, routing_degree
from .data import Dataset, gen_cluster_classification, gen_region_segmentation
from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     VimoeError)
from .model import ModelConfig, ViMoE, build, load_model, save_checkpoint
from .train import TrainConfig, evaluate, layer_scan, train

__version__ = "0.1.0"
