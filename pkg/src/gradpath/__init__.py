"""Gradient-path analysis, cost modelling and a small autodiff engine for
CNN computation graphs (PlainNet, ResNet, PRN, DenseNet, SparseNet, VoVNet,
Darknet-53, ELAN, with optional cross-stage-partial transforms)."""

__version__ = "0.1.0"

from .analysis import (GradPathReport, GradSource, LayerReport, aggregated_features,
                       analyze, duplication_overlap, shortest_longest, sources, timestamps)
from .archspec import ArchSpec, CSPConfig, ElanStack, Family, SpecError, dumps, load, loads
from .autodiff import (Value, arrival_trace, backward, finite_difference_check, forward,
                       init_params, load_params, save_params)
from .cost import CostReport, CostRatio, compare, cost, mac_optimality_check
from .graph import (CompGraph, Edge, EdgeTag, GraphBuilder, GraphError, Kind, Node,
                    topo_order, unfold, validate)
from .train import SyntheticDataset, TrainConfig, TrainResult, generate, train
from .zoo import apply_csp, build, build_vovnet, insert_stop_grad, replan_elan

__all__ = [name for name in dir() if not name.startswith("_")]
