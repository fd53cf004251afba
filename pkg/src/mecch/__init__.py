"""Metapath-context convolution for heterogeneous graphs."""

from .context import (
    ContextStore,
    MetapathContext,
    build_all_contexts,
    build_context,
    build_khop_store,
    count_aggregations,
    khop_context,
    oracle_enumerate_instances,
)
from .graph import HeteroGraph, Metapath, Schema, enumerate_metapaths, load_graph, make_typed_tree
from .model import ModelConfig, forward, init_params
from .training import SplitSpec, TrainConfig, evaluate, train

__version__ = "0.1.0"
