"""Knowledge tracing as dynamic link classification on a continuous-time
interaction graph: graph store, feature encoders, twin recurrent towers,
training/evaluation harness, and a CLI."""

from .config import RunConfig
from .graph import (DynamicGraph, Interaction, NeighborSequence, SplitPlan,
                    chronological_batches, ingest, interval_stats, plan_split,
                    recent_neighbors, repeat_stats)
from .metrics import auc_roc, average_precision
from .model import KnowledgeTracer
from .training import EvalReport, evaluate, mastery_trace, predict_pair, train

__all__ = [
    "RunConfig", "DynamicGraph", "Interaction", "NeighborSequence", "SplitPlan",
    "chronological_batches", "ingest", "interval_stats", "plan_split",
    "recent_neighbors", "repeat_stats", "auc_roc", "average_precision",
    "KnowledgeTracer", "EvalReport", "evaluate", "mastery_trace",
    "predict_pair", "train",
]

__version__ = "0.1.0"
