"""Test-time structural alignment for graph neural networks.

Pretrain a GraphSAGE-style model on a source graph, then adapt its
predictions on a structure-shifted target graph at inference time via
class-pair edge reweighting, degree-conditioned mixing of self and
neighbor-aggregated representations, and decision-boundary refinement.
"""

__version__ = "0.1.0"

from tsa.alignment import AdaptTrace, AlphaParams, GammaTable, TsaConfig, adapt
from tsa.csbm import CONDITION_NAMES, CsbmSpec, builtin_spec, generate
from tsa.diagnostics import ShiftReport, evaluate, shift_report
from tsa.graph import EdgeWeights, Graph, SplitMasks, make_splits
from tsa.graph_io import load_graph, save_graph
from tsa.harness import ExperimentConfig, ResultTable, emit_table, run_experiment
from tsa.model import ModelState, TrainConfig, forward, load_model, pretrain, save_model
from tsa.refine import RefineParams, refine

__all__ = [
    "__version__",
    "adapt", "AdaptTrace", "AlphaParams", "GammaTable", "TsaConfig",
    "builtin_spec", "generate", "CsbmSpec", "CONDITION_NAMES",
    "shift_report", "ShiftReport", "evaluate",
    "Graph", "EdgeWeights", "SplitMasks", "make_splits",
    "load_graph", "save_graph",
    "ExperimentConfig", "ResultTable", "run_experiment", "emit_table",
    "ModelState", "TrainConfig", "pretrain", "forward", "load_model", "save_model",
    "refine", "RefineParams",
]
