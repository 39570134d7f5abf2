"""Desk-scale workbench for patience-based early exiting.

A trainable multi-exit transformer encoder, cross-layer similarity
measures for single- and multi-label classification, a family of exit
policies, and a sweep harness that produces speedup-accuracy curves and
exit-layer distributions.
"""

from .data import Dataset, DataSplits, Example, SyntheticSpec, Vocab, generate_synthetic, load_jsonl
from .harness import EvalResult, PolicySpec, SweepResult, compare_policies, evaluate, pareto_curve, sweep
from .model import ModelConfig, MultiExitModel, load_checkpoint, save_checkpoint
from .policies import ExitPolicy, ExitTrace, FixedExit, FPabee, Pabee
from .similarity import ProbDist, SimilarityMeasure, score
from .training import TrainConfig, grid_search, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DataSplits",
    "Example",
    "SyntheticSpec",
    "Vocab",
    "generate_synthetic",
    "load_jsonl",
    "EvalResult",
    "PolicySpec",
    "SweepResult",
    "compare_policies",
    "evaluate",
    "pareto_curve",
    "sweep",
    "ModelConfig",
    "MultiExitModel",
    "load_checkpoint",
    "save_checkpoint",
    "ExitPolicy",
    "ExitTrace",
    "FixedExit",
    "FPabee",
    "Pabee",
    "ProbDist",
    "SimilarityMeasure",
    "score",
    "TrainConfig",
    "grid_search",
    "train",
    "__version__",
]
