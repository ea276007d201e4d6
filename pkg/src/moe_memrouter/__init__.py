"""kNN-MoE: retrieval of offline-optimised expert assignments for a toy MoE transformer."""

from .builder import BuildParams, BuildReport, build_memory
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Corpus, DomainSpec, generate_corpus
from .evaluation import KNN_MOE, KNN_MOE_SELECTIVE, ZERO_SHOT, EvalReport, evaluate
from .model import ModelConfig, MoETransformer, RoutingPlan, pi
from .router import route
from .store import LayerMemory, load_memory, query, save_memory
from .train import TrainOptions, pretrain

__all__ = [
    "BuildParams",
    "BuildReport",
    "build_memory",
    "load_checkpoint",
    "save_checkpoint",
    "Corpus",
    "DomainSpec",
    "generate_corpus",
    "KNN_MOE",
    "KNN_MOE_SELECTIVE",
    "ZERO_SHOT",
    "EvalReport",
    "evaluate",
    "ModelConfig",
    "MoETransformer",
    "RoutingPlan",
    "pi",
    "route",
    "LayerMemory",
    "load_memory",
    "query",
    "save_memory",
    "TrainOptions",
    "pretrain",
]
