"""Batched inference and scheduling laboratory for early-exit transformer decoders."""

from .engine import CostModel, Engine, EngineConfig, Request, run
from .exit_policy import ExitTechnique, ThresholdSchedule
from .kv_cache import KvStore
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, ModelWeights, ToyDecoder

__all__ = [
    "CostModel",
    "Engine",
    "EngineConfig",
    "ExitTechnique",
    "KvStore",
    "MetricsReport",
    "ModelConfig",
    "ModelWeights",
    "Request",
    "ThresholdSchedule",
    "ToyDecoder",
    "compute_metrics",
    "run",
]
