"""
TIVG Pipeline Services Package
==============================

Пакет сервисов конвейера: признаки, кластеризация, граф, пары,
триплеты, обучение метрики, синтетический мир и оценка.

Author: TIVG Team
License: MIT
"""

from .feature_service import FeatureService
from .clustering_service import ClusteringService
from .neighbor_service import NeighborService
from .graph_service import GraphService
from .transitivity_service import TransitivityService
from .sampler_service import SamplerService
from .metric_service import MetricService
from .synth_service import SynthService
from .eval_service import EvalService

__all__ = [
    "FeatureService",
    "ClusteringService",
    "NeighborService",
    "GraphService",
    "TransitivityService",
    "SamplerService",
    "MetricService",
    "SynthService",
    "EvalService",
]
