"""Embedding models for personalized product search.

Query-only (QEM), user-interpolated (HEM), attentive (AEM), zero-attention (ZAM)
and transformer-encoded (TEM) purchase intents, trained with negative sampling
on a small numpy autodiff tape and evaluated by full-collection ranking.
"""
from .corpus import PreparedCorpus, prepare_corpus, synth_generate
from .evaluation import MetricsReport, evaluate, paired_t_test
from .models import MODEL_KINDS, ModelConfig, init_params
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "MODEL_KINDS",
    "MetricsReport",
    "ModelConfig",
    "PreparedCorpus",
    "TrainConfig",
    "evaluate",
    "init_params",
    "paired_t_test",
    "prepare_corpus",
    "synth_generate",
    "train",
]
