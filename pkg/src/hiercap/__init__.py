"""Interpretable image captioning with a causal-convolution decoder and hierarchical attention.

Numpy reverse-mode autodiff underneath; numba kernels for the hot loops when available.
"""
from .dataset import Vocabulary, build_vocab, generate_dataset, generate_scene
from .decoder import DecoderConfig, HierAttDecoder
from .encoder import EncoderConfig, VisualEncoder
from .interpretability import ie_loss, posterior, select_pairs
from .metrics import MetricReport, corpus_report
from .model import Captioner, default_config, paper_scale_config
from .rwa import RegionWordAttention, RelevanceMatrix
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Captioner",
    "DecoderConfig",
    "EncoderConfig",
    "HierAttDecoder",
    "MetricReport",
    "RegionWordAttention",
    "RelevanceMatrix",
    "TrainConfig",
    "VisualEncoder",
    "Vocabulary",
    "build_vocab",
    "corpus_report",
    "default_config",
    "generate_dataset",
    "generate_scene",
    "ie_loss",
    "paper_scale_config",
    "posterior",
    "select_pairs",
]
