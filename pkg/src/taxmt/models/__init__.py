"""Attentional RNN and Transformer seq2seq models."""

from .base import Memory, Seq2SeqModel, load_model, pad_batch
from .config import ARCHITECTURES, RNN, TRANSFORMER, ModelConfig, ModelConfigError, TrainConfig, parameter_count
from .rnn import RNNAttentionModel, rnn_forward
from .training import TrainHistory, TrainingDiverged, make_batches, train
from .transformer import TransformerModel, transformer_forward


def build_model(cfg: ModelConfig) -> Seq2SeqModel:
    """Allocate and initialize the parameters for ``cfg``."""
    cfg.validate()
    cls = RNNAttentionModel if cfg.architecture == RNN else TransformerModel
    return cls(cfg)


__all__ = [
    "ARCHITECTURES", "RNN", "TRANSFORMER", "Memory", "ModelConfig", "ModelConfigError", "RNNAttentionModel",
    "Seq2SeqModel", "TrainConfig", "TrainHistory", "TrainingDiverged", "TransformerModel", "build_model",
    "load_model", "make_batches", "pad_batch", "parameter_count", "rnn_forward", "train", "transformer_forward",
]
