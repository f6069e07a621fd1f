"""Dual-domain LSTM: LSTMs whose batch normalization pools statistics from
two related domains with learnable contribution weights."""

from .cells import StackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SequenceDataset, SynthConfig, generate_coupled_markov
from .model import Model
from .training import RunLog, TrainConfig, evaluate_frame_accuracy, train

__version__ = "0.1.0"
__all__ = ["Model", "RunLog", "SequenceDataset", "StackConfig", "SynthConfig", "TrainConfig",
           "evaluate_frame_accuracy", "generate_coupled_markov", "load_checkpoint",
           "save_checkpoint", "train"]
