"""seqlab: sequence-modeling lab.

Temporal convolutional networks and recurrent baselines (LSTM, GRU,
vanilla RNN) built from first principles on a minimal taped reverse-mode
autodiff engine, with deterministic generators for the classic synthetic
stress tests and a reproducible training harness.
"""

from .config import ExperimentConfig
from .nn import RnnSpec, SequenceModel, TcnSpec, param_count, receptive_field
from .presets import get_preset, preset_names
from .tensor import Tape, Tensor, backward, record
from .trainer import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "RnnSpec",
    "SequenceModel",
    "Tape",
    "Tensor",
    "TcnSpec",
    "backward",
    "evaluate",
    "get_preset",
    "param_count",
    "preset_names",
    "receptive_field",
    "record",
    "train",
]
