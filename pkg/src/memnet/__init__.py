"""MemNet: linear controllers over a FIFO key-value event memory.

Submodules:

* :mod:`memnet.core` -- parameters, memory buffer, Gaussian read, one step
* :mod:`memnet.training` -- BPTT, finite-difference oracle, Adam, training loop
* :mod:`memnet.baselines` -- tanh RNN and LSTM with the same trainer interface
* :mod:`memnet.tasks` -- Hénon, airline, copy/reverse and bAbI data
* :mod:`memnet.harness` -- experiment protocols and CSV/JSON artifacts
* :mod:`memnet.cli` -- the ``memnet`` command
"""

from .core import Dims, EventMemory, ModelParams, init_params, param_count, step
from .training import MemNet, TrainConfig, train_sequences

__all__ = [
    "Dims",
    "EventMemory",
    "MemNet",
    "ModelParams",
    "TrainConfig",
    "init_params",
    "param_count",
    "step",
    "train_sequences",
]

__version__ = "0.1.0"
