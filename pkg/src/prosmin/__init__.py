"""Probabilistic self-distillation by scoring-rule minimisation."""
import os as _os

# BLAS pools read these once, when numpy is first imported
_threads = _os.environ.get("PROSMIN_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .numeric import GradientTape, RealTensor, backward, finite_difference
from .scoring import (
    Family,
    SampleSet,
    ScoreConfig,
    adjusted_score_batch,
    energy_score_estimate,
    expected_score_mc,
    kernel_score_estimate,
)
from .model import ModelConfig, NetworkPair
from .train import TrainConfig, train

__version__ = "0.1.0"
