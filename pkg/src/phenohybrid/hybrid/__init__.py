"""Differentiable two-stage dormancy model with a learned chill response."""

from .io import load_model, read_loss_trace, save_model, write_loss_trace
from .model import (
    BloomDistribution,
    ChillHoursSurrogate,
    ConstantChill,
    HybridParams,
    MlpChill,
    ScaledUtahChill,
    forward,
    nll_loss,
    predict_bloom_soft,
    soft_threshold,
)
from .training import (
    HybridModel,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    train,
    train_ablation_utah,
)
