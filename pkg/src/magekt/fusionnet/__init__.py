"""The knowledge-tracing predictor: encoding, fusion, recurrent head and training."""

from .model import (FusionModel, ModelConfig, asymmetric_fusion, cross_attention, encode_batch, forward_step,
                    gate_fusion, neighborhood_mean, predict_step, scaled_dot_attention, sequence_loss)
from .plans import VARIANTS, Batch, StepPlan, Vocab, collate, plan_step, plan_windows, window_instances
from .train import (HistoryRow, TrainedModel, TrainingDiverged, ablate, build_model, encode_instance, predict,
                    run_batch, score, train)

__all__ = [
    "FusionModel", "ModelConfig", "asymmetric_fusion", "cross_attention", "encode_batch", "forward_step",
    "gate_fusion", "neighborhood_mean", "predict_step", "scaled_dot_attention", "sequence_loss",
    "VARIANTS", "Batch", "StepPlan", "Vocab", "collate", "plan_step", "plan_windows", "window_instances",
    "HistoryRow", "TrainedModel", "TrainingDiverged", "ablate", "build_model", "encode_instance", "predict",
    "run_batch", "score", "train",
]
