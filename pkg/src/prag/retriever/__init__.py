from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, \
    write_checkpoint
from .config import TrainConfig
from .gradcheck import GradCheckReport, gradient_check
from .model import (Batch, LatentQuery, NoEvidenceError, RetrieverModel, assemble_input,
                    attention_scores, build_batch, forward, forward_query, init_model, joint_loss,
                    loss_and_grads, predict_rating, query_from_histories)
from .train import Adam, TrainingError, TrainResult, train, training_examples

__all__ = [
    "Adam", "Batch", "CheckpointError", "GradCheckReport", "LatentQuery", "NoEvidenceError",
    "RetrieverModel", "TrainConfig", "TrainResult", "TrainingError", "assemble_input",
    "attention_scores", "build_batch", "forward", "forward_query", "gradient_check",
    "init_model", "joint_loss", "load_checkpoint", "loss_and_grads", "predict_rating",
    "query_from_histories", "read_checkpoint", "save_checkpoint", "train",
    "training_examples", "write_checkpoint",
]
