"""Meta-regularized prompt tuning for a frozen toy dual encoder.

A desk-scale, fully inspectable implementation: a closed-op-set autodiff
engine with exact second-order gradients, a frozen dual encoder whose only
trainable parameters are two prompt vectors, an embedding-anchoring
regularizer whose gradient is gated by a small meta-learned network, and a
one-step bi-level trainer with manifold-mixup task augmentation.
"""

from . import autodiff
from .encoder import (
    ClassSet,
    EncoderWeights,
    PromptSet,
    contrastive_loss_value,
    cosine_similarities,
    encode_image,
    encode_text,
    one_hot,
    predict_probs,
    reference_image_embedding,
    reference_text_embedding,
)
from .errors import (
    ConfigError,
    DataError,
    LabelError,
    NonFiniteError,
    PromptregError,
    ShapeError,
    UnboundInputError,
)
from .estimator import PromptTunedClassifier
from .metrics import (
    AlignmentDiagnostics,
    accuracy,
    alignment_terms,
    evaluate_run,
    harmonic_mean,
    task_overfitting_score,
    taylor_gap,
)
from .pipeline import benchmark_task_spec, benchmark_train_config, build_model, run_training
from .regularizer import ModulatorParams, modulate, modulation_vector, regularizer_value
from .tasks import Dataset, TaskSpec, domain_shift, generate, parse_shift
from .training import (
    TrainConfig,
    TrainResult,
    conventional_step,
    split_episode,
    task_augment,
    train,
    train_arrays,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentDiagnostics",
    "ClassSet",
    "ConfigError",
    "DataError",
    "Dataset",
    "EncoderWeights",
    "LabelError",
    "ModulatorParams",
    "NonFiniteError",
    "PromptSet",
    "PromptTunedClassifier",
    "PromptregError",
    "ShapeError",
    "TaskSpec",
    "TrainConfig",
    "TrainResult",
    "UnboundInputError",
    "accuracy",
    "alignment_terms",
    "autodiff",
    "benchmark_task_spec",
    "benchmark_train_config",
    "build_model",
    "contrastive_loss_value",
    "conventional_step",
    "cosine_similarities",
    "domain_shift",
    "encode_image",
    "encode_text",
    "evaluate_run",
    "generate",
    "harmonic_mean",
    "modulate",
    "modulation_vector",
    "one_hot",
    "parse_shift",
    "predict_probs",
    "reference_image_embedding",
    "reference_text_embedding",
    "regularizer_value",
    "run_training",
    "split_episode",
    "task_augment",
    "task_overfitting_score",
    "taylor_gap",
    "train",
    "train_arrays",
]
