"""Transformer neural processes: uncertainty-aware meta-learning as masked
sequence modeling, with autoregressive, diagonal, and joint-Gaussian decoders,
plus the GP regression, wheel-bandit, and Bayesian-optimization harnesses
used to exercise them.
"""

from .autodiff import Tape, Tensor, backward_gradients, finite_difference_check, masked_softmax
from .cnp import CnpConfig, CnpModel, cnp_predict, create_cnp
from .errors import ConfigError, NumericError, ShapeError
from .model import (
    DiagonalPrediction,
    JointGaussianPrediction,
    MaskSpec,
    ModelConfig,
    TnpModel,
    TokenSequence,
    build_mask,
    create_model,
    desk_config,
    embed_sequence,
    log_likelihood_diag,
    log_likelihood_joint,
    predict_autoregressive_teacher_forced,
    predict_diagonal,
    predict_joint,
    predict_next_point_conditionals,
    sample_targets_autoregressive,
    symmetrized_log_likelihood,
)
from .rng import rng_stream
from .tasks import (
    BenchmarkFunction,
    KernelSpec,
    TaskBatch,
    WheelProblem,
    benchmark_function,
    benchmark_value,
    kernel_matrix,
    sample_gp_batch,
    sample_wheel_batch,
    split_context_target,
    wheel_rewards,
)
from .training import (
    AdamState,
    TrainConfig,
    cosine_lr,
    pretraining_loss,
    reward_dropout_mask,
    train_run,
    training_loss,
)

__version__ = "0.1.0"
