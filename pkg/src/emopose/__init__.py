"""Emotion-conditioned short-horizon pose forecasting.

Three predictors over 10-frame observation windows and 15-frame horizons:
a pose-only recurrent baseline, a fusion predictor that concatenates pose
with gate-scaled emotion embeddings, and an autoregressive world model that
rolls predictions forward step by step.  Everything runs on a small
from-scratch reverse-mode autodiff core and is deterministic given a seed.
"""

__version__ = "0.1.0"

from .autodiff import Parameter, Tape, Tensor, backward, fd_gradient
from .data import (
    EMOTION_DIM,
    POSE_DIM,
    FrameRecord,
    NormStats,
    SequenceDataset,
    WindowConfig,
    WindowSample,
    apply_norm,
    compute_norm_stats,
    invert_norm,
    load_frames,
    make_windows,
    prepare_splits,
    save_frames,
    split_dataset,
    synth_generate,
)
from .errors import ContractError, ParseError, SchemaError, ShapeError
from .evaluation import (
    GateSummary,
    PerturbationConfig,
    SensitivityResult,
    counterfactual_delta,
    evaluate_mpjpe,
    gate_report,
    mpjpe,
    sensitivity_sweep,
)
from .models import (
    ModelConfig,
    ModelParams,
    encode_window,
    forward_windows,
    fuse,
    init_params,
    load_checkpoint,
    lstm_cell,
    predict_direct,
    predict_rollout,
    save_checkpoint,
)
from .training import (
    AdamState,
    EpochLog,
    FitResult,
    TrainConfig,
    adam_step,
    batch_mse,
    evaluate_loss,
    fit,
    mse_loss,
)
