"""MSE objective, Adam, and the epoch loop with per-split logging.

The per-sample loss is the horizon-averaged squared Euclidean distance over
the 66 pose coordinates; a batch loss is the mean over its samples.  All
logged losses are normalized-space values.  Per-epoch val/test entries come
from a pure evaluation pass after that epoch's updates, while the train
entry is the running mean of the batch losses seen during the epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .data import POSE_DIM, WindowSample
from .errors import ContractError, ShapeError
from .models import ModelConfig, ModelParams, forward_windows, init_params

__all__ = [
    "EVAL_BATCH",
    "mse_loss",
    "batch_mse",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "EpochLog",
    "FitResult",
    "windows_to_arrays",
    "evaluate_loss",
    "fit",
]

# Fixed evaluation batch size; every evaluation pass (inside fit and from
# the CLI) uses it, so recomputed losses reproduce the logged ones bitwise.
EVAL_BATCH = 256


def mse_loss(pred, target) -> float:
    """(1/T) * sum_t ||pred_t - target_t||^2 for a (horizon, 66) pair."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff) / pred.shape[0])


def batch_mse(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Differentiable batch loss: mean over samples of the per-sample loss.

    `pred` is (B, horizon*66), `targets` is (B, horizon, 66).
    """
    b, horizon = targets.shape[0], targets.shape[1]
    flat = targets.reshape(b, horizon * POSE_DIM)
    if pred.shape != flat.shape:
        raise ShapeError(f"batch_mse: prediction shape {pred.shape} vs targets {flat.shape}")
    diff = ad.sub(pred, Tensor(flat))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / (b * horizon))


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus the step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    _scratch: dict = field(default_factory=dict, repr=False)


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update per scalar coordinate; clears grads after."""
    params = list(params)
    for p in params:
        if np.isnan(p.grad).any():
            raise ContractError(f"adam_step: NaN gradient in parameter {p.name!r}")
    state.t += 1
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        upd = state._scratch.setdefault(p.name, np.empty_like(p.data))
        # v <- b2 v + (1-b2) g^2 ; m <- b1 m + (1-b1) g
        np.multiply(p.grad, p.grad, out=upd)
        upd *= 1.0 - state.beta2
        v *= state.beta2
        v += upd
        m *= state.beta1
        np.multiply(p.grad, 1.0 - state.beta1, out=upd)
        m += upd
        # theta <- theta - lr * (m/b1t) / (sqrt(v/b2t) + eps)
        np.divide(v, b2t, out=upd)
        np.sqrt(upd, out=upd)
        upd += state.eps
        np.divide(m, upd, out=upd)
        upd *= state.lr / b1t
        p.data -= upd
        p.zero_grad()


def _clip_grads(params: list[Parameter], max_norm: float) -> None:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    clip_norm: float | None = None  # optional max-norm clip; useful for rollout training

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ContractError(f"invalid train config {self}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float | None
    test_loss: float | None
    lambda_emo: float | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "test_loss": self.test_loss,
            "lambda_emo": self.lambda_emo,
        }


@dataclass
class FitResult:
    params: ModelParams  # final-epoch parameters
    logs: list[EpochLog]
    best_params: ModelParams  # lowest-val-loss snapshot (final params when no val split)


def windows_to_arrays(windows: list[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xp = np.stack([w.x_pose for w in windows])
    xe = np.stack([w.x_emotion for w in windows])
    y = np.stack([w.y_pose for w in windows])
    return xp, xe, y


def evaluate_loss(params: ModelParams, windows: list[WindowSample]) -> float | None:
    """Mean per-sample loss over a split, computed without recording."""
    if not windows:
        return None
    xp, xe, y = windows_to_arrays(windows)
    n, horizon = y.shape[0], y.shape[1]
    total = 0.0
    for lo in range(0, n, EVAL_BATCH):
        hi = min(lo + EVAL_BATCH, n)
        pred = forward_windows(params, xp[lo:hi], xe[lo:hi]).data
        diff = pred - y[lo:hi].reshape(hi - lo, -1)
        total += float(np.sum(diff * diff))
    return total / (n * horizon)


def fit(
    kind: str,
    train: list[WindowSample],
    val: list[WindowSample],
    test: list[WindowSample],
    cfg: TrainConfig,
    hidden: int = 128,
) -> FitResult:
    """Minibatch Adam on the MSE objective; deterministic given cfg.seed.

    The observation length and horizon come from the training windows; the
    input window lists are never mutated.
    """
    if not train:
        raise ContractError("fit: training split is empty")
    obs_len, horizon = train[0].x_pose.shape[0], train[0].y_pose.shape[0]
    params = init_params(kind, cfg.seed, ModelConfig(obs_len=obs_len, horizon=horizon, hidden=hidden))
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    xp, xe, y = windows_to_arrays(train)
    n = len(train)
    logs: list[EpochLog] = []
    best_val = np.inf
    best_params = params

    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sq_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            with Tape():
                pred = forward_windows(params, xp[idx], xe[idx])
                loss = batch_mse(pred, y[idx])
                loss.backward()
            if cfg.clip_norm is not None:
                _clip_grads(params.parameters(), cfg.clip_norm)
            sq_sum += loss.item() * len(idx) * horizon
            adam_step(params.parameters(), adam)
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=sq_sum / (n * horizon),
                val_loss=evaluate_loss(params, val),
                test_loss=evaluate_loss(params, test),
                lambda_emo=params.gate_value(),
            )
        )
        vl = logs[-1].val_loss
        if vl is not None and vl < best_val:
            best_val = vl
            best_params = params.clone()
    return FitResult(params=params, logs=logs, best_params=best_params)
