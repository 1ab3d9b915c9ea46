"""The three predictors: pose-only baseline, gated fusion, and rollout world model.

All three share one stacked two-layer recurrent encoder.  The baseline sees
pose frames only (input width 66); the gated models see the fused frame
[pose | lambda * emotion] (width 86) where lambda is a single learnable
scalar.  Direct predictors decode the final hidden state into all horizon
frames at once; the world model decodes one frame per step and feeds it
back as the next input while the last observed emotion embedding stays
fixed.

Model-space computation always happens in normalized coordinates; callers
denormalize only for metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import EMOTION_DIM, POSE_DIM, NormStats, WindowSample
from .errors import ContractError, ShapeError

__all__ = [
    "KINDS",
    "GATE_INIT",
    "FUSED_DIM",
    "ModelConfig",
    "LstmLayerParams",
    "ModelParams",
    "init_params",
    "fuse",
    "lstm_cell",
    "encode_window",
    "forward_windows",
    "predict_direct",
    "predict_rollout",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

KINDS = ("baseline", "fusion", "world")
FUSED_DIM = POSE_DIM + EMOTION_DIM
GATE_INIT = 0.1


@dataclass(frozen=True)
class ModelConfig:
    obs_len: int = 10
    horizon: int = 15
    hidden: int = 128

    def __post_init__(self):
        if self.obs_len < 1 or self.horizon < 1 or self.hidden < 1:
            raise ContractError(f"invalid model config {self}")


@dataclass
class LstmLayerParams:
    """One recurrent layer; gate rows of W_x/W_h/b are ordered input, forget, cell, output."""

    W_x: Parameter  # (4h, d)
    W_h: Parameter  # (4h, h)
    b: Parameter  # (4h,)
    d: int
    h: int


@dataclass
class ModelParams:
    kind: str
    config: ModelConfig
    layers: list[LstmLayerParams]
    gate: Parameter | None  # scalar emotion gate; None for the baseline
    dec_W: Parameter  # (out_dim, h)
    dec_b: Parameter  # (out_dim,)

    @property
    def input_dim(self) -> int:
        return POSE_DIM if self.kind == "baseline" else FUSED_DIM

    @property
    def out_dim(self) -> int:
        return POSE_DIM if self.kind == "world" else self.config.horizon * POSE_DIM

    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for layer in self.layers:
            ps.extend((layer.W_x, layer.W_h, layer.b))
        ps.extend((self.dec_W, self.dec_b))
        if self.gate is not None:
            ps.append(self.gate)
        return ps

    def gate_value(self) -> float | None:
        return None if self.gate is None else self.gate.item()

    def clone(self) -> "ModelParams":
        out = _build(self.kind, self.config)
        for mine, theirs in zip(self.parameters(), out.parameters()):
            theirs.data[...] = mine.data
        return out


def _build(kind: str, config: ModelConfig) -> ModelParams:
    """Zero-valued parameter skeleton with the right shapes."""
    if kind not in KINDS:
        raise ContractError(f"unknown model kind {kind!r}, expected one of {KINDS}")
    h = config.hidden
    d1 = POSE_DIM if kind == "baseline" else FUSED_DIM
    layers = []
    for idx, d in enumerate((d1, h), start=1):
        layers.append(
            LstmLayerParams(
                W_x=Parameter(np.zeros((4 * h, d)), f"layer{idx}.W_x"),
                W_h=Parameter(np.zeros((4 * h, h)), f"layer{idx}.W_h"),
                b=Parameter(np.zeros(4 * h), f"layer{idx}.b"),
                d=d,
                h=h,
            )
        )
    out_dim = POSE_DIM if kind == "world" else config.horizon * POSE_DIM
    gate = None if kind == "baseline" else Parameter(np.asarray(GATE_INIT), "gate.lambda")
    return ModelParams(
        kind=kind,
        config=config,
        layers=layers,
        gate=gate,
        dec_W=Parameter(np.zeros((out_dim, h)), "decoder.W"),
        dec_b=Parameter(np.zeros(out_dim), "decoder.b"),
    )


def init_params(kind: str, seed: int, config: ModelConfig | None = None) -> ModelParams:
    """Deterministically initialized parameters.

    Weight matrices draw from Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    each matrix using its own input width.  Biases start at zero except the
    forget-gate slice, which starts at 1.0 so early gradients are not
    starved by a closed memory; the emotion gate starts at GATE_INIT rather
    than the dead value 0.
    """
    config = config or ModelConfig()
    params = _build(kind, config)
    rng = np.random.default_rng(seed)
    h = config.hidden
    for layer in params.layers:
        bx = 1.0 / np.sqrt(layer.d)
        bh = 1.0 / np.sqrt(layer.h)
        layer.W_x.data[...] = rng.uniform(-bx, bx, layer.W_x.shape)
        layer.W_h.data[...] = rng.uniform(-bh, bh, layer.W_h.shape)
        layer.b.data[h : 2 * h] = 1.0
    bd = 1.0 / np.sqrt(h)
    params.dec_W.data[...] = rng.uniform(-bd, bd, params.dec_W.shape)
    return params


def fuse(pose, emotion, lam) -> Tensor:
    """[pose | lam * emotion]; pose coordinates pass through untouched."""
    p = pose if isinstance(pose, Tensor) else Tensor(pose)
    e = emotion if isinstance(emotion, Tensor) else Tensor(emotion)
    if p.shape[-1] != POSE_DIM:
        raise ShapeError(f"fuse: pose width must be {POSE_DIM}, got {p.shape}")
    if e.shape[-1] != EMOTION_DIM:
        raise ShapeError(f"fuse: emotion width must be {EMOTION_DIM}, got {e.shape}")
    lam_t = lam if isinstance(lam, Tensor) else Tensor(lam)
    if lam_t.data.size != 1:
        raise ShapeError(f"fuse: gate must be a scalar, got shape {lam_t.shape}")
    return ad.concat_cols([p, ad.mul(e, lam_t)])


def lstm_cell(
    x, state: tuple[Tensor, Tensor], layer: LstmLayerParams
) -> tuple[Tensor, Tensor]:
    """One step of the standard cell: i,f,o = sigmoid, g = tanh, c' = f*c + i*g, h' = o*tanh(c').

    Forward and backward are fused into a single tape op; the analytic
    backward is checked against central differences in the test suite.
    Accepts a single frame (d,) or a batch (B, d).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    h_prev, c_prev = state
    hsz = layer.h
    single = x.data.ndim == 1
    if x.data.shape[-1] != layer.d:
        raise ShapeError(f"lstm_cell: input width {x.data.shape[-1]} != layer d {layer.d}")
    if h_prev.data.shape != c_prev.data.shape or h_prev.data.shape[-1] != hsz:
        raise ShapeError(
            f"lstm_cell: state shapes {h_prev.data.shape}/{c_prev.data.shape} "
            f"do not match hidden size {hsz}"
        )

    x2 = x.data if not single else x.data[None, :]
    hp = h_prev.data if not single else h_prev.data[None, :]
    cp = c_prev.data if not single else c_prev.data[None, :]

    z = x2 @ layer.W_x.data.T + hp @ layer.W_h.data.T + layer.b.data
    # one sigmoid pass over the whole preactivation block, then the cell
    # quarter is overwritten with its tanh
    gates = ad.stable_sigmoid(z)
    i = gates[:, :hsz]
    f = gates[:, hsz : 2 * hsz]
    g = np.tanh(z[:, 2 * hsz : 3 * hsz])
    o = gates[:, 3 * hsz :]
    c_new = f * cp + i * g
    c_tanh = np.tanh(c_new)
    h_new = o * c_tanh

    out_h = Tensor(h_new[0] if single else h_new)
    out_c = Tensor(c_new[0] if single else c_new)

    inputs = (x, h_prev, c_prev, layer.W_x, layer.W_h, layer.b)
    if ad.tape_active() and any(t.requires_grad for t in inputs):
        out_h.requires_grad = True
        out_c.requires_grad = True

        def back(gh, gc):
            gh2 = gh if not single else gh[None, :]
            gc2 = gc if not single else gc[None, :]
            # gc_tot = gc + gh * o * (1 - c_tanh^2), built in place
            gc_tot = c_tanh * c_tanh
            np.subtract(1.0, gc_tot, out=gc_tot)
            gc_tot *= gh2
            gc_tot *= o
            gc_tot += gc2
            dz = np.empty_like(z)
            di = dz[:, :hsz]
            df = dz[:, hsz : 2 * hsz]
            dg = dz[:, 2 * hsz : 3 * hsz]
            do = dz[:, 3 * hsz :]
            np.multiply(gc_tot, g, out=di)  # dL/di
            di *= i
            di -= di * i  # i(1-i) chain via di - di*i
            np.multiply(gc_tot, cp, out=df)
            df *= f
            df -= df * f
            np.multiply(gc_tot, i, out=dg)
            dg -= dg * (g * g)
            np.multiply(gh2, c_tanh, out=do)
            do *= o
            do -= do * o
            if layer.W_x.requires_grad:
                layer.W_x.grad += dz.T @ x2
            if layer.W_h.requires_grad:
                layer.W_h.grad += dz.T @ hp
            if layer.b.requires_grad:
                layer.b.grad += dz.sum(axis=0)
            if x.requires_grad:
                gx = dz @ layer.W_x.data
                ad._accum(x, gx[0] if single else gx)
            if h_prev.requires_grad:
                ghp = dz @ layer.W_h.data
                ad._accum(h_prev, ghp[0] if single else ghp)
            if c_prev.requires_grad:
                gc_tot *= f  # reuse as gc_prev
                ad._accum(c_prev, gc_tot[0] if single else gc_tot)

        ad.record_op((out_h, out_c), back)
    return out_h, out_c


def _step(
    params: ModelParams, x: Tensor, states: list[tuple[Tensor, Tensor]]
) -> list[tuple[Tensor, Tensor]]:
    inp = x
    new_states = []
    for layer, st in zip(params.layers, states):
        h, c = lstm_cell(inp, st, layer)
        new_states.append((h, c))
        inp = h
    return new_states


def _lstm_window(
    xs: list[Tensor], layer: LstmLayerParams, state: tuple[Tensor, Tensor]
) -> tuple[list[Tensor], tuple[Tensor, Tensor]]:
    """One layer over a whole window, fused into a single tape op.

    The input projection runs as one (T*B, d) gemm and the backward is
    classic BPTT with the weight-gradient gemms batched over time; only the
    recurrent products stay sequential.  Returns every step's hidden state
    (the next layer consumes them all) plus the final (h, c).
    """
    h0, c0 = state
    T = len(xs)
    B = xs[0].data.shape[0]
    hsz = layer.h
    if any(x.data.shape != (B, layer.d) for x in xs):
        raise ShapeError(
            f"window inputs must all be ({B}, {layer.d}), got {[x.shape for x in xs]}"
        )
    x_cat = np.concatenate([x.data for x in xs], axis=0)  # step-major (T*B, d)
    zx = x_cat @ layer.W_x.data.T
    zx += layer.b.data

    inputs = (h0, c0, layer.W_x, layer.W_h, layer.b, *xs)
    recording = ad.tape_active() and any(t.requires_grad for t in inputs)
    hp, cp = h0.data, c0.data
    saves = []
    h_steps = []
    for t in range(T):
        z = zx[t * B : (t + 1) * B] + hp @ layer.W_h.data.T
        gates = ad.stable_sigmoid(z)
        i = gates[:, :hsz]
        f = gates[:, hsz : 2 * hsz]
        o = gates[:, 3 * hsz :]
        g = np.tanh(z[:, 2 * hsz : 3 * hsz])
        c = f * cp + i * g
        c_tanh = np.tanh(c)
        h = o * c_tanh
        if recording:
            saves.append((hp, cp, gates, g, c_tanh))
        hp, cp = h, c
        h_steps.append(h)

    hs = [Tensor(h) for h in h_steps]
    c_final = Tensor(cp)
    if recording:
        for out in hs:
            out.requires_grad = True
        c_final.requires_grad = True

        def back(*grads):
            gh_rec = np.zeros((B, hsz))
            gc_rec = np.array(grads[-1])
            dz_all = np.empty((T * B, 4 * hsz))
            for t in range(T - 1, -1, -1):
                hp_t, cp_t, gates, g, c_tanh = saves[t]
                i = gates[:, :hsz]
                f = gates[:, hsz : 2 * hsz]
                o = gates[:, 3 * hsz :]
                gh_rec += grads[t]
                gc_tot = c_tanh * c_tanh
                np.subtract(1.0, gc_tot, out=gc_tot)
                gc_tot *= gh_rec
                gc_tot *= o
                gc_tot += gc_rec
                dz = dz_all[t * B : (t + 1) * B]
                di = dz[:, :hsz]
                df = dz[:, hsz : 2 * hsz]
                dg = dz[:, 2 * hsz : 3 * hsz]
                do = dz[:, 3 * hsz :]
                np.multiply(gc_tot, g, out=di)
                di *= i
                di -= di * i
                np.multiply(gc_tot, cp_t, out=df)
                df *= f
                df -= df * f
                np.multiply(gc_tot, i, out=dg)
                dg -= dg * (g * g)
                np.multiply(gh_rec, c_tanh, out=do)
                do *= o
                do -= do * o
                gh_rec = dz @ layer.W_h.data
                gc_tot *= f
                gc_rec = gc_tot
            if layer.W_x.requires_grad:
                layer.W_x.grad += dz_all.T @ x_cat
            if layer.W_h.requires_grad:
                h_prev_cat = np.concatenate([s[0] for s in saves], axis=0)
                layer.W_h.grad += dz_all.T @ h_prev_cat
            if layer.b.requires_grad:
                layer.b.grad += dz_all.sum(axis=0)
            if any(x.requires_grad for x in xs):
                gx_all = dz_all @ layer.W_x.data
                for t, x in enumerate(xs):
                    if x.requires_grad:
                        ad._accum(x, gx_all[t * B : (t + 1) * B])
            if h0.requires_grad:
                ad._accum(h0, gh_rec)
            if c0.requires_grad:
                ad._accum(c0, gc_rec)

        ad.record_op((*hs, c_final), back)
    return hs, (hs[-1], c_final)


def encode_window(inputs, params: ModelParams) -> list[tuple[Tensor, Tensor]]:
    """Run both layers over the window from zero state; returns final (h, c) per layer."""
    xs = []
    for x in inputs:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim == 1:
            x = Tensor(x.data[None, :])
        xs.append(x)
    if not xs:
        raise ContractError("encode_window: needs at least one frame")
    batch = xs[0].data.shape[0]
    states = []
    for layer in params.layers:
        zeros = np.zeros((batch, layer.h))
        xs, final = _lstm_window(xs, layer, (Tensor(zeros), Tensor(zeros.copy())))
        states.append(final)
    return states


def _window_inputs(params: ModelParams, x_pose: np.ndarray, x_emotion: np.ndarray) -> list:
    obs = params.config.obs_len
    if x_pose.shape[1] != obs:
        raise ShapeError(f"expected {obs} observed frames, got {x_pose.shape[1]}")
    if params.kind == "baseline":
        return [Tensor(x_pose[:, t]) for t in range(obs)]
    return [fuse(x_pose[:, t], x_emotion[:, t], params.gate) for t in range(obs)]


def forward_windows(params: ModelParams, x_pose: np.ndarray, x_emotion: np.ndarray) -> Tensor:
    """Batched forward for any model kind.

    x_pose is (B, obs_len, 66), x_emotion is (B, obs_len, 20); the result is
    (B, horizon*66) with frames laid out row-major, differentiable when a
    tape is active.
    """
    states = encode_window(_window_inputs(params, x_pose, x_emotion), params)
    if params.kind != "world":
        return ad.affine(states[-1][0], params.dec_W, params.dec_b)
    # autoregressive rollout: seed with the last observed pose, keep the
    # last observed emotion fixed, feed each decoded frame back in
    p = Tensor(x_pose[:, -1])
    e_last = Tensor(x_emotion[:, -1])
    outs = []
    for _ in range(params.config.horizon):
        states = _step(params, fuse(p, e_last, params.gate), states)
        p = ad.affine(states[-1][0], params.dec_W, params.dec_b)
        outs.append(p)
    return ad.concat_cols(outs)


def _predict(params: ModelParams, sample: WindowSample) -> np.ndarray:
    y = forward_windows(params, sample.x_pose[None], sample.x_emotion[None])
    return y.data.reshape(params.config.horizon, POSE_DIM).copy()


def predict_direct(params: ModelParams, sample: WindowSample) -> np.ndarray:
    """One-shot prediction of all horizon frames from the final hidden state."""
    if params.kind not in ("baseline", "fusion"):
        raise ContractError(f"predict_direct: needs a baseline or fusion model, got {params.kind!r}")
    return _predict(params, sample)


def predict_rollout(params: ModelParams, sample: WindowSample) -> np.ndarray:
    """Autoregressive prediction, one decoded frame per step fed back as input."""
    if params.kind != "world":
        raise ContractError(f"predict_rollout: needs a world model, got {params.kind!r}")
    return _predict(params, sample)


@dataclass
class Checkpoint:
    params: ModelParams
    stats: NormStats | None
    split: dict | None


def save_checkpoint(
    params: ModelParams, stats: NormStats | None, path, split: dict | None = None
) -> None:
    """Single JSON object: kind, config, norm stats, and every parameter.

    Floats serialize via repr (shortest round-trip decimal), so a load
    restores values bitwise.
    """
    payload = {
        "kind": params.kind,
        "config": {
            "obs_len": params.config.obs_len,
            "horizon": params.config.horizon,
            "hidden": params.config.hidden,
        },
        "split": split,
        "norm_stats": stats.to_dict() if stats is not None else None,
        "params": {
            p.name: {"shape": list(p.shape), "values": p.values.tolist()}
            for p in params.parameters()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    config = ModelConfig(**payload["config"])
    params = _build(payload["kind"], config)
    stored = payload["params"]
    for p in params.parameters():
        if p.name not in stored:
            raise ContractError(f"checkpoint missing parameter {p.name!r}")
        entry = stored[p.name]
        if tuple(entry["shape"]) != p.shape:
            raise ShapeError(
                f"checkpoint parameter {p.name!r} has shape {entry['shape']}, expected {list(p.shape)}"
            )
        p.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape)
    stats = payload.get("norm_stats")
    return Checkpoint(
        params=params,
        stats=NormStats.from_dict(stats) if stats else None,
        split=payload.get("split"),
    )
