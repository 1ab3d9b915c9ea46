"""Frame ingestion, normalization, windowing, splitting, and synthetic sequences.

Frame files are UTF-8 JSON lines, one object per frame:

    {"t": <int>, "pose": [66 numbers], "emotion": [20 numbers]}

Frame indices must be contiguous after sorting (step of exactly 1); windows
and splits index into that contiguous timeline.  Normalization stats are
fitted on the training split only and applied everywhere, so metrics can be
reported in the original coordinate units by inverting the transform.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, SchemaError

__all__ = [
    "POSE_DIM",
    "EMOTION_DIM",
    "FrameRecord",
    "SequenceDataset",
    "WindowConfig",
    "WindowSample",
    "NormStats",
    "load_frames",
    "save_frames",
    "compute_norm_stats",
    "apply_norm",
    "invert_norm",
    "save_norm_stats",
    "load_norm_stats",
    "make_windows",
    "split_dataset",
    "prepare_splits",
    "SplitWindows",
    "synth_generate",
]

log = logging.getLogger(__name__)

POSE_DIM = 66  # 33 image-plane joints x 2 coordinates
EMOTION_DIM = 20

# Synthetic-generator defaults.  These are artifact configuration values,
# not measured quantities from any dataset.  The affect walk carries a mild
# pull toward 0.5: a pure clipped walk mixes so slowly (~400-frame
# decorrelation) that two independent walks show spurious correlations
# above 0.3 over 2000 frames, which would defeat the decoupled mode's
# purpose of being statistically unrelated to the emotion channel.
WALK_STEP = 0.06
WALK_REVERT = 0.05
SMOOTH_WINDOW = 5
EMOTION_NOISE = 0.05
AMP_BASE, AMP_GAIN = 0.05, 0.15
FREQ_BASE, FREQ_GAIN = 0.1, 0.3


@dataclass
class FrameRecord:
    """One timestep: a 66-dim pose vector and a 20-dim emotion embedding."""

    t: int
    pose: np.ndarray
    emotion: np.ndarray

    def __post_init__(self):
        self.pose = np.ascontiguousarray(np.asarray(self.pose, dtype=np.float64))
        self.emotion = np.ascontiguousarray(np.asarray(self.emotion, dtype=np.float64))
        if self.pose.shape != (POSE_DIM,):
            raise SchemaError(f"frame t={self.t}: expected {POSE_DIM} pose values, got {self.pose.size}")
        if self.emotion.shape != (EMOTION_DIM,):
            raise SchemaError(
                f"frame t={self.t}: expected {EMOTION_DIM} emotion values, got {self.emotion.size}"
            )
        if not (np.isfinite(self.pose).all() and np.isfinite(self.emotion).all()):
            raise SchemaError(f"frame t={self.t}: non-finite feature value")


@dataclass
class SequenceDataset:
    """A contiguous track of frames (t strictly increasing by 1)."""

    frames: list[FrameRecord]
    source_id: str = ""

    def __post_init__(self):
        ts = [f.t for f in self.frames]
        for prev, cur in zip(ts, ts[1:]):
            if cur != prev + 1:
                raise SchemaError(
                    f"{self.source_id or 'sequence'}: frame indices must be contiguous, "
                    f"got {prev} followed by {cur}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def pose_matrix(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, POSE_DIM))
        return np.stack([f.pose for f in self.frames])

    def emotion_matrix(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, EMOTION_DIM))
        return np.stack([f.emotion for f in self.frames])


@dataclass(frozen=True)
class WindowConfig:
    obs_len: int = 10
    horizon: int = 15

    def __post_init__(self):
        if self.obs_len < 1 or self.horizon < 1:
            raise ContractError(f"window config needs obs_len/horizon >= 1, got {self}")

    @property
    def span(self) -> int:
        return self.obs_len + self.horizon


@dataclass
class WindowSample:
    """(X, Y) pair: observed pose+emotion frames and the future pose targets."""

    x_pose: np.ndarray  # (obs_len, 66)
    x_emotion: np.ndarray  # (obs_len, 20)
    y_pose: np.ndarray  # (horizon, 66)


@dataclass
class NormStats:
    """Per-feature mean/std fitted on the training split; stds are floored."""

    pose_mean: np.ndarray
    pose_std: np.ndarray
    emotion_mean: np.ndarray
    emotion_std: np.ndarray
    std_floor: float = 1e-6

    def __post_init__(self):
        self.pose_mean = np.asarray(self.pose_mean, dtype=np.float64)
        self.pose_std = np.asarray(self.pose_std, dtype=np.float64)
        self.emotion_mean = np.asarray(self.emotion_mean, dtype=np.float64)
        self.emotion_std = np.asarray(self.emotion_std, dtype=np.float64)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(
            pose_mean=np.zeros(POSE_DIM),
            pose_std=np.ones(POSE_DIM),
            emotion_mean=np.zeros(EMOTION_DIM),
            emotion_std=np.ones(EMOTION_DIM),
        )

    def to_dict(self) -> dict:
        return {
            "pose_mean": self.pose_mean.tolist(),
            "pose_std": self.pose_std.tolist(),
            "emotion_mean": self.emotion_mean.tolist(),
            "emotion_std": self.emotion_std.tolist(),
            "std_floor": self.std_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            pose_mean=d["pose_mean"],
            pose_std=d["pose_std"],
            emotion_mean=d["emotion_mean"],
            emotion_std=d["emotion_std"],
            std_floor=float(d.get("std_floor", 1e-6)),
        )


def load_frames(path) -> SequenceDataset:
    """Read a JSONL frame file; frames come back sorted by t, gaps and duplicates rejected."""
    path = Path(path)
    frames: list[FrameRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path.name}:{lineno}: malformed JSON ({e.msg})") from e
            if not isinstance(obj, dict) or not {"t", "pose", "emotion"} <= obj.keys():
                raise SchemaError(f"{path.name}:{lineno}: expected keys t, pose, emotion")
            try:
                frames.append(FrameRecord(t=int(obj["t"]), pose=obj["pose"], emotion=obj["emotion"]))
            except SchemaError as e:
                raise SchemaError(f"{path.name}:{lineno}: {e}") from e
    frames.sort(key=lambda f: f.t)
    for prev, cur in zip(frames, frames[1:]):
        if cur.t == prev.t:
            raise SchemaError(f"{path.name}: duplicate frame index t={cur.t}")
    return SequenceDataset(frames=frames, source_id=path.stem)


def save_frames(dataset: SequenceDataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for f in dataset.frames:
            fh.write(
                json.dumps({"t": f.t, "pose": f.pose.tolist(), "emotion": f.emotion.tolist()})
            )
            fh.write("\n")


def compute_norm_stats(train: list[SequenceDataset], std_floor: float = 1e-6) -> NormStats:
    """Per-feature mean and population std over every training frame."""
    poses = [d.pose_matrix() for d in train if len(d)]
    emos = [d.emotion_matrix() for d in train if len(d)]
    n = sum(p.shape[0] for p in poses)
    if n < 2:
        raise ContractError(f"compute_norm_stats: needs at least 2 frames, got {n}")
    pose = np.concatenate(poses)
    emo = np.concatenate(emos)
    return NormStats(
        pose_mean=pose.mean(axis=0),
        pose_std=np.maximum(pose.std(axis=0), std_floor),
        emotion_mean=emo.mean(axis=0),
        emotion_std=np.maximum(emo.std(axis=0), std_floor),
        std_floor=std_floor,
    )


def _transform(dataset: SequenceDataset, stats: NormStats, invert: bool) -> SequenceDataset:
    pm, ps = stats.pose_mean, stats.pose_std
    em, es = stats.emotion_mean, stats.emotion_std
    out = []
    for f in dataset.frames:
        if invert:
            out.append(FrameRecord(f.t, f.pose * ps + pm, f.emotion * es + em))
        else:
            out.append(FrameRecord(f.t, (f.pose - pm) / ps, (f.emotion - em) / es))
    return SequenceDataset(frames=out, source_id=dataset.source_id)


def apply_norm(dataset: SequenceDataset, stats: NormStats) -> SequenceDataset:
    return _transform(dataset, stats, invert=False)


def invert_norm(dataset: SequenceDataset, stats: NormStats) -> SequenceDataset:
    return _transform(dataset, stats, invert=True)


def save_norm_stats(stats: NormStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_norm_stats(path) -> NormStats:
    return NormStats.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_windows(dataset: SequenceDataset, cfg: WindowConfig) -> list[WindowSample]:
    """Stride-1 sliding windows; short sequences simply yield an empty list."""
    n = len(dataset)
    count = n - cfg.span + 1
    if count <= 0:
        return []
    pose = dataset.pose_matrix()
    emo = dataset.emotion_matrix()
    samples = []
    for i in range(count):
        o = i + cfg.obs_len
        samples.append(
            WindowSample(
                x_pose=pose[i:o].copy(),
                x_emotion=emo[i:o].copy(),
                y_pose=pose[o : o + cfg.horizon].copy(),
            )
        )
    return samples


def split_dataset(
    datasets: list[SequenceDataset],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    gap: int = 24,
) -> tuple[list[SequenceDataset], list[SequenceDataset], list[SequenceDataset]]:
    """Cut each sequence chronologically into train/val/test segments.

    The first `gap` frames of the val and test allocations are discarded so
    no window can span two splits.  Segments that end up empty are dropped.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ContractError(f"split ratios must be three nonnegative values, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"split ratios must sum to 1, got {sum(ratios)}")
    if gap < 0:
        raise ContractError(f"gap must be nonnegative, got {gap}")

    train, val, test = [], [], []
    for ds in datasets:
        n = len(ds)
        b1 = int(math.floor(ratios[0] * n))
        b2 = int(math.floor((ratios[0] + ratios[1]) * n))
        cuts = [(0, b1, "train", train), (b1 + gap, b2, "val", val), (b2 + gap, n, "test", test)]
        for lo, hi, tag, bucket in cuts:
            if hi <= lo:
                continue
            bucket.append(
                SequenceDataset(frames=ds.frames[lo:hi], source_id=f"{ds.source_id}/{tag}")
            )
    return train, val, test


@dataclass
class SplitWindows:
    """Normalized windows per split plus the stats that normalized them."""

    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]
    stats: NormStats
    window: WindowConfig = field(default_factory=WindowConfig)


def prepare_splits(
    datasets: list[SequenceDataset],
    window: WindowConfig | None = None,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    gap: int | None = None,
) -> SplitWindows:
    """Full pipeline: split raw frames, fit stats on train, normalize, window.

    The default gap of obs_len + horizon - 1 is the smallest discard that
    prevents a window from leaking target frames across a split boundary.
    """
    window = window or WindowConfig()
    if gap is None:
        gap = window.span - 1
    train_d, val_d, test_d = split_dataset(datasets, ratios=ratios, gap=gap)
    stats = compute_norm_stats(train_d)
    out: dict[str, list[WindowSample]] = {}
    for tag, segs in (("train", train_d), ("val", val_d), ("test", test_d)):
        windows: list[WindowSample] = []
        for seg in segs:
            ws = make_windows(apply_norm(seg, stats), window)
            if not ws:
                log.warning(
                    "segment %s has %d frames, fewer than obs_len+horizon=%d; contributes no windows",
                    seg.source_id,
                    len(seg),
                    window.span,
                )
            windows.extend(ws)
        out[tag] = windows
    return SplitWindows(train=out["train"], val=out["val"], test=out["test"], stats=stats, window=window)


def _affect_walk(rng: np.random.Generator, n: int) -> np.ndarray:
    """Clipped mean-reverting random walk on [0, 1], then a trailing moving average."""
    eta = rng.standard_normal(n)
    walk = np.empty(n)
    cur = 0.5
    for t in range(n):
        cur = cur + WALK_REVERT * (0.5 - cur) + WALK_STEP * eta[t]
        cur = 0.0 if cur < 0.0 else (1.0 if cur > 1.0 else cur)
        walk[t] = cur
    smoothed = np.empty(n)
    for t in range(n):
        lo = max(0, t - SMOOTH_WINDOW + 1)
        smoothed[t] = walk[lo : t + 1].mean()
    return smoothed


def synth_generate(mode: str, n_frames: int, seed: int) -> SequenceDataset:
    """Generate a pose-emotion sequence with a controllable cross-modal link.

    A latent affect value follows a smoothed mean-reverting random walk and
    is always readable from the emotion channel (coordinate 0 carries it
    exactly, the rest are a fixed noisy linear readout).  Each pose
    coordinate oscillates around a per-joint base value with the affect
    latent setting the oscillation's amplitude and instantaneous frequency
    (integrated into the phase, so the waveform stays continuous as the
    frequency drifts).  In `coupled` mode the oscillation follows the same
    latent the emotion channel encodes; in `decoupled` mode it follows an
    independent latent, so emotion carries no information about motion.
    """
    if mode not in ("coupled", "decoupled"):
        raise ContractError(f"synth mode must be 'coupled' or 'decoupled', got {mode!r}")
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")

    rng = np.random.default_rng(seed)
    # draw order is fixed: per-joint constants, readout, walk(s), emotion noise
    base = rng.uniform(-1.0, 1.0, POSE_DIM)
    phase = rng.uniform(0.0, 2.0 * np.pi, POSE_DIM)
    readout = rng.uniform(-1.0, 1.0, EMOTION_DIM - 1)
    affect = _affect_walk(rng, n_frames)
    drive = affect if mode == "coupled" else _affect_walk(rng, n_frames)
    emo_eps = rng.standard_normal((n_frames, EMOTION_DIM - 1))

    amp = AMP_BASE + AMP_GAIN * drive
    freq = FREQ_BASE + FREQ_GAIN * drive
    accum = np.concatenate([[0.0], np.cumsum(freq[:-1])])  # integrated frequency
    pose = base[None, :] + amp[:, None] * np.sin(accum[:, None] + phase[None, :])

    emotion = np.empty((n_frames, EMOTION_DIM))
    emotion[:, 0] = affect
    emotion[:, 1:] = readout[None, :] * affect[:, None] + EMOTION_NOISE * emo_eps

    frames = [FrameRecord(t=t, pose=pose[t], emotion=emotion[t]) for t in range(n_frames)]
    return SequenceDataset(frames=frames, source_id=f"synth-{mode}-{seed}")
