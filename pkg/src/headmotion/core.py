"""Pose data model, normalization and the portable RNG helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# 3 rotations (pitch, yaw, roll; radians), 3 translations, 2 gaze angles.
CHANNELS = ("rx", "ry", "rz", "tx", "ty", "tz", "gx", "gy")
POSE_DIM = len(CHANNELS)
PITCH, YAW, ROLL = 0, 1, 2

DEGENERATE_STD = 1e-6


class PoseFormatError(ValueError):
    """Raised when a pose file or array violates the pose-sequence contract."""


def portable_rng(*key: int) -> np.random.Generator:
    """Philox (64-bit counter-based) generator keyed by a tuple of integers.

    The same key yields the same stream on every platform numpy supports.
    """
    seq = np.random.SeedSequence([int(k) for k in key])
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(*key: int) -> int:
    """Stable 63-bit seed derived from an integer key tuple."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


@dataclass
class PoseSequence:
    """T x D matrix of per-frame pose values sampled at ``fps``."""

    values: np.ndarray
    fps: int = 25

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        v = self.values
        if v.ndim != 2:
            raise PoseFormatError(f"pose values must be 2-D (T, D), got shape {v.shape}")
        if v.shape[0] < 2:
            raise PoseFormatError(f"pose sequence needs at least 2 frames, got {v.shape[0]}")
        if v.shape[1] < 1:
            raise PoseFormatError("pose sequence has zero channels")
        if self.fps <= 0:
            raise PoseFormatError(f"fps must be positive, got {self.fps}")
        bad = ~np.isfinite(v)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise PoseFormatError(f"non-finite value at frame {row}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "PoseSequence":
        return PoseSequence(values, fps=self.fps)


@dataclass
class ConditionBundle:
    """Text embedding, audio feature sequence and the null-condition flag."""

    text_embedding: np.ndarray | None = None
    audio_features: np.ndarray | None = None
    is_null: bool = False

    def __post_init__(self) -> None:
        if self.is_null:
            return
        if self.text_embedding is None or self.audio_features is None:
            raise ValueError("a non-null condition needs both text and audio payloads")
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float32).reshape(-1)
        self.audio_features = np.asarray(self.audio_features, dtype=np.float32)
        if self.audio_features.ndim != 2:
            raise ValueError(f"audio features must be (T_a, E_a), got {self.audio_features.shape}")
        if not (np.isfinite(self.text_embedding).all() and np.isfinite(self.audio_features).all()):
            raise ValueError("condition payload contains non-finite values")

    @classmethod
    def null(cls) -> "ConditionBundle":
        return cls(is_null=True)

    def energy_envelope(self) -> np.ndarray:
        """Per-frame mean of the audio features (recovers the synthetic energy track)."""
        if self.is_null:
            raise ValueError("null condition carries no audio")
        return self.audio_features.astype(np.float64).mean(axis=1)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.mean.shape, dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if (self.std <= 0).any():
            raise ValueError("every std must be positive")

    @property
    def D(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "degenerate": self.degenerate.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["degenerate"]))

    @classmethod
    def identity(cls, D: int = POSE_DIM) -> "NormStats":
        return cls(np.zeros(D), np.ones(D))


def compute_norm_stats(dataset: list[PoseSequence]) -> NormStats:
    """Population mean/std per channel over every frame of every sequence.

    Channels whose std falls below 1e-6 get std 1.0 and are flagged degenerate.
    """
    if not dataset:
        raise ValueError("cannot compute normalization stats of an empty dataset")
    D = dataset[0].D
    if any(s.D != D for s in dataset):
        raise ValueError("sequences disagree on channel count")
    frames = np.concatenate([s.values for s in dataset], axis=0)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    degenerate = std < DEGENERATE_STD
    std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std, degenerate)


def _check_dims(seq: PoseSequence, stats: NormStats) -> None:
    if seq.D != stats.D:
        raise ValueError(f"sequence has D={seq.D} but stats have D={stats.D}")


def normalize(seq: PoseSequence, stats: NormStats) -> PoseSequence:
    _check_dims(seq, stats)
    return seq.with_values((seq.values - stats.mean) / stats.std)


def denormalize(seq: PoseSequence, stats: NormStats) -> PoseSequence:
    _check_dims(seq, stats)
    return seq.with_values(seq.values * stats.std + stats.mean)


def fit_length(values: np.ndarray, T: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop or edge-pad a (T', D) array to exactly T frames.

    Longer inputs are cropped at a random offset when ``rng`` is given and
    centred otherwise; shorter inputs repeat their last frame.
    """
    n = values.shape[0]
    if n == T:
        return values
    if n > T:
        start = int(rng.integers(0, n - T + 1)) if rng is not None else (n - T) // 2
        return values[start : start + T]
    pad = np.repeat(values[-1:], T - n, axis=0)
    return np.concatenate([values, pad], axis=0)
