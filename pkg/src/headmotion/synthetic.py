"""Seeded synthetic nod/shake/still pose-and-condition generator.

Each sample is a pure function of its :class:`SyntheticSpec`. A sinusoidal
carrier drives pitch (nod) or yaw (shake), and its instantaneous amplitude
follows a smooth audio-energy envelope. The other channels are fixed linear
couplings of pitch and yaw plus white jitter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from headmotion.core import POSE_DIM, ConditionBundle, PoseSequence, derive_seed, portable_rng

CLASSES = ("nod", "shake", "still")
TEXT_PROJECTION_SEED = 0x7E47
AUDIO_NOISE = 0.05

# rows: pitch, yaw contributions to (rx, ry, rz, tx, ty, tz, gx, gy)
_COUPLING = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 0.5, 0.1, 0.0, -0.6],
        [0.0, 1.0, 0.2, 0.5, 0.0, 0.0, -0.6, 0.0],
    ]
)


@dataclass(frozen=True)
class SyntheticSpec:
    label: str
    amplitude: float = 0.25
    frequency: float = 2.0
    coupling: float = 1.0
    noise_scale: float = 0.01
    T: int = 64
    fps: int = 25
    seed: int = 0
    text_dim: int = 512
    audio_dim: int = 768

    def validate(self) -> None:
        if self.label not in CLASSES:
            raise ValueError(f"unknown class {self.label!r}; expected one of {CLASSES}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if not 0 < self.frequency < self.fps / 2:
            raise ValueError(f"frequency must lie in (0, fps/2) = (0, {self.fps / 2})")
        if self.coupling < 0 or self.noise_scale < 0:
            raise ValueError("coupling and noise_scale must be >= 0")
        if self.T < 2 or self.fps <= 0:
            raise ValueError("need T >= 2 and fps > 0")
        if self.amplitude * (1 + self.coupling) >= np.pi:
            raise ValueError("peak rotation must stay below pi")


def text_projection(text_dim: int = 512) -> np.ndarray:
    """Frozen (n_classes, text_dim) projection used as the synthetic text encoder."""
    rng = portable_rng(TEXT_PROJECTION_SEED, text_dim)
    return rng.standard_normal((len(CLASSES), text_dim)) / np.sqrt(text_dim)


def text_embedding(label: str, text_dim: int = 512) -> np.ndarray:
    if label not in CLASSES:
        raise ValueError(f"unknown class {label!r}")
    return text_projection(text_dim)[CLASSES.index(label)].astype(np.float32)


def energy_envelope(T: int, fps: int, rng: np.random.Generator, carrier: float = 2.0) -> np.ndarray:
    """Smooth random envelope spanning [0, 1]: a slow sinusoid, min-max scaled per clip.

    Its rate stays below 0.175 x the carrier frequency so the modulation
    sidebands remain inside a +-20% band around the carrier.
    """
    g = carrier * rng.uniform(0.075, 0.175)
    phase = rng.uniform(0.0, 2 * np.pi)
    mix = np.sin(2 * np.pi * g * np.arange(T) / fps + phase)
    span = mix.max() - mix.min()
    return (mix - mix.min()) / span if span > 0 else np.full(T, 0.5)


def audio_from_envelope(energy: np.ndarray, audio_dim: int, rng: np.random.Generator) -> np.ndarray:
    noise = AUDIO_NOISE * rng.standard_normal((energy.shape[0], audio_dim))
    return (energy[:, None] + noise).astype(np.float32)


def generate_sample(spec: SyntheticSpec) -> tuple[PoseSequence, ConditionBundle, str, np.ndarray]:
    """Returns (pose, condition, label, energy envelope) for one spec."""
    spec.validate()
    rng = portable_rng(spec.seed)
    energy = energy_envelope(spec.T, spec.fps, rng, spec.frequency)
    t = np.arange(spec.T)
    carrier = (
        spec.amplitude
        * (1.0 + spec.coupling * energy)
        * np.sin(2 * np.pi * spec.frequency * t / spec.fps)
    )
    axes = np.zeros((spec.T, 2))
    if spec.label == "nod":
        axes[:, 0] = carrier
    elif spec.label == "shake":
        axes[:, 1] = carrier
    jitter = 0.5 * spec.noise_scale * rng.standard_normal((spec.T, POSE_DIM))
    pose = axes @ _COUPLING + jitter
    audio = audio_from_envelope(energy, spec.audio_dim, rng)
    cond = ConditionBundle(text_embedding(spec.label, spec.text_dim), audio)
    return PoseSequence(pose, fps=spec.fps), cond, spec.label, energy


def generate_synthetic_dataset(specs: list[SyntheticSpec]):
    """Generate samples in spec order; each item is (pose, condition, label)."""
    for s in specs:
        s.validate()
    return [generate_sample(s)[:3] for s in specs]


def make_specs(
    n_per_class: int,
    seed: int,
    classes: tuple[str, ...] = CLASSES,
    amplitude: float = 0.25,
    frequency: float = 2.0,
    amplitude_jitter: float = 0.2,
    frequency_jitter: float = 0.1,
    **common,
) -> list[SyntheticSpec]:
    """Per-sample specs with seeded amplitude/frequency jitter, classes interleaved."""
    for c in classes:
        if c not in CLASSES:
            raise ValueError(f"unknown class {c!r}; expected one of {CLASSES}")
    rng = portable_rng(seed, 1)
    specs = []
    for i in range(n_per_class):
        for label in classes:
            a = amplitude * rng.uniform(1 - amplitude_jitter, 1 + amplitude_jitter)
            f = frequency * rng.uniform(1 - frequency_jitter, 1 + frequency_jitter)
            specs.append(
                SyntheticSpec(
                    label=label,
                    amplitude=float(a),
                    frequency=float(f),
                    seed=derive_seed(seed, len(specs)),
                    **common,
                )
            )
    return specs


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
