"""Evaluation metrics for generated motion: FID, diversity, PCA curves and probes."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from headmotion.core import PITCH, YAW, PoseSequence, portable_rng
from headmotion.vae import PoseVAE, encode_means


def extract_features(vae: PoseVAE, seqs) -> np.ndarray:
    """Flattened VAE posterior means, one row per normalized sequence."""
    mu = encode_means(vae, list(seqs))
    return mu.reshape(mu.shape[0], -1).double().numpy()


def _moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"need an (N >= 2, K) feature matrix, got shape {feats.shape}")
    return feats.mean(axis=0), np.cov(feats, rowvar=False, bias=True).reshape(feats.shape[1], feats.shape[1])


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(mu1, S1, mu2, S2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of (S1 S2)^{1/2} equals that of (A S2 A)^{1/2} with A = S1^{1/2};
    the latter is symmetric, so both roots come from eigh with negative
    eigenvalues floored at zero.
    """
    A = _psd_sqrt(S1)
    M = A @ S2 @ A
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = np.asarray(mu1) - np.asarray(mu2)
    value = float(d @ d + np.trace(S1) + np.trace(S2) - 2.0 * tr_sqrt)
    if not np.isfinite(value):
        raise FloatingPointError("Frechet distance is not finite")
    return value


def fid(real: np.ndarray, gen: np.ndarray) -> float:
    """Frechet distance between Gaussian fits (population covariance) of two feature sets."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValueError(f"feature dimensions differ: {real.shape} vs {gen.shape}")
    return frechet_distance(*_moments(real), *_moments(gen))


def diversity(feats: np.ndarray, pairs: int = 200, seed: int = 0, mode: str = "pairwise") -> float:
    """Mean L2 distance over ``pairs`` seeded random index pairs (i != j).

    ``mode="trace"`` returns the trace of the feature covariance instead.
    """
    feats = np.asarray(feats, dtype=np.float64)
    N = feats.shape[0]
    if N < 2:
        raise ValueError("diversity needs at least 2 feature rows")
    if mode == "trace":
        return float(np.trace(np.cov(feats, rowvar=False, bias=True).reshape(feats.shape[1], -1)))
    if mode != "pairwise":
        raise ValueError(f"unknown diversity mode {mode!r}")
    rng = portable_rng(seed, 0xD17)
    i = rng.integers(0, N, size=pairs)
    j = (i + rng.integers(1, N, size=pairs)) % N
    return float(np.linalg.norm(feats[i] - feats[j], axis=1).mean())


def diversity_exhaustive(feats: np.ndarray) -> float:
    """Mean L2 distance over all unordered pairs of distinct rows."""
    feats = np.asarray(feats, dtype=np.float64)
    N = feats.shape[0]
    if N < 2:
        raise ValueError("diversity needs at least 2 feature rows")
    iu, ju = np.triu_indices(N, k=1)
    return float(np.linalg.norm(feats[iu] - feats[ju], axis=1).mean())


class PcaCurves(NamedTuple):
    curves: list[np.ndarray]
    component: np.ndarray
    mean: np.ndarray
    degenerate: bool


def pca_curve(seqs: list[PoseSequence]) -> PcaCurves:
    """Project every frame onto the first principal component of the pooled frames.

    The component's sign is chosen so its largest-magnitude loading is positive.
    """
    if not seqs:
        raise ValueError("pca_curve needs at least one sequence")
    arrs = [s.values if isinstance(s, PoseSequence) else np.asarray(s, dtype=np.float64) for s in seqs]
    D = arrs[0].shape[1]
    if any(a.shape[1] != D for a in arrs):
        raise ValueError("sequences disagree on channel count")
    pooled = np.concatenate(arrs)
    mean = pooled.mean(axis=0)
    X = pooled - mean
    _, sv, Vt = np.linalg.svd(X, full_matrices=False)
    if sv[0] <= 1e-12 * max(1.0, np.abs(pooled).max()):
        return PcaCurves([np.zeros(a.shape[0]) for a in arrs], np.zeros(D), mean, True)
    pc = Vt[0]
    if pc[np.argmax(np.abs(pc))] < 0:
        pc = -pc
    return PcaCurves([(a - mean) @ pc for a in arrs], pc, mean, False)


def band_energy(
    x: np.ndarray, fps: float, frequency: float, band: float = 0.2, pad: int = 8, window: str | None = None
):
    """(energy within [f(1-band), f(1+band)], total energy) of the mean-removed signal.

    Uses a zero-padded DFT so the band edges fall on a fine frequency grid.
    ``window="hann"`` tapers the clip first, trading resolution for less leakage.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    if window == "hann":
        x = x * np.hanning(len(x))
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    n = pad * len(x)
    spec = np.abs(np.fft.rfft(x, n=n)) ** 2
    spec[1:] *= 2.0
    if n % 2 == 0:
        spec[-1] /= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / fps)
    sel = (freqs >= frequency * (1 - band)) & (freqs <= frequency * (1 + band))
    return float(spec[sel].sum()), float(spec.sum())


def band_rms(x: np.ndarray, fps: float, frequency: float, band: float = 0.2, pad: int = 8) -> float:
    """RMS amplitude carried by the frequency band (Parseval-normalized)."""
    e_band, _ = band_energy(x, fps, frequency, band, pad)
    n = pad * len(x)
    return float(np.sqrt(e_band / n / len(x)))


def classify_motion(
    seq: PoseSequence,
    frequency: float = 2.0,
    threshold: float = 0.05,
    band: float = 0.2,
) -> str:
    """nod / shake / still from the band-limited RMS of pitch vs yaw (radians)."""
    v = seq.values
    pitch = band_rms(v[:, PITCH], seq.fps, frequency, band)
    yaw = band_rms(v[:, YAW], seq.fps, frequency, band)
    if max(pitch, yaw) < threshold:
        return "still"
    return "nod" if pitch >= yaw else "shake"


class Correlation(NamedTuple):
    r: float
    degenerate: bool


def _resample(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == n:
        return np.asarray(x, dtype=np.float64)
    return np.interp(np.linspace(0, len(x) - 1, n), np.arange(len(x)), x)


def rolling_rms(x: np.ndarray, window: int) -> np.ndarray:
    """Centred valid-mode RMS; element k covers x[k : k + window]."""
    sq = np.asarray(x, dtype=np.float64) ** 2
    c = np.concatenate([[0.0], np.cumsum(sq)])
    return np.sqrt(np.maximum((c[window:] - c[:-window]) / window, 0.0))


def amplitude_envelope_correlation(seq: PoseSequence, energy: np.ndarray, frequency: float = 2.0) -> Correlation:
    """Pearson r between the dominant rotation axis's rolling RMS and the energy envelope.

    The window spans one period of ``frequency``; returns (0, True) when either
    series has zero variance.
    """
    v = seq.values
    axis = PITCH if v[:, PITCH].var() >= v[:, YAW].var() else YAW
    x = v[:, axis] - v[:, axis].mean()
    window = max(2, min(len(x) - 1, int(round(seq.fps / frequency))))
    rms = rolling_rms(x, window)
    e = _resample(np.asarray(energy, dtype=np.float64), len(x))
    centres = np.arange(len(rms)) + (window - 1) / 2
    e_c = np.interp(centres, np.arange(len(e)), e)
    if rms.std() < 1e-12 or e_c.std() < 1e-12:
        return Correlation(0.0, True)
    return Correlation(float(np.corrcoef(rms, e_c)[0, 1]), False)


def metrics_report(real: np.ndarray, gen: np.ndarray, seed: int, pairs: int = 200, **extra) -> dict:
    report = {
        "fid": fid(real, gen),
        "diversity": diversity(gen, pairs, seed),
        "n_real": int(real.shape[0]),
        "n_gen": int(gen.shape[0]),
        "seed": int(seed),
        "feature_dim": int(real.shape[1]),
    }
    report.update(extra)
    return report
