"""Image-space loss formulas: region loss share, multi-scale perceptual loss, lip-sync loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

SYNC_EPS = 1e-7
PERCEPTUAL_WEIGHT = 10.0


def region_loss_fraction(gen: np.ndarray, gt: np.ndarray, region: np.ndarray) -> float:
    """Share of the total L1 error that falls inside a binary ``region`` mask (0/0 -> 0)."""
    gen = np.asarray(gen, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch {gen.shape} vs {gt.shape}")
    region = np.asarray(region)
    if region.shape != gen.shape[:2]:
        raise ValueError(f"region shape {region.shape} does not match image {gen.shape[:2]}")
    if not np.isin(region, (0, 1)).all():
        raise ValueError("region mask must be binary")
    err = np.abs(gen - gt)
    if err.ndim == 3:
        err = err.sum(axis=-1)
    total = err.sum()
    if total == 0:
        return 0.0
    return float(err[region.astype(bool)].sum() / total)


def avg_pool2(img: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    if H % 2 or W % 2:
        raise ValueError(f"cannot 2x2-pool an image of size {(H, W)}")
    return img.reshape(H // 2, 2, W // 2, 2, *img.shape[2:]).mean(axis=(1, 3))


def pyramid_features(levels: int = 3) -> Callable[[np.ndarray], list[np.ndarray]]:
    """Default feature extractor: the image followed by successive 2x2 average pools."""

    def phi(img: np.ndarray) -> list[np.ndarray]:
        feats = [np.asarray(img, dtype=np.float64)]
        for _ in range(levels - 1):
            feats.append(avg_pool2(feats[-1]))
        return feats

    return phi


def perceptual_loss(gen, gt, phi=None, weight: float = PERCEPTUAL_WEIGHT) -> float:
    """weight * mean over frames of the summed (unreduced) L1 feature distance over levels.

    ``gen`` and ``gt`` are sequences of frames; ``phi`` maps a frame to a list
    of feature maps.
    """
    phi = phi or pyramid_features()
    gen, gt = list(gen), list(gt)
    if len(gen) != len(gt) or not gen:
        raise ValueError("need equal, non-zero frame counts")
    total = 0.0
    for a, b in zip(gen, gt):
        fa, fb = phi(a), phi(b)
        if len(fa) != len(fb):
            raise ValueError("feature extractor returned different level counts")
        for la, lb in zip(fa, fb):
            if np.shape(la) != np.shape(lb):
                raise ValueError(f"feature shape mismatch {np.shape(la)} vs {np.shape(lb)}")
            total += np.abs(np.asarray(la) - np.asarray(lb)).sum()
    return float(weight * total / len(gen))


def sync_similarity(f_v: np.ndarray, f_a: np.ndarray, eps: float = SYNC_EPS) -> float:
    f_v = np.asarray(f_v, dtype=np.float64).ravel()
    f_a = np.asarray(f_a, dtype=np.float64).ravel()
    if f_v.size == 0 or f_v.shape != f_a.shape:
        raise ValueError("sync embeddings must be equal-length, non-empty vectors")
    return float(f_v @ f_a / max(np.linalg.norm(f_v) * np.linalg.norm(f_a), eps))


def sync_loss(pairs, eps: float = SYNC_EPS) -> float:
    """-mean log C over (visual, audio) embedding pairs, C clamped to [eps, 1]."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("sync loss needs at least one pair")
    c = np.array([sync_similarity(v, a, eps) for v, a in pairs])
    return float(-np.mean(np.log(np.clip(c, eps, 1.0))))
