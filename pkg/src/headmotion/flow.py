"""Coarse-to-fine flow algebra: backward warping, flow/mask upsampling and accumulation.

Flows are (H, W, 2) pixel displacements, channel 0 along x (columns) and
channel 1 along y (rows). ``backward_warp(src, F)[p] = src(p + F(p))``.
"""

from __future__ import annotations

import numpy as np

MIN_RES, MAX_RES = 8, 256


def _as_hwc(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[..., None], True
    if img.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) array, got shape {img.shape}")
    return img, False


def _check_flow(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[-1] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {F.shape}")
    if not np.isfinite(F).all():
        raise ValueError("flow contains non-finite values")
    return F


def backward_warp(src: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Bilinear sample of ``src`` at p + F(p); coordinates are clamped to the border."""
    F = _check_flow(F)
    img, squeeze = _as_hwc(src)
    H, W = img.shape[:2]
    if F.shape[:2] != (H, W):
        raise ValueError(f"flow resolution {F.shape[:2]} does not match image {(H, W)}")
    xs = np.clip(np.arange(W)[None, :] + F[..., 0], 0, W - 1)
    ys = np.clip(np.arange(H)[:, None] + F[..., 1], 0, H - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xs - x0)[..., None]
    wy = (ys - y0)[..., None]
    out = (
        (1 - wy) * (1 - wx) * img[y0, x0]
        + (1 - wy) * wx * img[y0, x1]
        + wy * (1 - wx) * img[y1, x0]
        + wy * wx * img[y1, x1]
    )
    return out[..., 0] if squeeze else out


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    u = np.arange(2 * n)
    pos = np.clip((u + 0.5) / 2 - 0.5, 0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w = pos - i0
    shape = [1] * a.ndim
    shape[axis] = 2 * n
    w = w.reshape(shape)
    return (1 - w) * np.take(a, i0, axis=axis) + w * np.take(a, i1, axis=axis)


def upsample2x(a: np.ndarray) -> np.ndarray:
    """Half-pixel-centred bilinear 2x upsampling of the two leading axes."""
    a = np.asarray(a, dtype=np.float64)
    return _upsample_axis(_upsample_axis(a, 0), 1)


def upsample_flow(F: np.ndarray) -> np.ndarray:
    """Upsample to 2H x 2W; displacements double because they are in pixels."""
    return 2.0 * upsample2x(_check_flow(F))


def upsample_mask(m: np.ndarray) -> np.ndarray:
    return upsample2x(np.asarray(m, dtype=np.float64))


def refine_level(enc, dec, dF, m_raw, F_prev=None, m_prev=None):
    """One decoder level: accumulate flow and mask, then blend warped encoder features.

    Returns (out, F, m). ``F_prev``/``m_prev`` live at half resolution and are
    omitted at the coarsest level. The accumulated mask is clamped to [0, 1].
    """
    dF = _check_flow(dF)
    enc, squeeze = _as_hwc(enc)
    dec, _ = _as_hwc(dec)
    H, W = dF.shape[:2]
    m_raw = np.asarray(m_raw, dtype=np.float64)
    if enc.shape != dec.shape or enc.shape[:2] != (H, W) or m_raw.shape != (H, W):
        raise ValueError("enc, dec, dF and m must share one resolution")
    F, m = dF, m_raw
    if F_prev is not None:
        F_prev = _check_flow(F_prev)
        if F_prev.shape[:2] != (H // 2, W // 2) or H % 2 or W % 2:
            raise ValueError(f"previous flow must be at half resolution {(H // 2, W // 2)}")
        F = dF + upsample_flow(F_prev)
    if m_prev is not None:
        m_prev = np.asarray(m_prev, dtype=np.float64)
        if m_prev.shape != (H // 2, W // 2):
            raise ValueError(f"previous mask must be at half resolution {(H // 2, W // 2)}")
        m = m_raw + upsample_mask(m_prev)
    m = np.clip(m, 0.0, 1.0)
    mc = m[..., None]
    out = backward_warp(enc, F) * mc + dec * (1 - mc)
    return (out[..., 0] if squeeze else out), F, m


def check_pyramid(shapes: list[tuple[int, int]], final: tuple[int, int] | None = None) -> None:
    if not shapes:
        raise ValueError("empty flow pyramid")
    for h, w in shapes:
        for s in (h, w):
            if s < MIN_RES or s > MAX_RES or s & (s - 1):
                raise ValueError(f"pyramid level {(h, w)} is not a power of two in [{MIN_RES}, {MAX_RES}]")
    for (h0, w0), (h1, w1) in zip(shapes, shapes[1:]):
        if (h1, w1) != (2 * h0, 2 * w0):
            raise ValueError(f"pyramid levels must double: {(h0, w0)} -> {(h1, w1)}")
    if final is not None and shapes[-1] != tuple(final):
        raise ValueError(f"finest level {shapes[-1]} must match the coarse flow resolution {tuple(final)}")


def compose_total_flow(F_coarse: np.ndarray, dFs: list[np.ndarray]) -> np.ndarray:
    """F_coarse plus every residual flow upsampled (with value scaling) to full resolution.

    ``dFs`` is ordered coarsest to finest; the finest matches ``F_coarse``.
    """
    F_coarse = _check_flow(F_coarse)
    dFs = [_check_flow(d) for d in dFs]
    check_pyramid([d.shape[:2] for d in dFs], F_coarse.shape[:2])
    total = F_coarse.copy()
    L = len(dFs)
    for i, d in enumerate(dFs):
        for _ in range(L - 1 - i):
            d = upsample_flow(d)
        total = total + d
    return total


def accumulate_flows(dFs: list[np.ndarray]) -> np.ndarray:
    """Level-by-level accumulation F_i = dF_i + up(F_{i-1}), returning the finest F."""
    F = _check_flow(dFs[0])
    for d in dFs[1:]:
        F = _check_flow(d) + upsample_flow(F)
    return F
