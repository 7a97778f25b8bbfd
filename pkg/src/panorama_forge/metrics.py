"""Frechet distance between Gaussian feature fits, plus cheap temporal and
cross-view consistency proxies for generated clips."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

SYM_TOL = 1e-9
EIG_TOL = 1e-8


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = mu.shape[0]
        if d < 1 or cov.shape != (d, d):
            raise MetricsError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        # tolerances scale with the matrix so large-valued features are not rejected for round-off
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > SYM_TOL * scale:
            raise MetricsError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -EIG_TOL * scale * d:
            raise MetricsError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] < 1:
        raise MetricsError(f"features must be (n, d), got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise MetricsError(f"need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    centred = x - mu
    cov = centred.T @ centred / (n - 1)
    return GaussianStats(mu, (cov + cov.T) / 2, n)


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared mean gap plus the covariance term, with the cross term taken as
    the trace of sqrt(sqrt(A) B sqrt(A)) so only symmetric eigenproblems occur."""
    if a.dim != b.dim:
        raise MetricsError(f"dimension mismatch: {a.dim} vs {b.dim}")
    try:
        root_a = _psd_sqrt(a.cov)
        inner = root_a @ b.cov @ root_a
        cross = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)).sum()
    except np.linalg.LinAlgError as exc:
        raise MetricsError(f"eigendecomposition failed: {exc}") from None
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(fd, 0.0)


def temporal_consistency(frames) -> float:
    """Mean squared change between consecutive frames of a ``(V, T, H, W, C)`` clip."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5:
        raise MetricsError(f"frames must be (V, T, H, W, C), got {x.shape}")
    if x.shape[1] < 2:
        raise MetricsError("temporal consistency needs at least 2 frames")
    per_view = [float(np.mean((x[v, 1:] - x[v, :-1]) ** 2)) for v in range(x.shape[0])]
    return float(np.mean(per_view))


def seam_discontinuity(panorama, views: int, cyclic: bool = True) -> float:
    """How much rougher the view boundaries are than view interiors.

    ``panorama`` is ``(H, V*W)`` or ``(H, V*W, C)``; leading frame axes are
    averaged over. With ``cyclic`` the last view also wraps onto the first.
    """
    x = np.asarray(panorama, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim < 3:
        raise MetricsError(f"panorama must be (..., H, V*W, C), got {x.shape}")
    if views < 1 or x.shape[-2] % views:
        raise MetricsError(f"width {x.shape[-2]} not divisible by {views} views")
    if views == 1:
        return 0.0
    w = x.shape[-2] // views
    grad = np.diff(x, axis=-2) ** 2  # between column j and j+1
    boundary = [grad[..., v * w - 1, :] for v in range(1, views)]
    if cyclic:
        boundary.append((x[..., 0, :] - x[..., -1, :]) ** 2)
    interior_cols = [j for j in range(grad.shape[-2]) if (j + 1) % w]
    interior = float(np.mean(grad[..., interior_cols, :])) if interior_cols else 0.0
    return max(float(np.mean(np.stack(boundary))) - interior, 0.0)


def pooled_gray_features(frame, pool: int = 4) -> np.ndarray:
    """Default extractor: luminance averaged over ``pool x pool`` blocks, flattened."""
    x = np.asarray(frame, dtype=np.float64)
    gray = x @ np.array([0.299, 0.587, 0.114]) if x.ndim == 3 else x
    H, W = gray.shape
    if H % pool or W % pool:
        gray = gray[: H - H % pool, : W - W % pool]
        H, W = gray.shape
    return gray.reshape(H // pool, pool, W // pool, pool).mean(axis=(1, 3)).reshape(-1)


def extract_features(frames, extractor: Optional[Callable] = None, workers: int = 1) -> np.ndarray:
    """One feature vector per (view, frame) of a ``(V, T, H, W, C)`` clip, in fixed order."""
    x = np.asarray(frames)
    if x.ndim != 5:
        raise MetricsError(f"frames must be (V, T, H, W, C), got {x.shape}")
    fn = extractor or pooled_gray_features
    items = [x[v, t] for v in range(x.shape[0]) for t in range(x.shape[1])]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(fn, items))
    else:
        feats = [fn(i) for i in items]
    return np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in feats])


def panorama_frames(frames) -> np.ndarray:
    """``(V, T, H, W, C)`` -> ``(T, H, V*W, C)`` by placing views side by side."""
    x = np.asarray(frames)
    V, T, H, W, C = x.shape
    return x.transpose(1, 2, 0, 3, 4).reshape(T, H, V * W, C)


def evaluate(generated, reference, extractor: Optional[Callable] = None, workers: int = 1) -> dict:
    gen = np.asarray(generated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    fg = extract_features(gen, extractor, workers)
    fr = extract_features(ref, extractor, workers)
    fd = frechet_distance(fit_gaussian(fg), fit_gaussian(fr))
    tc = temporal_consistency(gen) if gen.shape[1] >= 2 else 0.0
    seam = seam_discontinuity(panorama_frames(gen), gen.shape[0])
    return {"fd": fd, "temporal_consistency": tc, "seam": seam, "n_samples": int(fg.shape[0])}


def report_json(report: dict) -> str:
    keys = ("fd", "temporal_consistency", "seam", "n_samples")
    missing = [k for k in keys if k not in report]
    if missing:
        raise MetricsError(f"report is missing {missing}")
    return json.dumps({k: report[k] for k in keys}, sort_keys=False)
