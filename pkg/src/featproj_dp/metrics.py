"""Keypoint accuracy and optimizer diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation


@dataclass(frozen=True)
class PckResult:
    per_joint: np.ndarray
    mean: float
    threshold: float
    normalizer: float

    @property
    def label(self) -> str:
        return f"PCK@{self.threshold:g}·norm({self.normalizer:.4g}px)"


def frame_diagonal(height: int, width: int) -> float:
    return math.hypot(height, width)


def pck(preds: np.ndarray, gts: np.ndarray, tau: float, normalizer: float) -> PckResult:
    """Fraction of joints whose prediction lies within ``tau * normalizer`` of the truth.

    Arrays have shape (N, J, 2). A distance exactly on the threshold counts as
    correct.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 3 or preds.shape[-1] != 2:
        raise ContractViolation(f"shape mismatch: preds {preds.shape} vs gts {gts.shape}")
    if not normalizer > 0:
        raise ContractViolation("normalizer must be positive")
    dist = np.linalg.norm(preds - gts, axis=-1)
    per_joint = np.mean(dist <= tau * normalizer, axis=0)
    return PckResult(per_joint, float(per_joint.mean()), tau, normalizer)


def snr_diagnostic(history) -> np.ndarray:
    """Per-step ratio of aggregated clipped-signal norm to injected-noise norm.

    Steps without noise report ``+inf``.
    """
    sig = np.array([r.signal_norm for r in history], dtype=np.float64)
    noise = np.array([r.noise_norm for r in history], dtype=np.float64)
    out = np.full(sig.shape, np.inf)
    nz = noise > 0
    out[nz] = sig[nz] / noise[nz]
    return out


def snr_summary(history) -> dict[str, float]:
    r = snr_diagnostic(history)
    finite = r[np.isfinite(r)]
    if finite.size == 0:
        return {"median": math.inf, "q25": math.inf, "q75": math.inf, "min": math.inf}
    return {
        "median": float(np.median(r)),
        "q25": float(np.percentile(finite, 25)),
        "q75": float(np.percentile(finite, 75)),
        "min": float(finite.min()),
    }


def noise_reduction(history) -> float:
    """Mean squared projected-noise norm over mean squared raw-noise norm."""
    raw = np.array([r.noise_norm for r in history]) ** 2
    proj = np.array([r.projected_noise_norm for r in history]) ** 2
    if raw.sum() == 0:
        return 1.0
    return float(proj.mean() / raw.mean())
