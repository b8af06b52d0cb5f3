"""Public gradient subspace: estimation, refresh schedule and projection."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, RankDeficiencyError, gram_topk_eig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProjectionBasis:
    """Orthonormal p x k basis. ``V_hat is None`` encodes the full space (k == p)."""

    V_hat: np.ndarray | None
    k: int
    p: int
    refreshed_at_step: int = 0
    eigenvalues: np.ndarray | None = None
    eigengap: float = float("nan")

    @classmethod
    def identity(cls, p: int, step: int = 0) -> "ProjectionBasis":
        return cls(None, p, p, step)

    @classmethod
    def from_matrix(cls, V: np.ndarray, step: int = 0) -> "ProjectionBasis":
        V = np.asarray(V, dtype=np.float64)
        p, k = V.shape
        return cls(None if k == p else V, k, p, step)

    @property
    def is_identity(self) -> bool:
        return self.k == self.p

    def matrix(self) -> np.ndarray:
        return np.eye(self.p) if self.V_hat is None else self.V_hat


@dataclass(frozen=True)
class PublicGradientSet:
    grads: np.ndarray  # m x p
    source_step: int

    @property
    def m(self) -> int:
        return self.grads.shape[0]


def basis_from_gradients(public: PublicGradientSet, k: int) -> ProjectionBasis:
    """Top-k eigenspace of the public second-moment matrix (1/m) Σ g gᵀ."""
    m, p = public.grads.shape
    if m < k:
        raise ValueError(f"need at least k={k} public samples, got m={m}")
    if k == p:
        return ProjectionBasis.identity(p, public.source_step)
    eig = gram_topk_eig(public.grads, k)
    return ProjectionBasis(eig.vectors, k, p, public.source_step, eig.eigenvalues,
                           float(eig.eigenvalues[-1] - eig.next_eigenvalue))


def estimate_basis(model, w, public_inputs, public_targets, k: int, step: int = 0,
                   public_features=None, public_weight: float = 1.0) -> ProjectionBasis:
    """Estimate the projection basis from the public set only.

    Gradients are of the full loss at ``w``: the raw-input term plus, when
    ``public_features`` (ψ of the public inputs) is given, the feature term.
    Only trainable coordinates take part.
    """
    _, G = model.trainable_per_sample_grad(w, public_inputs, public_targets)
    if public_features is not None and public_weight != 0:
        _, Gf = model.trainable_per_sample_grad(w, public_features, public_targets)
        G = G + public_weight * Gf
    basis = basis_from_gradients(PublicGradientSet(G, step), k)
    log.debug("basis refreshed at step %d, eigengap %.3g", step, basis.eigengap)
    return basis


def clamp_k(k: int, m: int, p: int) -> int:
    kk = min(k, m, p)
    if kk < k:
        log.warning("projection dimension clamped from %d to %d (m=%d, p=%d)", k, kk, m, p)
    return kk


def project(basis: ProjectionBasis, g: np.ndarray) -> np.ndarray:
    """V̂ V̂ᵀ g. A full-rank basis is the identity map and returns ``g`` unchanged."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != basis.p:
        raise ContractViolation(f"vector length {g.shape[-1]} does not match basis rows {basis.p}")
    if basis.is_identity:
        return g.copy()
    V = basis.V_hat
    return V @ (V.T @ g)


def refresh_policy(step: int, interval: int) -> bool:
    if interval < 1:
        raise ContractViolation("refresh interval must be at least 1")
    return step % interval == 0


__all__ = [
    "ProjectionBasis", "PublicGradientSet", "RankDeficiencyError", "basis_from_gradients",
    "estimate_basis", "clamp_k", "project", "refresh_policy",
]
