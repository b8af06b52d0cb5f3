"""Dense linear algebra and seeded sampling primitives.

Everything here runs in float64. Eigenvectors come back in a canonical form
(descending eigenvalues, degenerate clusters rotated onto the lowest-index
coordinate directions, largest-magnitude entry positive) so that results are
reproducible enough to compare bitwise in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """Raised when an input breaks an operation's stated precondition."""


class RankDeficiencyError(ValueError):
    """Raised when more eigenvectors are requested than the numerical rank allows."""

    def __init__(self, requested: int, rank: int):
        super().__init__(
            f"requested k={requested} eigenvectors but numerical rank is {rank}"
        )
        self.requested = requested
        self.rank = rank


# Relative eigenvalue floor below which a Gram direction counts as rank-deficient.
RANK_TOL = 1e-12


def check_finite(a: np.ndarray, name: str = "input") -> None:
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} contains non-finite entries")


def canonical_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Ties in magnitude resolve to the lowest row index (``argmax`` semantics).
    """
    vecs = np.array(vecs, dtype=np.float64, copy=True)
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _canonical_cluster_basis(block: np.ndarray) -> np.ndarray:
    """Rotate an orthonormal basis of a degenerate eigenspace to canonical form.

    The projector onto the cluster is applied to e_1, e_2, ... in index order
    and the images are Gram-Schmidt orthonormalised, keeping the first
    ``block.shape[1]`` independent ones.
    """
    d, r = block.shape
    out = np.empty((d, r))
    found = 0
    for i in range(d):
        if found == r:
            break
        v = block @ block[i]  # P e_i
        if found:
            v = v - out[:, :found] @ (out[:, :found].T @ v)
            v = v - out[:, :found] @ (out[:, :found].T @ v)
        nrm = np.linalg.norm(v)
        if nrm > 1e-6:
            out[:, found] = v / nrm
            found += 1
    if found < r:  # numerically impossible for an orthonormal block, kept as a guard
        return block
    return out


def _canonicalize(evals: np.ndarray, evecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort descending and canonicalise degenerate clusters and signs."""
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    scale = np.max(np.abs(evals)) if evals.size else 0.0
    tol = 1e-10 * (scale + 1.0)
    start = 0
    n = evals.size
    while start < n:
        stop = start + 1
        while stop < n and abs(evals[start] - evals[stop]) <= tol:
            stop += 1
        if stop - start > 1:
            evecs[:, start:stop] = _canonical_cluster_basis(evecs[:, start:stop])
        start = stop
    return evals, canonical_signs(evecs)


def sym_eig_topk(M: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as the columns of a ``d x k`` array.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {M.shape}")
    check_finite(M, "matrix")
    d = M.shape[0]
    if not 1 <= k <= d:
        raise ContractViolation(f"k={k} must lie in [1, {d}]")
    scale = np.max(np.abs(M)) if M.size else 0.0
    if np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise ContractViolation("matrix is not symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (M + M.T))
    evals, evecs = _canonicalize(evals, evecs)
    return evals[:k].copy(), evecs[:, :k].copy()


@dataclass(frozen=True)
class GramEig:
    """Top-k eigenpairs of (1/m) GᵀG recovered through the m x m Gram matrix."""

    eigenvalues: np.ndarray  # descending, length k
    vectors: np.ndarray  # p x k, orthonormal columns
    rank: int
    next_eigenvalue: float  # lambda_{k+1}, 0.0 when k equals the rank


def gram_topk_eig(G: np.ndarray, k: int) -> GramEig:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise ContractViolation(f"expected a 2-D gradient stack, got shape {G.shape}")
    check_finite(G, "gradient rows")
    m, p = G.shape
    if k < 1 or k > min(m, p):
        raise ContractViolation(f"k={k} must lie in [1, min(m, p)={min(m, p)}]")
    K = (G @ G.T) / m
    evals, U = np.linalg.eigh(0.5 * (K + K.T))
    evals, U = evals[::-1].copy(), np.ascontiguousarray(U[:, ::-1])
    lam1 = evals[0]
    rank = int(np.sum(evals > RANK_TOL * lam1)) if lam1 > 0 else 0
    if k > rank:
        raise RankDeficiencyError(k, rank)
    # Only lift the columns up to the end of the eigenvalue cluster holding λ_k.
    tol = 1e-10 * (abs(lam1) + 1.0)
    cut = k
    while cut < rank and abs(evals[cut] - evals[k - 1]) <= tol:
        cut += 1
    # v_i = Gᵀ u_i / sqrt(m λ_i) is a unit eigenvector of (1/m) GᵀG.
    V = (G.T @ U[:, :cut]) / np.sqrt(m * evals[:cut])
    lam, V = _canonicalize(evals[:cut].copy(), V)
    nxt = float(evals[cut]) if cut < rank else 0.0
    if cut > k:
        nxt = float(lam[k])
    return GramEig(lam[:k].copy(), V[:, :k].copy(), rank, nxt)


def gram_topk(G: np.ndarray, k: int) -> np.ndarray:
    """Orthonormal p x k basis of the top-k eigenspace of (1/m) GᵀG.

    Only the m x m Gram matrix is decomposed, so memory stays O(mp).
    Raises :class:`RankDeficiencyError` when ``k`` exceeds the numerical rank.
    """
    return gram_topk_eig(G, k).vectors


@dataclass
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Draws are sequential; the n-th draw of a given stream is identical across
    runs and processes. Never share an instance across threads: call
    :meth:`derive` to get an independent child stream instead.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0:
            raise ContractViolation("seed and stream_id must be non-negative")
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id]))
        )

    def derive(self, label: int) -> "RngStream":
        """Child stream keyed on this stream's identity and ``label``."""
        mixed = np.random.SeedSequence([self.seed, self.stream_id, label])
        return RngStream(int(mixed.generate_state(1, np.uint64)[0]), label)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)


def gaussian_vector(rng: RngStream, p: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Vector of ``p`` i.i.d. N(mean, std²) draws; ``std == 0`` returns the mean."""
    if not std >= 0:
        raise ContractViolation(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(p, float(mean))
    return mean + std * rng.normal(p)
