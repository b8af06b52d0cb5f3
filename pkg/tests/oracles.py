"""Independent reference computations used only by the tests.

None of these share code with the library paths they check.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np


def jacobi_eig(A, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations; returns (eigenvalues, eigenvectors) unsorted."""
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(A**2) - np.sum(np.diag(A) ** 2), 0.0))
        if off < tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    return np.diag(A).copy(), V


def rdp_mp(q, sigma, alpha, prec=256):
    """Subsampled-Gaussian RDP by direct term-by-term summation in high precision."""
    with mpmath.workprec(prec):
        q = mpmath.mpf(q)
        s2 = mpmath.mpf(sigma) ** 2
        total = mpmath.mpf(0)
        for j in range(alpha + 1):
            total += (mpmath.binomial(alpha, j) * (1 - q) ** (alpha - j) * q**j
                      * mpmath.exp(mpmath.mpf(j * (j - 1)) / (2 * s2)))
        return mpmath.log(total) / (alpha - 1)


def epsilon_mp(q, sigma, steps, delta, orders, prec=256):
    with mpmath.workprec(prec):
        best = None
        for a in orders:
            e = steps * rdp_mp(q, sigma, a, prec) + mpmath.log(1 / mpmath.mpf(delta)) / (a - 1)
            best = e if best is None or e < best else best
        return best


def conv2d_edge(image, kernel1d):
    """Direct 2-D correlation with the outer-product kernel and edge replication."""
    k = np.outer(kernel1d, kernel1d)
    r = len(kernel1d) // 2
    H, W = image.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), H - 1)
                    jj = min(max(j + dj, 0), W - 1)
                    acc += k[di + r, dj + r] * image[ii, jj]
            out[i, j] = acc
    return out


def principal_angles(A, B):
    """Principal angles (radians) between the column spans of A and B."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))


def subspace_distance(A, B):
    """sin of the largest principal angle, computed via projector difference."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    return np.linalg.norm(Qa @ Qa.T - Qb @ Qb.T, 2)


def central_fd(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g
