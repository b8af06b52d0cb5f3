"""Synthetic keypoint images, the Gaussian-blur public feature map, and splits."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import ContractViolation, RngStream

BLOB_SIGMA = 1.0
BLOB_AMPLITUDE = 0.8
MIN_SEPARATION = 4.0
DEFAULT_KERNEL = 9
DEFAULT_BLUR_SIGMA = 3.0

MAGIC = b"FPDP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class GeometryError(ValueError):
    """The requested joints cannot be placed with the required separation."""


@dataclass
class KeypointSet:
    """A batch of samples: raw images, joint coordinates and their blurred copies.

    ``images`` and ``public_images`` have shape (n, H, W); ``joints`` has shape
    (n, J, 2) holding (x, y) in pixel units, with pixel (r, c) covering
    [c, c+1) x [r, r+1).
    """

    images: np.ndarray
    joints: np.ndarray
    public_images: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, idx) -> "KeypointSet":
        idx = np.asarray(idx)
        return KeypointSet(self.images[idx], self.joints[idx], self.public_images[idx])


@dataclass
class SplitDataset:
    public: KeypointSet
    private: KeypointSet
    public_index: np.ndarray
    private_index: np.ndarray


# --------------------------------------------------------------------------
# public feature map


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 != 1 or size < 1:
        raise ContractViolation(f"kernel size must be odd, got {size}")
    if not sigma > 0:
        raise ContractViolation("blur sigma must be positive")
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2 * sigma**2))
    return k / k.sum()


def blur_psi(image: np.ndarray, kernel_size: int = DEFAULT_KERNEL,
             sigma_x: float = DEFAULT_BLUR_SIGMA) -> np.ndarray:
    """Separable Gaussian blur of the whole frame with edge replication.

    Accepts a single (H, W) image or a stack (..., H, W).
    """
    k = gaussian_kernel(kernel_size, sigma_x)
    img = np.asarray(image, dtype=np.float64)
    out = ndimage.correlate1d(img, k, axis=-1, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=-2, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# generation


def _cells(J: int, H: int, W: int):
    """Grid cell per joint; joints live in their own region of the frame."""
    cols = math.ceil(math.sqrt(J))
    rows = math.ceil(J / cols)
    cw, ch = W / cols, H / rows
    return [((j % cols) * cw, (j // cols) * ch, cw, ch) for j in range(J)]


def _place_joints(rng: np.random.Generator, J: int, H: int, W: int, margin: float,
                  cells, max_tries: int = 1000) -> np.ndarray:
    for _ in range(max_tries):
        pts = np.empty((J, 2))
        for j, (x0, y0, cw, ch) in enumerate(cells):
            pts[j, 0] = x0 + margin + rng.random() * (cw - 2 * margin)
            pts[j, 1] = y0 + margin + rng.random() * (ch - 2 * margin)
        if J == 1:
            return pts
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if d[np.triu_indices(J, 1)].min() >= MIN_SEPARATION:
            return pts
    raise GeometryError(f"could not place {J} joints with separation {MIN_SEPARATION}")


def render(joints: np.ndarray, H: int, W: int, amplitude: float = BLOB_AMPLITUDE,
           blob_sigma: float = BLOB_SIGMA) -> np.ndarray:
    """Sum of isotropic Gaussian blobs centred on the joints (no noise)."""
    cy = np.arange(H) + 0.5
    cx = np.arange(W) + 0.5
    img = np.zeros((H, W))
    for x, y in joints:
        gy = np.exp(-((cy - y) ** 2) / (2 * blob_sigma**2))
        gx = np.exp(-((cx - x) ** 2) / (2 * blob_sigma**2))
        img += amplitude * np.outer(gy, gx)
    return img


def generate(rng: RngStream, n: int, H: int = 32, W: int = 32, J: int = 4,
             noise_level: float = 0.1, kernel_size: int = DEFAULT_KERNEL,
             blur_sigma: float = DEFAULT_BLUR_SIGMA) -> KeypointSet:
    """Render ``n`` noisy images of ``J`` blobs; sample i uses stream ``rng.derive(i)``."""
    if H < 16 or W < 16:
        raise ContractViolation("frames must be at least 16x16")
    if J < 1:
        raise ContractViolation("need at least one joint")
    if noise_level < 0:
        raise ContractViolation("noise_level must be non-negative")
    if noise_level > 0 and BLOB_AMPLITUDE < 3 * noise_level:
        raise ContractViolation(
            f"blob amplitude {BLOB_AMPLITUDE} is below 3x the noise std {noise_level}")
    margin = 2.0 * BLOB_SIGMA
    cells = _cells(J, H, W)
    if min(min(cw, ch) for _, _, cw, ch in cells) - 2 * margin <= 0:
        raise GeometryError(f"{J} joints do not fit in a {H}x{W} frame")
    images = np.empty((n, H, W))
    joints = np.empty((n, J, 2))
    for i in range(n):
        g = rng.derive(i).generator
        pts = _place_joints(g, J, H, W, margin, cells)
        img = render(pts, H, W)
        if noise_level > 0:
            img = np.clip(img + noise_level * g.standard_normal((H, W)), 0.0, 1.0)
        images[i] = img
        joints[i] = pts
    return KeypointSet(images, joints, blur_psi(images, kernel_size, blur_sigma))


def split(samples: KeypointSet, m: int, rng: RngStream) -> SplitDataset:
    """Uniformly random disjoint split into ``m`` public and ``n - m`` private samples."""
    n = len(samples)
    if not 0 <= m < n:
        raise ValueError(f"public size m={m} must be smaller than n={n}")
    perm = rng.generator.permutation(n)
    pub, priv = np.sort(perm[:m]), np.sort(perm[m:])
    return SplitDataset(samples.subset(pub), samples.subset(priv), pub, priv)


# --------------------------------------------------------------------------
# storage


def save(samples: KeypointSet, path) -> tuple[Path, Path]:
    """Write the binary container and a CSV sidecar of joint coordinates."""
    path = Path(path)
    n, H, W = samples.images.shape
    J = samples.joints.shape[1]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, H, W, J, n))
        f.write(samples.images.astype("<f8").tobytes())
        f.write(samples.joints.astype("<f8").tobytes())
    sidecar = path.with_suffix(".csv")
    with open(sidecar, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample", "joint", "x", "y"])
        for i in range(n):
            for j in range(J):
                x, y = samples.joints[i, j]
                w.writerow([i, j, repr(float(x)), repr(float(y))])
    return path, sidecar


def load(path, kernel_size: int = DEFAULT_KERNEL, blur_sigma: float = DEFAULT_BLUR_SIGMA) -> KeypointSet:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, H, W, J, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path} is not a keypoint container")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f8", n * H * W, off).reshape(n, H, W).copy()
    off += 8 * n * H * W
    joints = np.frombuffer(raw, "<f8", n * J * 2, off).reshape(n, J, 2).copy()
    return KeypointSet(images, joints, blur_psi(images, kernel_size, blur_sigma))
