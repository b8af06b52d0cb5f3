"""Small differentiable predictors with exact per-sample gradients.

All parameters live in one flat float64 vector. Each model knows the layout of
that vector (named blocks in a fixed order) and computes per-sample gradients
by hand-written backpropagation, block by block, so frozen blocks cost
nothing.

Kinds:

* ``linear``      squared error, scalar target
* ``logistic``    binary cross-entropy, targets in {0, 1}
* ``mlp2``        one tanh hidden layer, squared error on a vector target
* ``keypoint_cc`` one tanh hidden layer feeding per-joint, per-axis bin
                  logits, trained with cross-entropy against smoothed targets
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .numerics import ContractViolation, RngStream

LINEAR = "linear"
LOGISTIC = "logistic"
MLP2 = "mlp2"
KEYPOINT_CC = "keypoint_cc"
KINDS = (LINEAR, LOGISTIC, MLP2, KEYPOINT_CC)


class NonFiniteForward(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite loss for sample {index}")
        self.index = index


# --------------------------------------------------------------------------
# coordinate classification targets


@dataclass(frozen=True)
class SmoothedTarget:
    """Per-axis bin distributions for one joint."""

    x: np.ndarray
    y: np.ndarray


def num_bins(extent: int, kappa: float) -> int:
    return int(math.ceil(extent * kappa))


def smoothed_axis(coord: float, extent: int, kappa: float, smoothing: float) -> np.ndarray:
    """Gaussian-smoothed one-dimensional bin distribution centred on floor(coord·κ)."""
    if not 0 <= coord < extent:
        raise ValueError(f"coordinate {coord} lies outside [0, {extent})")
    bins = np.arange(num_bins(extent, kappa), dtype=np.float64)
    center = math.floor(coord * kappa)
    w = np.exp(-((bins - center) ** 2) / (2.0 * smoothing**2))
    return w / w.sum()


def encode_targets(coord, width: int, height: int, kappa: float = 2.0,
                   smoothing_sigma_bins: float = 2.0) -> SmoothedTarget:
    x, y = coord
    return SmoothedTarget(
        smoothed_axis(x, width, kappa, smoothing_sigma_bins),
        smoothed_axis(y, height, kappa, smoothing_sigma_bins),
    )


def decode_axis(dist: np.ndarray, kappa: float) -> np.ndarray:
    """Argmax bin (lowest index on ties) mapped back to its bin centre.

    ``dist`` may carry leading batch dimensions; the last axis is bins.
    """
    return (np.argmax(dist, axis=-1) + 0.5) / kappa


def decode_coords(axis_distributions, kappa: float = 2.0):
    dx, dy = axis_distributions
    return decode_axis(np.asarray(dx), kappa), decode_axis(np.asarray(dy), kappa)


# --------------------------------------------------------------------------
# model specification


@dataclass
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dim: int = 0
    output_dim: int = 1
    num_joints: int = 0
    bins_x: int = 0
    bins_y: int = 0
    kappa: float = 1.0
    # Half-open [start, stop) ranges over the flat vector; None = all trainable.
    trainable: list[tuple[int, int]] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown model kind {self.kind!r}")
        if self.kind == KEYPOINT_CC:
            self.output_dim = self.num_joints * (self.bins_x + self.bins_y)
        if self.kind in (MLP2, KEYPOINT_CC) and self.hidden_dim < 1:
            raise ContractViolation("hidden_dim must be positive for two-layer models")


def keypoint_spec(height: int, width: int, joints: int, hidden: int, kappa: float = 2.0,
                  trainable=None) -> ModelSpec:
    return ModelSpec(KEYPOINT_CC, height * width, hidden, num_joints=joints,
                     bins_x=num_bins(width, kappa), bins_y=num_bins(height, kappa),
                     kappa=kappa, trainable=trainable)


class Model:
    """A model of a given :class:`ModelSpec` over a flat parameter vector."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        s = spec
        if s.kind in (LINEAR, LOGISTIC):
            blocks = [("w", (s.input_dim,)), ("b", (1,))]
        else:
            blocks = [("W1", (s.input_dim, s.hidden_dim)), ("b1", (s.hidden_dim,)),
                      ("W2", (s.hidden_dim, s.output_dim)), ("b2", (s.output_dim,))]
        self.blocks: list[tuple[str, tuple[int, ...]]] = blocks
        self.offsets: dict[str, tuple[int, int]] = {}
        off = 0
        for name, shape in blocks:
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size)
            off += size
        self.p = off
        self.set_trainable(s.trainable)

    # ---- parameter layout ------------------------------------------------

    def set_trainable(self, ranges) -> None:
        if ranges is None:
            ranges = [(0, self.p)]
        mask = np.zeros(self.p, dtype=bool)
        for a, b in ranges:
            if not 0 <= a < b <= self.p:
                raise ContractViolation(f"trainable range ({a}, {b}) outside [0, {self.p})")
            mask[a:b] = True
        self.spec.trainable = [tuple(r) for r in ranges]
        self.trainable_mask = mask
        self.trainable_index = np.flatnonzero(mask)
        self._needed = {name for name, (a, b) in self.offsets.items() if mask[a:b].any()}

    @property
    def p_trainable(self) -> int:
        return int(self.trainable_index.size)

    def block_range(self, *names: str) -> list[tuple[int, int]]:
        return [self.offsets[n] for n in names]

    def head_blocks(self) -> list[str]:
        return ["w", "b"] if self.spec.kind in (LINEAR, LOGISTIC) else ["W2", "b2"]

    def unpack(self, w: np.ndarray) -> dict[str, np.ndarray]:
        if w.shape != (self.p,):
            raise ContractViolation(f"expected parameter vector of length {self.p}, got {w.shape}")
        return {n: w[a:b].reshape(shape) for (n, shape), (a, b)
                in zip(self.blocks, self.offsets.values())}

    def init_params(self, rng: RngStream) -> np.ndarray:
        w = np.zeros(self.p)
        for name, shape in self.blocks:
            a, b = self.offsets[name]
            if name in ("W1", "W2", "w") and self.spec.kind != LINEAR:
                fan_in = shape[0]
                w[a:b] = rng.normal(b - a) / math.sqrt(fan_in)
        return w

    # ---- forward ---------------------------------------------------------

    def _forward(self, P, X):
        s = self.spec
        if s.kind in (LINEAR, LOGISTIC):
            return None, X @ P["w"] + P["b"][0]
        H = np.tanh(X @ P["W1"] + P["b1"])
        return H, H @ P["W2"] + P["b2"]

    def _loss_and_dout(self, out, Y):
        """Per-sample losses and dLoss/dOutput."""
        s = self.spec
        if s.kind == LINEAR:
            r = out - Y
            return 0.5 * r**2, r
        if s.kind == LOGISTIC:
            return np.logaddexp(0.0, out) - Y * out, special.expit(out) - Y
        if s.kind == MLP2:
            r = out - Y
            return 0.5 * np.sum(r**2, axis=1), r
        # keypoint_cc: mean over 2J softmax cross-entropies
        B = out.shape[0]
        J, bx, by = s.num_joints, s.bins_x, s.bins_y
        zx = out[:, : J * bx].reshape(B, J, bx)
        zy = out[:, J * bx:].reshape(B, J, by)
        tx = Y[:, : J * bx].reshape(B, J, bx)
        ty = Y[:, J * bx:].reshape(B, J, by)
        lx = special.log_softmax(zx, axis=-1)
        ly = special.log_softmax(zy, axis=-1)
        n = 2 * J
        loss = -(np.sum(tx * lx, axis=(1, 2)) + np.sum(ty * ly, axis=(1, 2))) / n
        dzx = (np.exp(lx) - tx) / n
        dzy = (np.exp(ly) - ty) / n
        return loss, np.concatenate([dzx.reshape(B, -1), dzy.reshape(B, -1)], axis=1)

    def losses(self, w, X, Y) -> np.ndarray:
        P = self.unpack(w)
        _, out = self._forward(P, X)
        loss, _ = self._loss_and_dout(out, Y)
        self._check(loss)
        return loss

    def logits(self, w, X) -> np.ndarray:
        return self._forward(self.unpack(w), X)[1]

    @staticmethod
    def _check(loss):
        bad = ~np.isfinite(loss)
        if bad.any():
            raise NonFiniteForward(int(np.flatnonzero(bad)[0]))

    # ---- gradients -------------------------------------------------------

    def _block_grads(self, w, X, Y, need, per_sample: bool):
        P = self.unpack(w)
        X = np.asarray(X, dtype=np.float64)
        H, out = self._forward(P, X)
        loss, d = self._loss_and_dout(out, Y)
        self._check(loss)
        B = X.shape[0]
        g = {}
        if self.spec.kind in (LINEAR, LOGISTIC):
            if "w" in need:
                g["w"] = d[:, None] * X if per_sample else X.T @ d / B
            if "b" in need:
                g["b"] = d[:, None] if per_sample else np.array([d.mean()])
            return loss, g
        if "W2" in need:
            g["W2"] = (np.einsum("bh,bo->bho", H, d).reshape(B, -1) if per_sample
                       else (H.T @ d / B).ravel())
        if "b2" in need:
            g["b2"] = d if per_sample else d.mean(axis=0)
        if "W1" in need or "b1" in need:
            dH = (d @ P["W2"].T) * (1.0 - H**2)
            if "W1" in need:
                g["W1"] = (np.einsum("bi,bh->bih", X, dH).reshape(B, -1) if per_sample
                           else (X.T @ dH / B).ravel())
            if "b1" in need:
                g["b1"] = dH if per_sample else dH.mean(axis=0)
        return loss, g

    def loss_and_per_sample_grad(self, w, X, Y) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample losses and the B x p matrix of their gradients.

        Frozen coordinates are reported as exact zeros.
        """
        if len(X) == 0:
            raise ContractViolation("empty batch")
        loss, g = self._block_grads(w, X, Y, self._needed, per_sample=True)
        G = np.zeros((len(X), self.p))
        for name, blk in g.items():
            a, b = self.offsets[name]
            G[:, a:b] = blk
        G[:, ~self.trainable_mask] = 0.0
        return loss, G

    def trainable_per_sample_grad(self, w, X, Y) -> tuple[np.ndarray, np.ndarray]:
        """Like :meth:`loss_and_per_sample_grad` but restricted to trainable columns."""
        if len(X) == 0:
            raise ContractViolation("empty batch")
        loss, g = self._block_grads(w, X, Y, self._needed, per_sample=True)
        if len(self.trainable_index) == self.p:
            return loss, np.concatenate([g[n] for n, _ in self.blocks], axis=1)
        parts = []
        for name, _ in self.blocks:
            if name not in self._needed:
                continue
            a, b = self.offsets[name]
            cols = self.trainable_mask[a:b]
            parts.append(g[name] if cols.all() else g[name][:, cols])
        return loss, np.concatenate(parts, axis=1)

    def clipped_grad_sum(self, w, X, Y, C: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Σ_i clip(∇l_i, C) over trainable coordinates without materialising B x p.

        Each per-sample block gradient is an outer product (or a vector), so its
        squared norm factorises, e.g. ‖x_i ⊗ δ_i‖² = ‖x_i‖²‖δ_i‖². The clipped sum
        is then one matrix product per block with rows rescaled. Returns
        ``(losses, pre-clip norms, clipped sum)``. ``C = inf`` gives the plain
        sum. Falls back to explicit per-sample gradients when a block is only
        partly trainable.
        """
        if len(X) == 0:
            raise ContractViolation("empty batch")
        partial = any(not self.trainable_mask[a:b].all()
                      for n, (a, b) in self.offsets.items() if n in self._needed)
        if partial:
            loss, G = self.trainable_per_sample_grad(w, X, Y)
            norms = np.linalg.norm(G, axis=1)
            scale = np.minimum(1.0, C / np.maximum(norms, 1e-300)) if np.isfinite(C) else np.ones_like(norms)
            return loss, norms, (G * scale[:, None]).sum(axis=0)
        P = self.unpack(w)
        X = np.asarray(X, dtype=np.float64)
        H, out = self._forward(P, X)
        loss, d = self._loss_and_dout(out, Y)
        self._check(loss)
        need = self._needed
        sq = np.zeros(len(X))
        if self.spec.kind in (LINEAR, LOGISTIC):
            if "w" in need:
                sq += d**2 * np.einsum("bi,bi->b", X, X)
            if "b" in need:
                sq += d**2
        else:
            d2 = np.einsum("bo,bo->b", d, d)
            if "W2" in need:
                sq += np.einsum("bh,bh->b", H, H) * d2
            if "b2" in need:
                sq += d2
            if "W1" in need or "b1" in need:
                dH = (d @ P["W2"].T) * (1.0 - H**2)
                dh2 = np.einsum("bh,bh->b", dH, dH)
                if "W1" in need:
                    sq += np.einsum("bi,bi->b", X, X) * dh2
                if "b1" in need:
                    sq += dh2
        norms = np.sqrt(sq)
        scale = np.ones_like(norms)
        if np.isfinite(C):
            over = norms > C
            scale[over] = C / norms[over]
        parts = []
        for name, _ in self.blocks:
            if name not in need:
                continue
            if name == "w":
                parts.append(X.T @ (scale * d))
            elif name == "b":
                parts.append(np.array([scale @ d]))
            elif name == "W2":
                parts.append((H.T @ (scale[:, None] * d)).ravel())
            elif name == "b2":
                parts.append(scale @ d)
            elif name == "W1":
                parts.append((X.T @ (scale[:, None] * dH)).ravel())
            elif name == "b1":
                parts.append(scale @ dH)
        return loss, norms, np.concatenate(parts)

    def batch_grad(self, w, X, Y) -> tuple[float, np.ndarray]:
        """Mean loss and mean gradient (full length p) computed in one pass."""
        if len(X) == 0:
            raise ContractViolation("empty batch")
        loss, g = self._block_grads(w, X, Y, self._needed, per_sample=False)
        out = np.zeros(self.p)
        for name, blk in g.items():
            a, b = self.offsets[name]
            out[a:b] = blk
        out[~self.trainable_mask] = 0.0
        return float(loss.mean()), out

    # ---- keypoint helpers -----------------------------------------------

    def predict_coords(self, w, X) -> np.ndarray:
        """Decoded (x, y) per joint, shape (N, J, 2)."""
        s = self.spec
        if s.kind != KEYPOINT_CC:
            raise ContractViolation("predict_coords needs a keypoint_cc model")
        z = self.logits(w, X)
        N, J = z.shape[0], s.num_joints
        zx = z[:, : J * s.bins_x].reshape(N, J, s.bins_x)
        zy = z[:, J * s.bins_x:].reshape(N, J, s.bins_y)
        return np.stack([decode_axis(zx, s.kappa), decode_axis(zy, s.kappa)], axis=-1)


def keypoint_targets(joints: np.ndarray, width: int, height: int, kappa: float,
                     smoothing: float) -> np.ndarray:
    """Flat smoothed target rows for a (N, J, 2) joint array.

    Row layout matches the model's logits: all joints' x-distributions, then all
    joints' y-distributions.
    """
    joints = np.asarray(joints, dtype=np.float64)
    N, J, _ = joints.shape
    bx, by = num_bins(width, kappa), num_bins(height, kappa)
    out = np.empty((N, J * (bx + by)))
    for i in range(N):
        for j in range(J):
            t = encode_targets(joints[i, j], width, height, kappa, smoothing)
            out[i, j * bx:(j + 1) * bx] = t.x
            out[i, J * bx + j * by: J * bx + (j + 1) * by] = t.y
    return out


def trainable_ranges_for(model: Model, blocks: Sequence[str]) -> list[tuple[int, int]]:
    return sorted(model.offsets[b] for b in blocks)
