"""Private training loop: SGD, DP-SGD, projected DP-SGD, Feature-DP and
Feature-Projective DP-SGD share one parameterised step.

Every private variant computes per-sample gradients of the private loss on raw
inputs, clips them, sums them, adds N(0, σ²C²I) and divides by the expected
batch size qn. Variants then differ only in whether the noisy gradient is
projected onto the public subspace and whether a clean gradient of the public
loss (evaluated on ψ(x)) is added.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import accountant
from .accountant import PrivacySpec
from .numerics import ContractViolation, RngStream, gaussian_vector
from .subspace import ProjectionBasis, clamp_k, estimate_basis, project, refresh_policy

log = logging.getLogger(__name__)

SGD = "SGD"
DPSGD = "DPSGD"
PROJ_DPSGD = "PROJ_DPSGD"
FDP = "FDP"
FEATURE_PROJECTIVE = "FEATURE_PROJECTIVE"
VARIANTS = (SGD, DPSGD, PROJ_DPSGD, FDP, FEATURE_PROJECTIVE)

_PROJECTED = (PROJ_DPSGD, FEATURE_PROJECTIVE)
_USES_PUBLIC = (FDP, FEATURE_PROJECTIVE)

# Stream labels derived from a run's RngStream.
STREAM_INIT, STREAM_PRIVATE_BATCH, STREAM_PUBLIC_BATCH, STREAM_NOISE = 0, 1, 2, 3


# --------------------------------------------------------------------------
# data views


@dataclass
class PrivateBatch:
    """Raw inputs of private samples. Only the private loss may read these."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)


@dataclass
class PublicBatch:
    """ψ-features of samples with their labels; never carries a raw input."""

    features: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.features)


@dataclass
class PublicSet:
    """The public subset S_pub, used only for subspace estimation."""

    inputs: np.ndarray
    features: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)


@dataclass
class TrainData:
    private: PrivateBatch
    private_features: PublicBatch | None = None  # ψ(x) for x in S_priv
    public_set: PublicSet | None = None

    @property
    def n(self) -> int:
        return len(self.private)


@dataclass
class Hyper:
    eta: float = 0.1
    steps: int = 100
    q: float = 0.05
    k: int | None = 50  # None: full space, no projection
    refresh: int | None = None  # None: one pass over the private data
    warmup: float = 0.0  # fraction of steps with linear warmup
    public_weight: float = 1.0  # 0 switches the public loss off


@dataclass
class StepRecord:
    step: int
    batch_size: int
    grad_norm_pre_clip: float
    clipped_fraction: float
    signal_norm: float
    noise_norm: float
    projected_noise_norm: float
    projected_norm: float
    loss_private: float
    loss_public: float


@dataclass
class TrainResult:
    w: np.ndarray
    history: list[StepRecord] = field(default_factory=list)
    accounted_epsilon: float = 0.0
    halted: bool = False
    bases: list[ProjectionBasis] = field(default_factory=list)

    @property
    def steps_run(self) -> int:
        return len(self.history)


# --------------------------------------------------------------------------
# primitives


def clip_gradient(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` down to L2 norm ``C`` if it is longer; otherwise return it as is."""
    if not C > 0:
        raise ContractViolation("clip norm must be positive")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ContractViolation("gradient contains non-finite entries")
    nrm = np.linalg.norm(g)
    if nrm <= C:
        return g.copy()
    return g * (C / nrm)


def clip_rows(G: np.ndarray, C: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise clipping. Returns the clipped rows and the pre-clip norms."""
    if not C > 0:
        raise ContractViolation("clip norm must be positive")
    if not np.all(np.isfinite(G)):
        raise ContractViolation("gradient contains non-finite entries")
    norms = np.linalg.norm(G, axis=1)
    scale = np.ones_like(norms)
    over = norms > C
    scale[over] = C / norms[over]
    return G * scale[:, None], norms


def noisy_sum(per_sample: np.ndarray, C: float, sigma: float, rng: RngStream,
              p: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sum of already-clipped rows and an independent N(0, σ²C²I) draw."""
    per_sample = np.asarray(per_sample, dtype=np.float64)
    if per_sample.ndim != 2:
        raise ContractViolation("per-sample gradients must be a 2-D array")
    if len(per_sample):
        top = np.max(np.linalg.norm(per_sample, axis=1))
        if top > C * (1 + 1e-12):
            raise ContractViolation(
                f"per-sample gradient of norm {top:.6g} exceeds clip norm {C:g}")
    dim = per_sample.shape[1] if p is None else p
    total = per_sample.sum(axis=0) if len(per_sample) else np.zeros(dim)
    return total, gaussian_vector(rng, dim, 0.0, sigma * C)


def noisy_aggregate(per_sample: np.ndarray, C: float, sigma: float, rng: RngStream,
                    batch_size: float | None = None) -> np.ndarray:
    """(1/B)(Σ g̃_i + ν) with ν ~ N(0, σ²C²I).

    ``batch_size`` defaults to the number of rows; the trainer passes the
    expected Poisson batch size qn instead.
    """
    total, noise = noisy_sum(per_sample, C, sigma, rng)
    B = len(per_sample) if batch_size is None else batch_size
    if not B > 0:
        raise ContractViolation("batch size must be positive")
    return (total + noise) / B


def poisson_sample(rng: RngStream, n: int, q: float) -> np.ndarray:
    return np.flatnonzero(rng.uniform(n) < q)


# --------------------------------------------------------------------------
# one step


def fp_dp_step(model, w, priv_batch: PrivateBatch, pub_batch: PublicBatch | None,
               basis: ProjectionBasis | None, spec: PrivacySpec | None, eta: float,
               rng: RngStream, *, denom: float, step: int = 0,
               refresh_interval: int | None = None, public_weight: float = 1.0,
               private: bool = True, explicit: bool = False) -> tuple[np.ndarray, StepRecord]:
    """One update w - η (g_pub + P_V(g_priv)) on the trainable coordinates.

    ``pub_batch=None`` drops the public term, ``basis=None`` skips projection
    and ``private=False`` (plain SGD) skips clipping and noise. By default the
    clipped sum comes from the model's factorised per-sample norms;
    ``explicit=True`` materialises the B x p per-sample gradients and goes
    through :func:`clip_rows` / :func:`noisy_sum` instead (same result, same
    noise draw).
    """
    if basis is not None and refresh_interval is not None:
        if not 0 <= step - basis.refreshed_at_step < refresh_interval:
            raise ContractViolation(
                f"stale projection basis from step {basis.refreshed_at_step} used at step {step}")
    idx = model.trainable_index
    p = idx.size

    C = spec.clip_norm if private else math.inf
    B = len(priv_batch)
    if B and explicit:
        losses, G = model.trainable_per_sample_grad(w, priv_batch.inputs, priv_batch.targets)
        G, norms = clip_rows(G, C) if private else (G, np.linalg.norm(G, axis=1))
        loss_priv = float(losses.mean())
    elif B:
        losses, norms, total = model.clipped_grad_sum(w, priv_batch.inputs, priv_batch.targets, C)
        loss_priv = float(losses.mean())
    else:
        norms, total = np.zeros(0), np.zeros(p)
        loss_priv = float("nan")

    if private:
        if B and explicit:
            total, noise = noisy_sum(G, C, spec.sigma, rng, p)
        else:
            noise = gaussian_vector(rng, p, 0.0, spec.sigma * C)
        g_priv = (total + noise) / denom
        noised = True
        clipped = float(np.mean(norms > C)) if B else 0.0
    else:
        if B and explicit:
            total = G.sum(axis=0)
        noise = np.zeros(p)
        g_priv = total / denom
        noised = False
        clipped = 0.0

    if basis is not None:
        if private and not noised:
            raise AssertionError("projection must follow noise addition")
        g_proj = project(basis, g_priv)
        proj_noise = project(basis, noise) if private else noise
    else:
        g_proj = g_priv
        proj_noise = noise

    loss_pub = float("nan")
    if pub_batch is not None and public_weight != 0 and len(pub_batch):
        loss_pub, g_full = model.batch_grad(w, pub_batch.features, pub_batch.targets)
        g = public_weight * g_full[idx] + g_proj
    else:
        g = g_proj

    w_next = w.copy()
    w_next[idx] = w[idx] - eta * g
    rec = StepRecord(
        step=step,
        batch_size=B,
        grad_norm_pre_clip=float(norms.mean()) if B else 0.0,
        clipped_fraction=clipped,
        signal_norm=float(np.linalg.norm(total) / denom),
        noise_norm=float(np.linalg.norm(noise) / denom),
        projected_noise_norm=float(np.linalg.norm(proj_noise) / denom),
        projected_norm=float(np.linalg.norm(g_proj)),
        loss_private=loss_priv,
        loss_public=loss_pub,
    )
    return w_next, rec


# --------------------------------------------------------------------------
# training loop


def _lr(hyper: Hyper, t: int) -> float:
    if hyper.warmup > 0:
        warm = max(1, int(math.ceil(hyper.warmup * hyper.steps)))
        return hyper.eta * min(1.0, (t + 1) / warm)
    return hyper.eta


def train(variant: str, model, data: TrainData, spec: PrivacySpec | None, hyper: Hyper,
          rng: RngStream, w0: np.ndarray | None = None) -> TrainResult:
    """Run ``hyper.steps`` updates of ``variant`` and account the privacy spent.

    Private batches are Poisson samples of S_priv at rate ``hyper.q``; the public
    batch (FDP variants) is an independent Poisson sample of ψ(S_priv) at the
    same rate. Training halts early if the next step would push the accounted
    epsilon past ``spec.epsilon``. ``spec.sigma == 0`` is allowed for reduction
    checks: nothing is accounted and the reported epsilon is infinite.
    """
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}")
    private = variant != SGD
    if private and spec is None:
        raise ContractViolation(f"variant {variant} needs a privacy spec")
    if variant in _USES_PUBLIC and data.private_features is None:
        raise ContractViolation(f"variant {variant} needs ψ features of the private data")

    n = data.n
    q = hyper.q
    denom = q * n
    if not denom > 0:
        raise ContractViolation("expected batch size qn must be positive")
    if private and spec.q != q:
        raise ContractViolation(f"spec sampling rate {spec.q} differs from hyper q {q}")
    if private:
        spec.check_delta(n)

    w = model.init_params(rng.derive(STREAM_INIT)) if w0 is None else np.array(w0, dtype=np.float64)
    priv_rng = rng.derive(STREAM_PRIVATE_BATCH)
    pub_rng = rng.derive(STREAM_PUBLIC_BATCH)
    noise_rng = rng.derive(STREAM_NOISE)

    projected = variant in _PROJECTED
    p = model.p_trainable
    k = None
    R = hyper.refresh or max(1, int(round(1.0 / q)))
    if projected:
        if hyper.k is None or hyper.k >= p:
            k = p
        else:
            if data.public_set is None:
                raise ContractViolation(f"variant {variant} needs a public set for the basis")
            k = clamp_k(hyper.k, len(data.public_set), p)

    accounted = private and spec.sigma > 0
    if private and not accounted:
        log.warning("sigma=0: clipping without noise gives no privacy guarantee")
    curve = accountant.rdp_curve(q, spec.sigma, spec.orders) if accounted else None
    result = TrainResult(w)
    basis = None
    for t in range(hyper.steps):
        if accounted:
            eps_next = accountant.compose_and_convert(curve, t + 1, spec.delta)
            if eps_next > spec.epsilon:
                log.warning("privacy budget reached after %d steps; halting", t)
                result.halted = True
                break
        if projected and refresh_policy(t, R):
            if k == p:
                basis = ProjectionBasis.identity(p, t)
            else:
                ps = data.public_set
                basis = estimate_basis(model, w, ps.inputs, ps.targets, k, t,
                                       public_features=ps.features,
                                       public_weight=hyper.public_weight)
            result.bases.append(basis)
        b_idx = poisson_sample(priv_rng, n, q)
        priv_batch = PrivateBatch(data.private.inputs[b_idx], data.private.targets[b_idx])
        pub_batch = None
        if variant in _USES_PUBLIC:
            pf = data.private_features
            p_idx = poisson_sample(pub_rng, n, q)
            pub_batch = PublicBatch(pf.features[p_idx], pf.targets[p_idx])
        w, rec = fp_dp_step(model, w, priv_batch, pub_batch, basis if projected else None,
                            spec, _lr(hyper, t), noise_rng, denom=denom, step=t,
                            refresh_interval=R, public_weight=hyper.public_weight,
                            private=private)
        result.history.append(rec)
    result.w = w
    if accounted and result.steps_run:
        result.accounted_epsilon = accountant.compose_and_convert(curve, result.steps_run, spec.delta)
    elif private and result.steps_run:
        result.accounted_epsilon = math.inf
    return result
