"""Differentially private training with public-subspace projection and
feature-level privacy, plus a desk-scale keypoint benchmark."""

from .accountant import PrivacySpec, calibrate_sigma, compose_and_convert, rdp_subsampled_gaussian
from .numerics import RngStream, gaussian_vector, gram_topk, sym_eig_topk
from .optimizer import (DPSGD, FDP, FEATURE_PROJECTIVE, PROJ_DPSGD, SGD, VARIANTS, Hyper,
                        clip_gradient, fp_dp_step, noisy_aggregate, train)
from .subspace import ProjectionBasis, estimate_basis, project, refresh_policy

__version__ = "0.1.0"

__all__ = [
    "PrivacySpec", "calibrate_sigma", "compose_and_convert", "rdp_subsampled_gaussian",
    "RngStream", "gaussian_vector", "gram_topk", "sym_eig_topk",
    "DPSGD", "FDP", "FEATURE_PROJECTIVE", "PROJ_DPSGD", "SGD", "VARIANTS", "Hyper",
    "clip_gradient", "fp_dp_step", "noisy_aggregate", "train",
    "ProjectionBasis", "estimate_basis", "project", "refresh_policy",
]
