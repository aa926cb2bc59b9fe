"""Confidence-weighted rigid and similarity alignment of 3D point sets (Procrustes)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, InsufficientSupport, ZeroSourceVariance

RANK_TOL = 1e-10

ALIGN_OK = 0
ALIGN_INSUFFICIENT = 1
ALIGN_DEGENERATE = 2


@dataclass
class RigidTransform:
    R: np.ndarray
    t: np.ndarray
    scale: float = 1.0

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform(Rt, -Rt @ self.t / self.scale, 1.0 / self.scale)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)


def apply(transform: RigidTransform, points: np.ndarray) -> np.ndarray:
    return transform.scale * np.asarray(points, dtype=float) @ transform.R.T + transform.t


def _weighted_moments(source, target, weights):
    w = weights / weights.sum(axis=-1, keepdims=True)
    mu_s = np.einsum("...j,...jk->...k", w, source)
    mu_t = np.einsum("...j,...jk->...k", w, target)
    xs = source - mu_s[..., None, :]
    xt = target - mu_t[..., None, :]
    # cross-covariance, maps source directions to target directions
    cov = np.einsum("...j,...ja,...jb->...ab", w, xt, xs)
    return w, mu_s, mu_t, xs, xt, cov


def _rotation_from_cov(cov):
    U, S, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(S.shape)
    D[..., -1] = d
    R = (U * D[..., None, :]) @ Vt
    return R, S, D


def batched_rigid_align(source: np.ndarray, target: np.ndarray, weights: np.ndarray):
    """Rigid alignment over leading batch dims without raising.

    Returns (R, t, status) where status uses the ALIGN_* codes; failed entries
    carry the identity transform.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    weights = np.clip(np.asarray(weights, dtype=float), 0.0, None)
    support = np.sum(weights > 0, axis=-1)
    status = np.where(support < 3, ALIGN_INSUFFICIENT, ALIGN_OK).astype(np.int8)
    safe_w = np.where((support < 3)[..., None], 1.0, weights)
    _, mu_s, mu_t, _, _, cov = _weighted_moments(source, target, safe_w)
    R, S, _ = _rotation_from_cov(cov)
    # collinear support leaves the rotation about the line undetermined
    degenerate = S[..., 1] <= RANK_TOL * np.maximum(S[..., 0], 1e-300)
    status = np.where((status == ALIGN_OK) & degenerate, ALIGN_DEGENERATE, status).astype(np.int8)
    failed = status != ALIGN_OK
    R = np.where(failed[..., None, None], np.eye(3), R)
    t = mu_t - np.einsum("...ab,...b->...a", R, mu_s)
    t = np.where(failed[..., None], 0.0, t)
    return R, t, status


def _check_support(weights):
    if np.sum(weights > 0) < 3:
        raise InsufficientSupport("need at least three points with positive weight")


def weighted_rigid_align(source, target, weights=None) -> RigidTransform:
    """Rotation and translation minimising sum_j w_j ||target_j - (R source_j + t)||^2."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    weights = np.ones(len(source)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    _check_support(weights)
    R, t, status = batched_rigid_align(source, target, weights)
    if status == ALIGN_DEGENERATE:
        raise DegenerateConfiguration("weighted point set is collinear")
    return RigidTransform(R, t, 1.0)


def weighted_similarity_align(source, target, weights=None) -> RigidTransform:
    """As :func:`weighted_rigid_align`, plus the optimal isotropic scale."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    weights = np.ones(len(source)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    _check_support(weights)
    w, mu_s, mu_t, xs, _, cov = _weighted_moments(source, target, weights)
    var_s = float(np.sum(w * np.sum(xs * xs, axis=-1)))
    if var_s < 1e-12:
        raise ZeroSourceVariance("weighted source variance vanishes")
    R, S, D = _rotation_from_cov(cov)
    if S[1] <= RANK_TOL * max(S[0], 1e-300):
        raise DegenerateConfiguration("weighted point set is collinear")
    scale = float(np.sum(S * D) / var_s)
    t = mu_t - scale * R @ mu_s
    return RigidTransform(R, t, scale)


def alignment_residual(transform: RigidTransform, source, target, weights=None) -> float:
    diff = np.asarray(target) - apply(transform, source)
    w = np.ones(len(diff)) if weights is None else np.asarray(weights, dtype=float)
    return float(np.sum(w * np.sum(diff * diff, axis=-1)))
