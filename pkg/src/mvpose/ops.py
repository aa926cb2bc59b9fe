"""Differentiable primitives of the 2.5D pipeline, recorded on a GradientTape.

All ops accept arbitrary leading batch dimensions. Joint axis is -2 for
coordinates (..., J, 2|3) and -1 for per-joint scalars (..., J).
"""

from __future__ import annotations

import numpy as np

from .heatmap import Grid, spatial_softmax
from .skeleton import DEGENERATE_RAY_TOL, DISCRIMINANT_TOL, ROOT_NO_REAL, ROOT_OK, root_depth_quadratic, select_root
from .tape import GradientTape, Var

L1_DEADZONE = 1e-10


def softmax2d(tape: GradientTape, logits: Var, temperature: float) -> Var:
    p = spatial_softmax(logits.value, temperature)

    def vjp(g):
        inner = np.sum(g * p, axis=(-2, -1), keepdims=True)
        return (temperature * p * (g - inner),)

    return tape.record("softmax", (logits,), p, vjp)


def soft_argmax(tape: GradientTape, probs: Var, grid: Grid) -> Var:
    gu, gv = grid.grid_u, grid.grid_v
    p = probs.value
    uv = np.stack([np.sum(p * gu[None, :], axis=(-2, -1)), np.sum(p * gv[:, None], axis=(-2, -1))], axis=-1)

    def vjp(g):
        return (g[..., 0, None, None] * gu[None, :] + g[..., 1, None, None] * gv[:, None],)

    return tape.record("soft_argmax", (probs,), uv, vjp)


def depth_readout(tape: GradientTape, probs: Var, depth_maps: Var) -> Var:
    p, hz = probs.value, depth_maps.value
    z = np.sum(p * hz, axis=(-2, -1))

    def vjp(g):
        g = g[..., None, None]
        return g * hz, g * p

    return tape.record("depth_readout", (probs, depth_maps), z, vjp)


def recenter(tape: GradientTape, zr: Var, root: int) -> Var:
    out = zr.value - zr.value[..., root:root + 1]

    def vjp(g):
        gz = g.copy()
        gz[..., root] -= np.sum(g, axis=-1)
        return (gz,)

    return tape.record("recenter", (zr,), out, vjp)


def backproject(tape: GradientTape, uv: Var, Kinv: np.ndarray) -> Var:
    """Rays Kinv @ (u, v, 1) for uv (..., J, 2) and Kinv (..., 3, 3)."""
    h = np.concatenate([uv.value, np.ones(uv.value.shape[:-1] + (1,))], axis=-1)
    rays = h @ np.swapaxes(Kinv, -1, -2)

    def vjp(g):
        return ((g @ Kinv)[..., :2],)

    return tape.record("backproject", (uv,), rays, vjp)


ROOT_RELAXED = 4  # infeasible scale constraint replaced by its tangency depth


def root_depth(tape: GradientTape, rays: Var, zr: Var, k: int, l: int, frozen_status=None, relax: bool = False):
    """Differentiable root-depth solve. Returns (z_root Var, status array).

    Views whose solve fails get z_root = 1 and no gradient. Partial
    derivatives come from implicit differentiation of A z^2 + 2 B z + C = 0.
    With ``relax``, views whose discriminant is below the tangency tolerance
    (including those without a real root) use the vertex z = -B/A, i.e. the
    discriminant clamped to zero, and keep a finite gradient; they are
    flagged ROOT_RELAXED.
    """
    a, zv = rays.value, zr.value
    A, B, C, b, c = root_depth_quadratic(a, zv, k, l)
    z, status = select_root(A, B, C)
    if relax:
        with np.errstate(divide="ignore", invalid="ignore"):
            zvert = -B / A
        tangent = (A >= DEGENERATE_RAY_TOL) & (B * B - A * C < DISCRIMINANT_TOL) & (zvert > 0)
        status = np.where(tangent & ((status == ROOT_NO_REAL) | (status == ROOT_OK)), ROOT_RELAXED, status)
    if frozen_status is not None:
        status = np.where(frozen_status != ROOT_OK, frozen_status, status)
    ok = status == ROOT_OK
    rel = status == ROOT_RELAXED
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ok, z, np.where(rel, -B / A, 1.0))

    def vjp(g):
        den = 2.0 * (A * z + B)
        with np.errstate(divide="ignore", invalid="ignore"):
            gA = np.where(ok, -g * z * z / den, np.where(rel, g * B / (A * A), 0.0))
            gB = np.where(ok, -g * 2.0 * z / den, np.where(rel, -g / A, 0.0))
            gC = np.where(ok, -g / den, 0.0)
        gb = 2.0 * gA[..., None] * b + gB[..., None] * c
        gc = gB[..., None] * b + 2.0 * gC[..., None] * c
        ga = np.zeros_like(a)
        ga[..., k, :] += gb + zv[..., k, None] * gc
        ga[..., l, :] += -gb - zv[..., l, None] * gc
        gz = np.zeros_like(zv)
        gz[..., k] += np.sum(gc * a[..., k, :], axis=-1)
        gz[..., l] -= np.sum(gc * a[..., l, :], axis=-1)
        return ga, gz

    return tape.record("root_depth", (rays, zr), z, vjp), status


def scale_rays(tape: GradientTape, rays: Var, zr: Var, z_root: Var) -> Var:
    depth = z_root.value[..., None] + zr.value
    P = depth[..., None] * rays.value

    def vjp(g):
        gd = np.sum(g * rays.value, axis=-1)
        return g * depth[..., None], gd, np.sum(gd, axis=-1)

    return tape.record("reconstruct", (rays, zr, z_root), P, vjp)


def pair_residuals(tape: GradientTape, P: Var, first, second, R: np.ndarray, t: np.ndarray) -> Var:
    """r[n, q, j] = P[n, first[q], j] - (R[n, q] @ P[n, second[q], j] + t[n, q]).

    P: (N, C, J, 3); R: (N, Q, 3, 3); t: (N, Q, 3). R and t are constants.
    """
    first = np.asarray(first, dtype=int)
    second = np.asarray(second, dtype=int)
    pa = P.value[:, first]
    pb = P.value[:, second]
    r = pa - (np.einsum("nqab,nqjb->nqja", R, pb) + t[:, :, None, :])

    def vjp(g):
        gP = np.zeros_like(P.value)
        np.add.at(gP, (slice(None), first), g)
        np.add.at(gP, (slice(None), second), -np.einsum("nqja,nqab->nqjb", g, R))
        return (gP,)

    return tape.record("pair_residuals", (P,), r, vjp)


def reverse_residuals(tape: GradientTape, r: Var, R: np.ndarray) -> Var:
    """Residuals of the reversed pair in the second view's frame: -R^T r (the inverse rigid map)."""
    rr = -np.einsum("nqba,nqjb->nqja", R, r.value)

    def vjp(g):
        return (-np.einsum("nqab,nqjb->nqja", R, g),)

    return tape.record("reverse_residuals", (r,), rr, vjp)


def weighted_l1(tape: GradientTape, r: Var, w: np.ndarray, deadzone: float = L1_DEADZONE) -> Var:
    """sum w * |r|_1 with w broadcasting over the last axis. Subgradient 0 inside the deadzone."""
    val = float(np.sum(w[..., None] * np.abs(r.value)))
    s = np.where(np.abs(r.value) <= deadzone, 0.0, np.sign(r.value))

    def vjp(g):
        return (g * w[..., None] * s,)

    return tape.record("weighted_l1", (r,), np.asarray(val), vjp)


def limb_lengths(tape: GradientTape, P: Var, edges: np.ndarray) -> Var:
    parent, child = edges[:, 0], edges[:, 1]
    d = P.value[..., child, :] - P.value[..., parent, :]
    length = np.linalg.norm(d, axis=-1)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gd = np.where(length[..., None] > 0, g[..., None] * d / length[..., None], 0.0)
        gP = np.zeros_like(P.value)
        np.add.at(gP, (Ellipsis, child, slice(None)), gd)
        np.add.at(gP, (Ellipsis, parent, slice(None)), -gd)
        return (gP,)

    return tape.record("limb_lengths", (P,), length, vjp)


def weighted_sq(tape: GradientTape, x: Var, target, w) -> Var:
    """sum w * (x - target)^2 with numpy broadcasting for ``target`` and ``w``."""
    diff = x.value - target
    w = np.broadcast_to(w, diff.shape)
    val = float(np.sum(w * diff * diff))

    def vjp(g):
        return (2.0 * g * w * diff,)

    return tape.record("weighted_sq", (x,), np.asarray(val), vjp)


def lincomb(tape: GradientTape, terms) -> Var:
    """Scalar sum of coef * var over ``terms`` = [(coef, Var), ...]."""
    terms = [(float(c), v) for c, v in terms]
    val = float(sum(c * float(v.value) for c, v in terms))
    coefs = [c for c, _ in terms]

    def vjp(g):
        return tuple(c * g for c in coefs)

    return tape.record("sum", tuple(v for _, v in terms), np.asarray(val), vjp)
