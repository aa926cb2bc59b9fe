"""Loss terms, their composition and exact gradients.

The batched forward pass records every primitive on a GradientTape. The
per-pair alignment transforms and the confidences are computed from the
current values and then enter the tape as constants; a ``Frozen`` record
of them lets callers re-evaluate the objective with the constants held
fixed (which is what finite-difference checks must compare against).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import ops
from .alignment import ALIGN_OK, batched_rigid_align
from .errors import ValidationError
from .heatmap import DEFAULT_SIGMA_CELLS, DEFAULT_TEMPERATURE, Grid, HeatmapStack, confidences_at, render_gaussians
from .skeleton import ROOT_OK, SkeletonDef
from .synth import PSEUDO_GT_TAU, MultiViewSample, pseudo_gt_filter
from .tape import GradientTape


@dataclass(frozen=True)
class LossWeights:
    psi: float = 5.0
    alpha: float = 10.0
    beta: float = 100.0

    def __post_init__(self):
        if min(self.psi, self.alpha, self.beta) < 0:
            raise ValidationError("loss weights must be nonnegative")

    def ws(self, l_h: float, l_mc: float, l_b: float) -> float:
        return l_h + self.alpha * l_mc + self.beta * l_b

    def fs(self, l_h: float, l_z: float) -> float:
        return l_h + self.psi * l_z


# ---------------------------------------------------------------------------
# single-pose / single-sample loss terms


def heatmap_loss(pred: HeatmapStack, gt_centers, mask=None, sigma_cells: float = DEFAULT_SIGMA_CELLS) -> float:
    """MSE between raw 2D heatmaps and unit-peak Gaussians, over visible joints and cells."""
    J = pred.num_joints
    mask = np.ones(J, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        return 0.0
    target = render_gaussians(np.asarray(gt_centers, float), sigma_cells * pred.grid.stride, pred.grid)
    diff = pred.h2d[mask] - target[mask]
    return float(np.mean(diff * diff))


def depth_loss(pred_zr, gt_zr, mask=None) -> float:
    pred_zr = np.asarray(pred_zr, float)
    mask = np.ones(pred_zr.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        return 0.0
    d = pred_zr[mask] - np.asarray(gt_zr, float)[mask]
    return float(np.mean(d * d))


def limb_length_loss(pose, phi, skel: SkeletonDef) -> float:
    """sum over edges of phi_j phi_j' (||p_j - p_j'|| - mean normalized length)^2."""
    pose = np.asarray(pose, float)
    phi = np.asarray(phi, float)
    e = skel.edge_array
    lengths = np.linalg.norm(pose[e[:, 1]] - pose[e[:, 0]], axis=-1)
    w = phi[e[:, 0]] * phi[e[:, 1]]
    return float(np.sum(w * (lengths - skel.normalized_limb_lengths) ** 2))


@dataclass
class ConsistencyDiagnostics:
    pairs: int = 0
    skipped_pairs: int = 0
    single_view: bool = False


def multiview_consistency_loss(poses, phi, return_diagnostics: bool = False):
    """Sum over unordered view pairs of confidence-weighted L1 distances after rigid alignment.

    ``poses`` (C, J, 3) normalized camera-frame reconstructions, ``phi`` (C, J).
    Each pair is counted once as the mean of its two ordered terms (c onto c' and
    c' onto c), i.e. exactly half of the ordered-pair sum.
    """
    poses = np.asarray(poses, float)
    phi = np.asarray(phi, float)
    C = poses.shape[0]
    diag = ConsistencyDiagnostics()
    if C < 2:
        diag.single_view = True
        warnings.warn("multi-view consistency needs at least two views; loss is 0", RuntimeWarning)
        return (0.0, diag) if return_diagnostics else 0.0
    total = 0.0
    for c, c2 in combinations(range(C), 2):
        diag.pairs += 1
        w = phi[c] * phi[c2]
        R, t, status = batched_rigid_align(poses[c2], poses[c], w)
        if status != ALIGN_OK:
            diag.skipped_pairs += 1
            continue
        r = poses[c] - (poses[c2] @ R.T + t)
        rr = -r @ R  # same residual seen from view c2 under the inverse map
        total += 0.5 * float(np.sum(w[:, None] * (np.abs(r) + np.abs(rr))))
    return (total, diag) if return_diagnostics else total


# ---------------------------------------------------------------------------
# batched objective over multi-view samples


@dataclass
class ViewBatch:
    """Constants for N multi-view samples padded to C views of J joints."""

    Kinv: np.ndarray
    view_valid: np.ndarray
    anchor_uv: np.ndarray
    anchor_mask: np.ndarray
    confidence: np.ndarray
    gt_zr: np.ndarray | None = None
    gt_rotations: np.ndarray | None = None
    sample_ids: list = field(default_factory=list)

    @property
    def shape(self):
        return self.anchor_mask.shape

    def subset(self, idx) -> "ViewBatch":
        pick = lambda a: None if a is None else a[idx]
        return ViewBatch(
            self.Kinv[idx], self.view_valid[idx], self.anchor_uv[idx], self.anchor_mask[idx],
            self.confidence[idx], pick(self.gt_zr), pick(self.gt_rotations),
            [self.sample_ids[i] for i in np.atleast_1d(idx)] if self.sample_ids else [],
        )

    @classmethod
    def from_samples(cls, samples: list[MultiViewSample], skel: SkeletonDef, tau: float = PSEUDO_GT_TAU,
                     max_views: int | None = None) -> "ViewBatch":
        """Stack samples; 2D anchors are the pseudo ground truths of each view's observations."""
        if not samples:
            raise ValidationError("empty dataset")
        J = skel.num_joints
        C = max(s.num_views for s in samples)
        if max_views is not None:
            C = min(C, max_views)
        N = len(samples)
        Kinv = np.tile(np.eye(3), (N, C, 1, 1))
        valid = np.zeros((N, C), bool)
        anchor_uv = np.zeros((N, C, J, 2))
        anchor_mask = np.zeros((N, C, J))
        conf = np.zeros((N, C, J))
        gt_zr = np.zeros((N, C, J))
        rots = np.tile(np.eye(3), (N, C, 1, 1))
        for n, s in enumerate(samples):
            for c, v in enumerate(s.views[:C]):
                Kinv[n, c] = v.intrinsics.inverse
                valid[n, c] = True
                anchor_uv[n, c] = v.observed_uv
                filt = pseudo_gt_filter(v.effective_confidence, skel, tau)
                anchor_mask[n, c] = filt.keep
                conf[n, c] = v.confidence
                gt_zr[n, c] = v.gt_zr
                rots[n, c] = v.R
        return cls(Kinv, valid, anchor_uv, anchor_mask, conf, gt_zr, rots, [s.sample_id for s in samples])


@dataclass
class ObjectiveConfig:
    mode: str = "direct25d"
    weights: LossWeights = field(default_factory=LossWeights)
    supervised: bool = False
    temperature: float = DEFAULT_TEMPERATURE
    grid: Grid | None = None
    sigma_cells: float = DEFAULT_SIGMA_CELLS
    anchor_scale_px: float = 4.0
    use_gt_rotation: bool = False
    heatmap_weight: float = 1.0
    l1_deadzone: float = ops.L1_DEADZONE
    # keep infeasible views in the objective at their tangency depth instead of dropping them
    relax_roots: bool = True

    def __post_init__(self):
        if self.mode not in ("direct25d", "heatmap_logits"):
            raise ValidationError(f"unknown parameter mode {self.mode!r}")
        if self.mode == "heatmap_logits" and self.grid is None:
            raise ValidationError("heatmap_logits mode needs a grid")


@dataclass
class Frozen:
    """Quantities treated as constants by the gradient."""

    phi: np.ndarray
    root_status: np.ndarray
    R: np.ndarray
    t: np.ndarray
    pair_ok: np.ndarray


@dataclass
class Evaluation:
    total: object
    components: dict
    tape: GradientTape
    leaves: dict
    frozen: Frozen
    diagnostics: dict
    l1_signs: np.ndarray
    uv: np.ndarray
    zr: np.ndarray
    poses: np.ndarray
    per_sample: dict = field(default_factory=dict)

    def sample_totals(self) -> np.ndarray:
        """Weighted objective split per sample, each term normalized as in the batch total."""
        return sum(self.per_sample.values())

    @property
    def value(self) -> float:
        return float(self.total.value)

    def gradient(self) -> dict:
        names = list(self.leaves)
        grads = self.tape.gradient(self.total, [self.leaves[k] for k in names])
        return dict(zip(names, grads))


def _pairs(C):
    pairs = list(combinations(range(C), 2))
    first = np.array([p[0] for p in pairs], dtype=int)
    second = np.array([p[1] for p in pairs], dtype=int)
    return first, second


def forward(params: dict, batch: ViewBatch, cfg: ObjectiveConfig, skel: SkeletonDef,
            frozen: Frozen | None = None) -> Evaluation:
    """Evaluate L_WS (or L_FS when ``cfg.supervised``) over the batch, recording the tape."""
    tape = GradientTape()
    k, l = skel.scale_pair
    root = skel.root
    N, C, J = batch.shape
    leaves = {}
    if cfg.mode == "direct25d":
        uv = leaves["uv"] = tape.watch(params["uv"], "uv")
        zr_raw = leaves["zr"] = tape.watch(params["zr"], "zr")
        zr = ops.recenter(tape, zr_raw, root)
        h2d = None
    else:
        h2d = leaves["h2d"] = tape.watch(params["h2d"], "h2d")
        hz = leaves["hz"] = tape.watch(params["hz"], "hz")
        probs = ops.softmax2d(tape, h2d, cfg.temperature)
        uv = ops.soft_argmax(tape, probs, cfg.grid)
        zr = ops.recenter(tape, ops.depth_readout(tape, probs, hz), root)

    if frozen is not None:
        phi = frozen.phi
    elif cfg.mode == "direct25d":
        phi = batch.confidence * batch.view_valid[..., None]
    else:
        phi = confidences_at(h2d.value, uv.value, cfg.grid) * batch.view_valid[..., None]

    rays = ops.backproject(tape, uv, batch.Kinv)
    z_root, status = ops.root_depth(tape, rays, zr, k, l, None if frozen is None else frozen.root_status,
                                   relax=cfg.relax_roots)
    P = ops.scale_rays(tape, rays, zr, z_root)
    valid = batch.view_valid & ((status == ROOT_OK) | (status == ops.ROOT_RELAXED))
    diagnostics = {
        "failed_views": int(np.sum(batch.view_valid & (status != ROOT_OK))),
        "relaxed_views": int(np.sum(batch.view_valid & (status == ops.ROOT_RELAXED))),
        "skipped_pairs": 0,
        "pairs": 0,
        "single_view": False,
        "all_pairs_failed": False,
    }
    terms = []
    components = {}
    per_sample = {}
    w = cfg.weights

    # 2D term: heatmap MSE on anchored joints, or a confidence-weighted anchor in direct mode
    mask = batch.anchor_mask * batch.view_valid[..., None]
    n_anchor = float(mask.sum())
    if n_anchor > 0:
        if cfg.mode == "heatmap_logits":
            target = render_gaussians(batch.anchor_uv, cfg.sigma_cells * cfg.grid.stride, cfg.grid)
            H, W = cfg.grid.shape
            l_h = ops.weighted_sq(tape, h2d, target, mask[..., None, None])
            coef = 1.0 / (n_anchor * H * W)
        else:
            wa = (mask * batch.confidence)[..., None] / cfg.anchor_scale_px ** 2
            l_h = ops.weighted_sq(tape, uv, batch.anchor_uv, wa)
            coef = 1.0 / n_anchor
        terms.append((cfg.heatmap_weight * coef, l_h))
        components["L_H"] = coef * float(l_h.value)
        if cfg.mode == "heatmap_logits":
            per_sample["L_H"] = cfg.heatmap_weight * coef * np.sum(
                mask[..., None, None] * (h2d.value - target) ** 2, axis=(1, 2, 3, 4))
        else:
            per_sample["L_H"] = cfg.heatmap_weight * coef * np.sum(wa * (uv.value - batch.anchor_uv) ** 2, axis=(1, 2, 3))
    else:
        components["L_H"] = 0.0

    Q = C * (C - 1) // 2
    l1_signs = np.zeros(0)
    if cfg.supervised:
        zmask = valid[..., None] * np.ones(J)
        zmask[..., root] = 0.0
        cnt = float(zmask.sum())
        if cnt > 0:
            l_z = ops.weighted_sq(tape, zr, batch.gt_zr, zmask)
            terms.append((w.psi / cnt, l_z))
            components["L_z"] = float(l_z.value) / cnt
            per_sample["L_z"] = w.psi / cnt * np.sum(zmask * (zr.value - batch.gt_zr) ** 2, axis=(1, 2))
        else:
            components["L_z"] = 0.0
        R = np.zeros((N, 0, 3, 3))
        t = np.zeros((N, 0, 3))
        pair_ok = np.zeros((N, 0), bool)
    else:
        if Q == 0:
            diagnostics["single_view"] = True
            R = np.zeros((N, 0, 3, 3))
            t = np.zeros((N, 0, 3))
            pair_ok = np.zeros((N, 0), bool)
            components["L_MC"] = 0.0
        else:
            first, second = _pairs(C)
            wp = phi[:, first] * phi[:, second]
            if frozen is not None:
                R, t, pair_ok = frozen.R, frozen.t, frozen.pair_ok
            else:
                src = P.value[:, second]
                tgt = P.value[:, first]
                if cfg.use_gt_rotation:
                    R = batch.gt_rotations[:, first] @ np.swapaxes(batch.gt_rotations[:, second], -1, -2)
                    ws = wp.sum(-1, keepdims=True)
                    wn = np.divide(wp, ws, out=np.zeros_like(wp), where=ws > 0)
                    mu_s = np.einsum("nqj,nqja->nqa", wn, src)
                    mu_t = np.einsum("nqj,nqja->nqa", wn, tgt)
                    t = mu_t - np.einsum("nqab,nqb->nqa", R, mu_s)
                    status_a = np.where(np.sum(wp > 0, -1) >= 1, ALIGN_OK, 1)
                else:
                    R, t, status_a = batched_rigid_align(src, tgt, wp)
                both = batch.view_valid[:, first] & batch.view_valid[:, second]
                pair_ok = both & valid[:, first] & valid[:, second] & (status_a == ALIGN_OK)
                diagnostics["pairs"] = int(both.sum())
                diagnostics["skipped_pairs"] = int((both & ~pair_ok).sum())
                diagnostics["all_pairs_failed"] = bool(both.any() and not pair_ok.any())
            wq = wp * pair_ok[..., None]
            cnt = float(pair_ok.sum()) * J
            # L1 is frame dependent, so each unordered pair averages the residual measured in
            # both views' frames; the ordered-pair sum is then exactly twice this one
            r = ops.pair_residuals(tape, P, first, second, R, t)
            rr = ops.reverse_residuals(tape, r, R)
            both_r = np.concatenate([r.value, rr.value], axis=-1)
            s = np.where(np.abs(both_r) <= cfg.l1_deadzone, 0.0, np.sign(both_r))
            l1_signs = s * (wq[..., None] > 0)
            if cnt > 0:
                l_mc = ops.lincomb(tape, [(0.5, ops.weighted_l1(tape, r, wq, cfg.l1_deadzone)),
                                          (0.5, ops.weighted_l1(tape, rr, wq, cfg.l1_deadzone))])
                components["L_MC"] = float(l_mc.value) / cnt
                per_sample["L_MC"] = 0.5 * w.alpha / cnt * np.sum(wq[..., None] * np.abs(both_r), axis=(1, 2, 3))
                if w.alpha > 0:
                    terms.append((w.alpha / cnt, l_mc))
            else:
                components["L_MC"] = 0.0

        e = skel.edge_array
        lengths = ops.limb_lengths(tape, P, e)
        wb = phi[..., e[:, 0]] * phi[..., e[:, 1]] * valid[..., None]
        cnt_b = float(valid.sum()) * len(e)
        if cnt_b > 0:
            l_b = ops.weighted_sq(tape, lengths, skel.normalized_limb_lengths, wb)
            components["L_B"] = float(l_b.value) / cnt_b
            per_sample["L_B"] = w.beta / cnt_b * np.sum(
                wb * (lengths.value - skel.normalized_limb_lengths) ** 2, axis=(1, 2))
            if w.beta > 0:
                terms.append((w.beta / cnt_b, l_b))
        else:
            components["L_B"] = 0.0

    if not terms:
        total = tape.record("zero", (), np.asarray(0.0), lambda g: ())
    else:
        total = ops.lincomb(tape, terms)
    components["total"] = float(total.value)
    if diagnostics["single_view"] and frozen is None:
        warnings.warn("batch has single-view samples only; L_MC is 0", RuntimeWarning)
    frozen_out = frozen or Frozen(phi, status, R, t, pair_ok)
    if not per_sample:
        per_sample["zero"] = np.zeros(N)
    return Evaluation(total, components, tape, leaves, frozen_out, diagnostics, l1_signs,
                      uv.value, zr.value, P.value, per_sample)


def ws_objective(params: dict, batch: ViewBatch, cfg: ObjectiveConfig, skel: SkeletonDef, frozen=None) -> Evaluation:
    if cfg.supervised:
        cfg = ObjectiveConfig(**{**cfg.__dict__, "supervised": False})
    return forward(params, batch, cfg, skel, frozen)


def fs_objective(params: dict, batch: ViewBatch, cfg: ObjectiveConfig, skel: SkeletonDef, frozen=None) -> Evaluation:
    if not cfg.supervised:
        cfg = ObjectiveConfig(**{**cfg.__dict__, "supervised": True})
    return forward(params, batch, cfg, skel, frozen)


def diagnostics_record(ev: Evaluation, grads: dict | None = None) -> str:
    """One JSON line with component values, skipped pairs and gradient norms."""
    rec = {"components": ev.components, **ev.diagnostics}
    if grads is not None:
        rec["grad_norms"] = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
    return json.dumps(rec)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    excluded: np.ndarray
    tolerance: float

    @property
    def passed(self) -> np.ndarray:
        return self.excluded | (self.rel_error <= self.tolerance)

    @property
    def ok(self) -> bool:
        return bool(np.all(self.passed))

    @property
    def max_rel_error(self) -> float:
        live = self.rel_error[~self.excluded]
        return float(live.max()) if live.size else 0.0


def grad_check(value_fn, grad, x, step: float = 1e-5, tolerance: float = 1e-5, indices=None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare an analytic gradient against central differences of ``value_fn``.

    Relative error is |a - n| / max(|a|, |n|, floor, noise / tolerance) where
    noise = 100 eps max(1, |f(x)|) / step bounds the roundoff of the central
    difference itself (f sums thousands of rounded terms). ``value_fn`` may return
    ``(value, signs)`` where ``signs`` is the sign pattern of every L1 residual;
    coordinates whose perturbation changes that pattern straddle a kink and
    are excluded from the verdict.
    """
    def call(v):
        out = value_fn(v)
        return out if isinstance(out, tuple) else (out, None)

    x = np.asarray(x, float).ravel()
    grad = np.asarray(grad, float).ravel()
    idx = np.arange(x.size) if indices is None else np.asarray(indices, int)
    f0, base_signs = call(x)
    num = np.zeros(len(idx))
    excluded = np.zeros(len(idx), bool)
    for n, i in enumerate(idx):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        fp, sp = call(xp)
        fm, sm = call(xm)
        num[n] = (fp - fm) / (2.0 * step)
        if base_signs is not None:
            excluded[n] = not (np.array_equal(sp, base_signs) and np.array_equal(sm, base_signs))
    a = grad[idx]
    noise = 100.0 * np.finfo(float).eps * max(1.0, abs(float(f0))) / step
    denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), max(floor, noise / tolerance))
    rel = np.abs(a - num) / denom
    return GradCheckReport(idx, a, num, rel, excluded, tolerance)


def check_objective_gradient(params: dict, batch: ViewBatch, cfg: ObjectiveConfig, skel: SkeletonDef,
                             step: float = 1e-5, tolerance: float = 1e-5, indices=None,
                             floor: float = 1e-6) -> GradCheckReport:
    """Finite-difference check of :func:`forward` with R, t, phi and root branches frozen."""
    ev = forward(params, batch, cfg, skel)
    grads = ev.gradient()
    names = list(ev.leaves)
    shapes = [np.shape(params[k]) for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.concatenate([np.asarray(params[k], float).ravel() for k in names])
    gflat = np.concatenate([grads[k].ravel() for k in names])
    frozen = ev.frozen

    def unflatten(v):
        out, o = {}, 0
        for k, s, n in zip(names, shapes, sizes):
            out[k] = v[o:o + n].reshape(s)
            o += n
        return out

    def value_fn(v):
        e = forward(unflatten(v), batch, cfg, skel, frozen)
        return e.value, e.l1_signs

    return grad_check(value_fn, gflat, flat, step, tolerance, indices, floor)
