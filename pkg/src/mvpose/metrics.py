"""Pose evaluation metrics and inference-time scale recovery. All errors in mm."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import apply, weighted_similarity_align
from .errors import ZeroLimbs, ZeroPrediction
from .skeleton import SkeletonDef, limb_lengths

PCK_RADIUS_MM = 150.0


def recover_scale(normalized_pose: np.ndarray, skel: SkeletonDef) -> float:
    """Least-squares scale matching predicted limb lengths to the mean limb lengths."""
    lhat = limb_lengths(np.asarray(normalized_pose, dtype=float), skel)
    denom = float(np.sum(lhat * lhat))
    if denom < 1e-12:
        raise ZeroLimbs("predicted limbs have zero length")
    return float(np.sum(skel.limb_lengths_mm * lhat) / denom)


def _root_center(pose, root):
    pose = np.asarray(pose, dtype=float)
    return pose - pose[root]


def mpjpe(pred, gt, root: int = 0) -> float:
    p, g = _root_center(pred, root), _root_center(gt, root)
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def optimal_scale(pred, gt, root: int = 0) -> float:
    p, g = _root_center(pred, root), _root_center(gt, root)
    denom = float(np.sum(p * p))
    if denom < 1e-12:
        raise ZeroPrediction("root-centred prediction is zero")
    return float(np.sum(p * g) / denom)


def nmpjpe(pred, gt, root: int = 0) -> float:
    s = optimal_scale(pred, gt, root)
    return mpjpe(s * _root_center(pred, root), gt, root)


def pmpjpe(pred, gt) -> float:
    pred = np.asarray(pred, dtype=float)
    T = weighted_similarity_align(pred, gt, np.ones(len(pred)))
    return float(np.mean(np.linalg.norm(apply(T, pred) - np.asarray(gt), axis=-1)))


def default_pck_joints(skel: SkeletonDef) -> list[int]:
    return [j for j in range(skel.num_joints) if j != skel.root]


def pck(pred, gt, root: int = 0, radius_mm: float = PCK_RADIUS_MM, joints=None, normalized: bool = False) -> float:
    """Percentage of ``joints`` whose root-aligned error is below ``radius_mm``."""
    p, g = _root_center(pred, root), _root_center(gt, root)
    if normalized:
        p = optimal_scale(pred, gt, root) * p
    if joints is None:
        joints = [j for j in range(len(p)) if j != root]
    joints = list(joints)
    if not joints:
        raise ValueError("joint subset is empty")
    err = np.linalg.norm(p[joints] - g[joints], axis=-1)
    return float(100.0 * np.mean(err < radius_mm))


def npck(pred, gt, root: int = 0, radius_mm: float = PCK_RADIUS_MM, joints=None) -> float:
    return pck(pred, gt, root, radius_mm, joints, normalized=True)


@dataclass
class EvalReport:
    mpjpe_mm: float
    nmpjpe_mm: float
    pmpjpe_mm: float
    pck_percent: float
    npck_percent: float
    per_joint_mpjpe_mm: list = field(default_factory=list)
    sample_count: int = 0
    excluded_count: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    CSV_FIELDS = ("mpjpe_mm", "nmpjpe_mm", "pmpjpe_mm", "pck_percent", "npck_percent", "sample_count", "excluded_count")

    def csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        if header:
            w.writerow(self.CSV_FIELDS)
        w.writerow([getattr(self, k) for k in self.CSV_FIELDS])
        return buf.getvalue()


def evaluate_poses(preds, gts, skel: SkeletonDef, radius_mm: float = PCK_RADIUS_MM, joints=None,
                   excluded: int = 0) -> EvalReport:
    """Average every metric over pose pairs (metric-scale, camera frame)."""
    joints = default_pck_joints(skel) if joints is None else joints
    rows = []
    per_joint = []
    for p, g in zip(preds, gts):
        rows.append((
            mpjpe(p, g, skel.root), nmpjpe(p, g, skel.root), pmpjpe(p, g),
            pck(p, g, skel.root, radius_mm, joints), npck(p, g, skel.root, radius_mm, joints),
        ))
        per_joint.append(np.linalg.norm(_root_center(p, skel.root) - _root_center(g, skel.root), axis=-1))
    if not rows:
        nan = float("nan")
        return EvalReport(nan, nan, nan, nan, nan, [], 0, excluded)
    m = np.mean(np.asarray(rows), axis=0)
    return EvalReport(
        float(m[0]), float(m[1]), float(m[2]), float(m[3]), float(m[4]),
        np.mean(per_joint, axis=0).tolist(), len(rows), excluded,
    )
