"""Synthetic multi-view scenes with held-out ground truth.

World frame: x right, y forward, z up, millimeters. Camera extrinsics map
world points into the camera frame as p_cam = R @ p_world + t.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import PoseOutOfView, ValidationError
from .skeleton import (
    CameraIntrinsics,
    SkeletonDef,
    default_skeleton,
    project,
    relative_depths,
    scale_normalize,
)

IMAGE_SIZE = 256
# focal length of a commodity 1000 px camera, rescaled to the crop size
REFERENCE_FOCAL = 1146.0
REFERENCE_WIDTH = 1000.0
PSEUDO_GT_TAU = 0.5


def _rot(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# rest direction (body frame: x subject's left, y forward, z up) and
# per-bone angle ranges in degrees: (flexion about x, abduction about y, twist about z)
_BONE_RULES = {
    "r_hip": ((-1, 0, 0), (0, 0), (-10, 10), (0, 0)),
    "l_hip": ((1, 0, 0), (0, 0), (-10, 10), (0, 0)),
    "r_knee": ((0, 0, -1), (-25, 95), (-35, 10), (-20, 20)),
    "l_knee": ((0, 0, -1), (-25, 95), (-10, 35), (-20, 20)),
    "r_ankle": ((0, 0, -1), (-120, 0), (0, 0), (0, 0)),
    "l_ankle": ((0, 0, -1), (-120, 0), (0, 0), (0, 0)),
    "neck": ((0, 0, 1), (-20, 35), (-20, 20), (-40, 40)),
    "head": ((0, 0.25, 1), (-30, 30), (-25, 25), (0, 0)),
    "l_shoulder": ((1, 0, 0), (-15, 15), (-15, 15), (-15, 15)),
    "r_shoulder": ((-1, 0, 0), (-15, 15), (-15, 15), (-15, 15)),
    "l_elbow": ((0, 0, -1), (-60, 150), (-10, 120), (-30, 30)),
    "r_elbow": ((0, 0, -1), (-60, 150), (-120, 10), (-30, 30)),
    "l_wrist": ((0, 0, -1), (0, 140), (0, 0), (0, 0)),
    "r_wrist": ((0, 0, -1), (0, 140), (0, 0), (0, 0)),
}


def sample_pose(skel: SkeletonDef, rng: np.random.Generator, origin=(0.0, 0.0, 1000.0)) -> np.ndarray:
    """Random world-frame pose (J, 3) in mm with limb lengths exactly the skeleton means.

    Bones are placed top-down along the tree; each bone direction is its rest
    direction rotated by angles drawn within per-bone ranges, composed with
    its parent's accumulated rotation. Unknown joint names fall back to a
    random direction within 30 degrees of straight down.
    """
    J = skel.num_joints
    children: dict[int, list[tuple[int, int]]] = {}
    for e, (a, b) in enumerate(skel.edges):
        children.setdefault(a, []).append((b, e))
        children.setdefault(b, []).append((a, e))
    lengths = skel.limb_lengths_mm
    pos = np.zeros((J, 3))
    frame = np.zeros((J, 3, 3))
    root = skel.root
    pos[root] = np.asarray(origin, dtype=float) + rng.uniform(-150, 150, size=3) * np.array([1, 1, 0])
    frame[root] = _rot("z", rng.uniform(0, 2 * np.pi))
    stack = [root]
    seen = {root}
    while stack:
        j = stack.pop()
        for child, e in children.get(j, []):
            if child in seen:
                continue
            seen.add(child)
            rule = _BONE_RULES.get(skel.joints[child])
            if rule is None:
                rest = np.array([0.0, 0.0, -1.0])
                rng_f, rng_a, rng_t = (-30, 30), (-30, 30), (0, 0)
            else:
                rest = np.asarray(rule[0], dtype=float)
                rng_f, rng_a, rng_t = rule[1:]
            ang = np.deg2rad([rng.uniform(*rng_f), rng.uniform(*rng_a), rng.uniform(*rng_t)])
            local = _rot("z", ang[2]) @ _rot("y", ang[1]) @ _rot("x", ang[0])
            frame[child] = frame[j] @ local
            d = frame[child] @ (rest / np.linalg.norm(rest))
            pos[child] = pos[j] + lengths[e] * d
            stack.append(child)
    return pos


@dataclass
class Camera:
    intrinsics: CameraIntrinsics
    R: np.ndarray
    t: np.ndarray

    def to_camera(self, world: np.ndarray) -> np.ndarray:
        return world @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


def default_intrinsics(image_size: int = IMAGE_SIZE) -> CameraIntrinsics:
    f = REFERENCE_FOCAL * image_size / REFERENCE_WIDTH
    return CameraIntrinsics.from_params(f, f, image_size / 2.0, image_size / 2.0)


def look_at(center: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target`` with world z up."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def make_rig(
    num_views: int,
    rng: np.random.Generator,
    radius=(2500.0, 4000.0),
    height: float = 1300.0,
    height_jitter: float = 150.0,
    target=(0.0, 0.0, 1000.0),
    image_size: int = IMAGE_SIZE,
    tracklet: bool = False,
) -> list[Camera]:
    """Cameras on a circle around ``target``, all looking at it.

    ``radius`` is a distance in mm or a (low, high) range sampled per camera.
    With ``tracklet`` the cameras sweep a 90 degree arc at a fixed distance
    and height, like one hand-held camera panning around a static person.
    """
    if num_views < 1:
        raise ValidationError("need at least one view")
    target = np.asarray(target, dtype=float)
    K = default_intrinsics(image_size)
    lo, hi = (radius, radius) if np.isscalar(radius) else radius
    start = rng.uniform(0, 2 * np.pi)
    if tracklet:
        r = rng.uniform(lo, hi)
        h = height + rng.uniform(-height_jitter, height_jitter)
        angles = start + np.linspace(0.0, np.pi / 2, num_views)
        dists = np.full(num_views, r)
        heights = np.full(num_views, h)
    else:
        angles = start + 2 * np.pi * np.arange(num_views) / num_views
        angles = angles + rng.uniform(-np.pi / 12, np.pi / 12, size=num_views)
        dists = rng.uniform(lo, hi, size=num_views)
        heights = height + rng.uniform(-height_jitter, height_jitter, size=num_views)
    cams = []
    for ang, r, h in zip(angles, dists, heights):
        center = np.array([target[0] + r * np.cos(ang), target[1] + r * np.sin(ang), h])
        R, t = look_at(center, target)
        cams.append(Camera(K, R, t))
    return cams


@dataclass
class NoiseSpec:
    sigma_px: float = 0.0
    occlusion_prob: float | list = 0.0
    conf_sigma_px: float = 5.0
    occluded_conf_max: float = 0.3
    occluded_sigma_px: float = 20.0
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.occlusion_prob, dtype=float)
        if np.any(p < 0) or np.any(p > 1):
            raise ValidationError("occlusion probabilities must lie in [0, 1]")
        if self.sigma_px < 0:
            raise ValidationError("sigma_px must be nonnegative")

    def to_json(self) -> dict:
        return {
            "sigma_px": self.sigma_px,
            "occlusion_prob": self.occlusion_prob,
            "conf_sigma_px": self.conf_sigma_px,
            "occluded_conf_max": self.occluded_conf_max,
            "occluded_sigma_px": self.occluded_sigma_px,
            "seed": self.seed,
        }


@dataclass
class View:
    intrinsics: CameraIntrinsics
    R: np.ndarray
    t: np.ndarray
    observed_uv: np.ndarray
    confidence: np.ndarray
    visible: np.ndarray
    gt_pose: np.ndarray
    gt_zr: np.ndarray
    exact_uv: np.ndarray

    @property
    def effective_confidence(self) -> np.ndarray:
        return self.confidence * self.visible

    def to_json(self) -> dict:
        return {
            "K": self.intrinsics.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "observed_uv": self.observed_uv.tolist(),
            "confidence": self.confidence.tolist(),
            "visible": self.visible.astype(int).tolist(),
            "gt_pose_mm": self.gt_pose.tolist(),
            "gt_zr": self.gt_zr.tolist(),
            "exact_uv": self.exact_uv.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "View":
        arr = lambda k: np.asarray(doc[k], dtype=float)
        return cls(
            CameraIntrinsics(arr("K")), arr("R"), arr("t"), arr("observed_uv"), arr("confidence"),
            np.asarray(doc["visible"], dtype=bool), arr("gt_pose_mm"), arr("gt_zr"), arr("exact_uv"),
        )


@dataclass
class MultiViewSample:
    sample_id: int
    views: list
    world_pose: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_views(self) -> int:
        return len(self.views)

    def to_json(self) -> dict:
        doc = {"id": self.sample_id, "views": [v.to_json() for v in self.views], "meta": self.meta}
        if self.world_pose is not None:
            doc["world_pose_mm"] = self.world_pose.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MultiViewSample":
        try:
            wp = doc.get("world_pose_mm")
            return cls(
                int(doc["id"]),
                [View.from_json(v) for v in doc["views"]],
                None if wp is None else np.asarray(wp, dtype=float),
                doc.get("meta", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"invalid sample record: {exc}") from exc


def synthesize(
    pose: np.ndarray,
    rig: list[Camera],
    noise: NoiseSpec,
    skel: SkeletonDef,
    rng: np.random.Generator,
    sample_id: int = 0,
) -> MultiViewSample:
    """Project a world pose into every camera and corrupt the 2D observations."""
    J = skel.num_joints
    occ_p = np.broadcast_to(np.asarray(noise.occlusion_prob, dtype=float), (J,))
    size = 2.0 * rig[0].intrinsics.K[0, 2]
    views = []
    for cam in rig:
        cam_pose = cam.to_camera(pose)
        exact = project(cam_pose, cam.intrinsics)
        err = rng.normal(0.0, 1.0, size=(J, 2)) * noise.sigma_px
        occluded = rng.uniform(size=J) < occ_p
        occ_err = rng.normal(0.0, 1.0, size=(J, 2)) * noise.occluded_sigma_px
        occ_conf = rng.uniform(0.0, noise.occluded_conf_max, size=J)
        err = np.where(occluded[:, None], err + occ_err, err)
        observed = exact + err
        e = np.linalg.norm(err, axis=1)
        conf = np.exp(-(e ** 2) / (2.0 * noise.conf_sigma_px ** 2))
        conf = np.where(occluded, occ_conf, conf)
        lo, hi = -1.5 * size, 2.5 * size
        outside = np.any((exact < lo) | (exact > hi), axis=1) & ~occluded
        if np.any(outside):
            raise PoseOutOfView(f"{int(outside.sum())} joint(s) project outside the image margin")
        normalized, _ = scale_normalize(cam_pose, skel)
        views.append(View(
            cam.intrinsics, cam.R.copy(), cam.t.copy(), observed, conf, ~occluded,
            cam_pose, relative_depths(normalized.joints, skel.root), exact,
        ))
    return MultiViewSample(sample_id, views, pose)


def sample_rng(master_seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(sample_id)])


def generate_dataset(
    num_samples: int,
    num_views: int,
    noise: NoiseSpec,
    skel: SkeletonDef | None = None,
    tracklet: bool = False,
    radius=(2500.0, 4000.0),
) -> list[MultiViewSample]:
    """Independent samples, each drawn from its own (seed, id) stream."""
    skel = skel or default_skeleton()
    out = []
    for n in range(num_samples):
        rng = sample_rng(noise.seed, n)
        pose = sample_pose(skel, rng)
        rig = make_rig(num_views, rng, radius=radius, tracklet=tracklet)
        sample = synthesize(pose, rig, noise, skel, rng, sample_id=n)
        sample.meta = {"noise": noise.to_json(), "tracklet": tracklet}
        out.append(sample)
    return out


@dataclass
class PseudoGT:
    keep: np.ndarray
    discarded: bool
    reason: str = ""


def pseudo_gt_filter(confidence, skel: SkeletonDef | None = None, tau: float = PSEUDO_GT_TAU,
                     required=None) -> PseudoGT:
    """Keep joints with confidence above ``tau``; drop the whole pose when more than
    half of the joints fall below it or any required joint (neck, pelvis) does."""
    conf = np.asarray(confidence, dtype=float)
    if required is None:
        required = skel.scale_pair if skel is not None else ()
    keep = conf > tau
    low = int(np.sum(conf < tau))
    if low > conf.shape[0] / 2:
        return PseudoGT(np.zeros_like(keep), True, "majority below threshold")
    if any(conf[j] < tau for j in required):
        return PseudoGT(np.zeros_like(keep), True, "neck or pelvis below threshold")
    return PseudoGT(keep, False)


def write_jsonl(samples: Iterable[MultiViewSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_jsonl(path) -> list[MultiViewSample]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {line_no}: {exc}") from exc
            out.append(MultiViewSample.from_json(doc))
    return out
