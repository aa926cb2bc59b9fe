"""Skeleton definition, scale normalization, projection and 2.5D -> 3D reconstruction.

Conventions: camera frame is x right, y down, z forward. Raw poses are in
millimeters; scale-normalized poses are dimensionless (neck-pelvis distance 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateRays,
    DegenerateScalePair,
    NoPositiveRoot,
    NoRealRoot,
    ValidationError,
)

DISCRIMINANT_TOL = 1e-9
DEGENERATE_RAY_TOL = 1e-12

# status codes shared with the batched differentiable solver
ROOT_OK = 0
ROOT_NO_REAL = 1
ROOT_NO_POSITIVE = 2
ROOT_DEGENERATE = 3

_STATUS_ERRORS = {
    ROOT_NO_REAL: NoRealRoot,
    ROOT_NO_POSITIVE: NoPositiveRoot,
    ROOT_DEGENERATE: DegenerateRays,
}


@dataclass(frozen=True)
class SkeletonDef:
    joints: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    scale_pair: tuple[int, int]
    root: int
    mean_limb_lengths_mm: tuple[float, ...]
    scale_pair_length_mm: float | None = None

    def __post_init__(self):
        J = len(self.joints)
        if J < 2:
            raise ValidationError("skeleton needs at least two joints")
        if len(self.edges) != J - 1:
            raise ValidationError(f"a tree over {J} joints needs {J - 1} edges, got {len(self.edges)}")
        if len(self.mean_limb_lengths_mm) != len(self.edges):
            raise ValidationError("one mean limb length per edge required")
        if any(not (x > 0) for x in self.mean_limb_lengths_mm):
            raise ValidationError("mean limb lengths must be positive")
        k, l = self.scale_pair
        for idx in (k, l, self.root):
            if not 0 <= idx < J:
                raise ValidationError(f"joint index {idx} out of range")
        if k == l:
            raise ValidationError("scale pair joints must differ")
        # connectivity: union-find over the edge list
        parent = list(range(J))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in self.edges:
            if not (0 <= a < J and 0 <= b < J) or a == b:
                raise ValidationError(f"bad edge {(a, b)}")
            ra, rb = find(a), find(b)
            if ra == rb:
                raise ValidationError("edges contain a cycle")
            parent[ra] = rb
        if len({find(j) for j in range(J)}) != 1:
            raise ValidationError("edges do not connect all joints")
        if self.scale_pair_length_mm is None and self._scale_edge() is None:
            raise ValidationError("scale_pair is not an edge; scale_pair_length_mm is required")

    def _scale_edge(self):
        k, l = self.scale_pair
        for i, (a, b) in enumerate(self.edges):
            if {a, b} == {k, l}:
                return i
        return None

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def edge_array(self) -> np.ndarray:
        return np.asarray(self.edges, dtype=np.int64)

    @property
    def limb_lengths_mm(self) -> np.ndarray:
        return np.asarray(self.mean_limb_lengths_mm, dtype=float)

    @property
    def mean_scale_mm(self) -> float:
        """Mean neck-pelvis distance used to normalize limb lengths."""
        if self.scale_pair_length_mm is not None:
            return float(self.scale_pair_length_mm)
        return float(self.mean_limb_lengths_mm[self._scale_edge()])

    @property
    def normalized_limb_lengths(self) -> np.ndarray:
        return self.limb_lengths_mm / self.mean_scale_mm

    def index(self, name: str) -> int:
        return self.joints.index(name)

    def to_json(self) -> dict:
        doc = {
            "joints": list(self.joints),
            "edges": [list(e) for e in self.edges],
            "scale_pair": list(self.scale_pair),
            "root": self.root,
            "mean_limb_lengths_mm": list(self.mean_limb_lengths_mm),
        }
        if self.scale_pair_length_mm is not None:
            doc["scale_pair_length_mm"] = self.scale_pair_length_mm
        return doc

    @classmethod
    def from_json(cls, doc: dict | str) -> "SkeletonDef":
        if isinstance(doc, str):
            doc = json.loads(doc)
        try:
            return cls(
                joints=tuple(doc["joints"]),
                edges=tuple((int(a), int(b)) for a, b in doc["edges"]),
                scale_pair=(int(doc["scale_pair"][0]), int(doc["scale_pair"][1])),
                root=int(doc["root"]),
                mean_limb_lengths_mm=tuple(float(x) for x in doc["mean_limb_lengths_mm"]),
                scale_pair_length_mm=doc.get("scale_pair_length_mm"),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"invalid skeleton document: {exc}") from exc


_JOINTS = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
_EDGES = (
    (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (7, 9), (9, 10), (10, 11), (7, 12), (12, 13), (13, 14),
)
_LIMBS_MM = (130.0, 450.0, 440.0, 130.0, 450.0, 440.0, 500.0, 200.0, 150.0, 280.0, 250.0, 150.0, 280.0, 250.0)


def default_skeleton() -> SkeletonDef:
    """15-joint body skeleton with a direct pelvis-neck edge (the scale pair)."""
    return SkeletonDef(
        joints=_JOINTS,
        edges=_EDGES,
        scale_pair=(7, 0),
        root=0,
        mean_limb_lengths_mm=_LIMBS_MM,
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    K: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.shape != (3, 3):
            raise ValidationError("K must be 3x3")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValidationError("focal lengths must be positive")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1.0:
            raise ValidationError("K must be upper triangular with K[2,2] = 1")
        object.__setattr__(self, "K", K)

    @classmethod
    def from_params(cls, fx: float, fy: float, cx: float, cy: float) -> "CameraIntrinsics":
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))

    @property
    def inverse(self) -> np.ndarray:
        fx, fy, cx, cy, sk = self.K[0, 0], self.K[1, 1], self.K[0, 2], self.K[1, 2], self.K[0, 1]
        # closed form inverse of an upper-triangular intrinsics matrix
        return np.array([
            [1.0 / fx, -sk / (fx * fy), (sk * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ])

    def to_json(self) -> dict:
        return {"K": self.K.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "CameraIntrinsics":
        if "K" in doc:
            return cls(np.asarray(doc["K"], dtype=float))
        return cls.from_params(doc["fx"], doc["fy"], doc["cx"], doc["cy"])


@dataclass
class Pose3D:
    joints: np.ndarray
    scale_state: str = "raw"

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise ValidationError("joints must have shape (J, 3)")
        if self.scale_state not in ("raw", "normalized"):
            raise ValidationError("scale_state must be 'raw' or 'normalized'")


@dataclass
class Pose25D:
    """Per-joint (u, v) in pixels, root-relative normalized depth and confidence."""

    uv: np.ndarray
    zr: np.ndarray
    confidence: np.ndarray = field(default=None)
    root: int = 0

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)
        self.zr = np.asarray(self.zr, dtype=float)
        J = self.zr.shape[0]
        if self.uv.shape != (J, 2):
            raise ValidationError("uv must have shape (J, 2)")
        if self.confidence is None:
            self.confidence = np.ones(J)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.confidence.shape != (J,):
            raise ValidationError("confidence must have shape (J,)")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValidationError("confidences must lie in [0, 1]")
        if self.zr[self.root] != 0.0:
            raise ValidationError("relative depth of the root joint must be exactly 0")

    @classmethod
    def from_json(cls, doc: dict) -> "Pose25D":
        try:
            return cls(uv=doc["uv"], zr=doc["zr"], confidence=doc.get("confidence"), root=int(doc.get("root", 0)))
        except KeyError as exc:
            raise ValidationError(f"pose25d document missing {exc}") from exc


def scale_normalize(pose, skel: SkeletonDef) -> tuple[Pose3D, float]:
    """Divide a raw pose by its scale-pair distance. Returns (normalized pose, s)."""
    joints = pose.joints if isinstance(pose, Pose3D) else np.asarray(pose, dtype=float)
    k, l = skel.scale_pair
    s = float(np.linalg.norm(joints[k] - joints[l]))
    if s < 1e-9:
        raise DegenerateScalePair(f"scale pair distance {s:.3g} is degenerate")
    return Pose3D(joints / s, "normalized"), s


def project(pose, K: CameraIntrinsics) -> np.ndarray:
    """Perspective projection of camera-frame joints, returns (J, 2) pixel coordinates."""
    joints = pose.joints if isinstance(pose, Pose3D) else np.asarray(pose, dtype=float)
    z = joints[:, 2]
    if np.any(z <= 0):
        raise BehindCamera(f"{int(np.sum(z <= 0))} joint(s) have non-positive depth")
    h = joints @ K.K.T
    return h[:, :2] / h[:, 2:3]


def back_project(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Rays K^-1 (u, v, 1) for every joint; third component is 1."""
    uv = np.asarray(uv, dtype=float)
    h = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    return h @ K.inverse.T


def root_depth_quadratic(rays: np.ndarray, zr: np.ndarray, k: int, l: int):
    """Coefficients (A, B, C) of A z^2 + 2 B z + C = 0 from the unit scale-pair constraint.

    Works on arbitrary leading batch dimensions: rays (..., J, 3), zr (..., J).
    """
    b = rays[..., k, :] - rays[..., l, :]
    c = zr[..., k, None] * rays[..., k, :] - zr[..., l, None] * rays[..., l, :]
    A = np.sum(b * b, axis=-1)
    B = np.sum(b * c, axis=-1)
    C = np.sum(c * c, axis=-1) - 1.0
    return A, B, C, b, c


def select_root(A, B, C):
    """Pick the larger real root (batched). Returns (z, status) with status codes ROOT_*."""
    A, B, C = np.broadcast_arrays(np.asarray(A, float), np.asarray(B, float), np.asarray(C, float))
    z = np.ones(A.shape)
    status = np.full(A.shape, ROOT_OK, dtype=np.int8)
    disc = B * B - A * C
    quad = A >= DEGENERATE_RAY_TOL
    bad_disc = quad & (disc < -DISCRIMINANT_TOL)
    status[bad_disc] = ROOT_NO_REAL
    ok = quad & ~bad_disc
    sq = np.sqrt(np.clip(disc[ok], 0.0, None))
    z[ok] = (-B[ok] + sq) / A[ok]
    lin = ~quad
    with np.errstate(divide="ignore", invalid="ignore"):
        zl = np.where(B[lin] != 0, -C[lin] / (2.0 * B[lin]), np.nan)
    good_lin = np.isfinite(zl) & (zl > 0)
    z_lin = np.ones(zl.shape)
    z_lin[good_lin] = zl[good_lin]
    z[lin] = z_lin
    st_lin = np.full(zl.shape, ROOT_DEGENERATE, dtype=np.int8)
    st_lin[good_lin] = ROOT_OK
    status[lin] = st_lin
    nonpos = ok & (z <= 0)
    status[nonpos] = ROOT_NO_POSITIVE
    z[status != ROOT_OK] = 1.0
    return z, status


def raise_for_status(status: int):
    if status != ROOT_OK:
        raise _STATUS_ERRORS[int(status)](
            {ROOT_NO_REAL: "scale constraint has no real solution",
             ROOT_NO_POSITIVE: "no positive root depth",
             ROOT_DEGENERATE: "scale-pair rays are degenerate"}[int(status)]
        )


def solve_root_depth(pose25d: Pose25D, K: CameraIntrinsics, skel: SkeletonDef) -> float:
    """Normalized depth of the root joint that puts the scale pair at unit distance."""
    uv, zr = pose25d.uv, pose25d.zr
    if len(zr) != skel.num_joints:
        raise ValidationError(f"pose has {len(zr)} joints, skeleton has {skel.num_joints}")
    k, l = skel.scale_pair
    if not (np.all(np.isfinite(uv[[k, l]])) and np.all(np.isfinite(zr[[k, l]]))):
        raise ValidationError("scale-pair joints need finite (u, v, zr)")
    rays = back_project(uv, K)
    A, B, C, _, _ = root_depth_quadratic(rays, zr, k, l)
    z, status = select_root(A, B, C)
    raise_for_status(int(status))
    return float(z)


def reconstruct(pose25d: Pose25D, K: CameraIntrinsics, skel: SkeletonDef) -> Pose3D:
    """Scale-normalized camera-frame 3D pose from a 2.5D pose."""
    z_root = solve_root_depth(pose25d, K, skel)
    rays = back_project(pose25d.uv, K)
    return Pose3D((z_root + pose25d.zr)[:, None] * rays, "normalized")


def relative_depths(normalized_joints: np.ndarray, root: int) -> np.ndarray:
    """Root-relative normalized depths of a camera-frame normalized pose."""
    z = np.asarray(normalized_joints)[..., 2]
    return z - z[..., root:root + 1]


def to_pose25d(normalized_joints: np.ndarray, K: CameraIntrinsics, skel: SkeletonDef) -> Pose25D:
    """Exact 2.5D representation of a normalized camera-frame pose."""
    uv = project(normalized_joints, K)
    return Pose25D(uv, relative_depths(normalized_joints, skel.root), root=skel.root)


def limb_lengths(joints: np.ndarray, skel: SkeletonDef) -> np.ndarray:
    e = skel.edge_array
    return np.linalg.norm(joints[..., e[:, 1], :] - joints[..., e[:, 0], :], axis=-1)
