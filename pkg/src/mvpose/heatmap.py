"""2.5D heatmap decoding: spatial softmax, soft-argmax, latent depth readout.

Maps are stored as (J, H, W) arrays, rows indexed by v and columns by u.
The grid holds the pixel coordinate of every column (``grid_u``) and row
(``grid_v``); cell (i, k) sits at pixel (grid_u[k], grid_v[i]).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_TEMPERATURE = 50.0
DEFAULT_SIGMA_CELLS = 2.0


@dataclass(frozen=True)
class Grid:
    grid_u: np.ndarray
    grid_v: np.ndarray

    @classmethod
    def regular(cls, width: int, height: int, stride: float = 1.0) -> "Grid":
        """Cell-centre pixel coordinates for a grid sampled every ``stride`` pixels."""
        off = (stride - 1.0) / 2.0
        return cls(stride * np.arange(width) + off, stride * np.arange(height) + off)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.grid_v), len(self.grid_u)

    @property
    def stride(self) -> float:
        return float(self.grid_u[1] - self.grid_u[0]) if len(self.grid_u) > 1 else 1.0

    def mesh(self):
        return np.meshgrid(self.grid_u, self.grid_v)


@dataclass
class HeatmapStack:
    h2d: np.ndarray
    hz: np.ndarray
    grid: Grid
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.h2d = np.asarray(self.h2d, dtype=float)
        self.hz = np.asarray(self.hz, dtype=float)
        if self.h2d.shape != self.hz.shape or self.h2d.ndim != 3:
            raise ValidationError("h2d and hz must share a (J, H, W) shape")
        if self.h2d.shape[1:] != self.grid.shape:
            raise ValidationError("grid does not match map shape")

    @property
    def num_joints(self) -> int:
        return self.h2d.shape[0]

    def to_bytes(self) -> bytes:
        J, H, W = self.h2d.shape
        header = struct.pack("<qqqd", J, W, H, float(self.temperature))
        body = np.ascontiguousarray(self.h2d, dtype="<f8").tobytes()
        body += np.ascontiguousarray(self.hz, dtype="<f8").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes, stride: float = 1.0) -> "HeatmapStack":
        if len(data) < 32:
            raise ValidationError("truncated heatmap header")
        J, W, H, lam = struct.unpack("<qqqd", data[:32])
        n = J * H * W
        if len(data) != 32 + 16 * n:
            raise ValidationError("heatmap payload size does not match header")
        vals = np.frombuffer(data[32:], dtype="<f8").astype(float)
        return cls(
            vals[:n].reshape(J, H, W),
            vals[n:].reshape(J, H, W),
            Grid.regular(W, H, stride),
            lam,
        )


def spatial_softmax(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``temperature * scores`` over the last two axes."""
    x = temperature * np.asarray(scores, dtype=float)
    x = x - x.max(axis=(-2, -1), keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def normalize_heatmap(stack: HeatmapStack, j: int) -> np.ndarray:
    return spatial_softmax(stack.h2d[j], stack.temperature)


def soft_argmax(probs: np.ndarray, grid: Grid) -> np.ndarray:
    """Expected (u, v) under normalized maps; works on (..., H, W) input."""
    u = np.sum(probs * grid.grid_u[None, :], axis=(-2, -1))
    v = np.sum(probs * grid.grid_v[:, None], axis=(-2, -1))
    return np.stack([u, v], axis=-1)


def read_relative_depth(probs: np.ndarray, depth_maps: np.ndarray, root: int | None = None) -> np.ndarray:
    """Expected latent depth per joint; with ``root`` given, re-centred so zr[root] == 0."""
    z = np.sum(probs * depth_maps, axis=(-2, -1))
    if root is not None:
        z = z - z[..., root:root + 1]
    return z


def render_gaussian(center, sigma: float, grid: Grid) -> np.ndarray:
    """Unit-peak Gaussian on the grid; ``sigma`` in pixels."""
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    u0, v0 = float(center[0]), float(center[1])
    du = (grid.grid_u - u0) ** 2
    dv = (grid.grid_v - v0) ** 2
    return np.exp(-(dv[:, None] + du[None, :]) / (2.0 * sigma * sigma))


def render_gaussians(centers: np.ndarray, sigma: float, grid: Grid) -> np.ndarray:
    """Vectorized :func:`render_gaussian` for centers of shape (..., 2)."""
    centers = np.asarray(centers, dtype=float)
    du = (grid.grid_u - centers[..., 0:1]) ** 2
    dv = (grid.grid_v - centers[..., 1:2]) ** 2
    return np.exp(-(dv[..., :, None] + du[..., None, :]) / (2.0 * sigma * sigma))


def confidence_at(raw_map: np.ndarray, uv, grid: Grid) -> float:
    """Bilinear lookup of a raw heatmap at pixel (u, v), clamped to [0, 1]; 0 off-grid."""
    return float(confidences_at(np.asarray(raw_map)[None], np.asarray(uv, dtype=float)[None], grid)[0])


def confidences_at(raw_maps: np.ndarray, uv: np.ndarray, grid: Grid) -> np.ndarray:
    """Batched bilinear confidence lookup: maps (..., H, W), uv (..., 2) -> (...)."""
    raw_maps = np.asarray(raw_maps, dtype=float)
    H, W = raw_maps.shape[-2:]
    stride = grid.stride
    fx = (uv[..., 0] - grid.grid_u[0]) / stride
    fy = (uv[..., 1] - grid.grid_v[0]) / stride
    inside = (fx >= 0) & (fx <= W - 1) & (fy >= 0) & (fy <= H - 1) & np.isfinite(fx) & np.isfinite(fy)
    fx = np.where(inside, fx, 0.0)
    fy = np.where(inside, fy, 0.0)
    x0 = np.clip(np.floor(fx).astype(int), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(fy).astype(int), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = fx - x0
    ay = fy - y0
    flat = raw_maps.reshape(-1, H, W)
    idx = np.arange(flat.shape[0])
    x0f, x1f, y0f, y1f = (a.reshape(-1) for a in (x0, x1, y0, y1))
    axf, ayf = ax.reshape(-1), ay.reshape(-1)
    val = (
        flat[idx, y0f, x0f] * (1 - axf) * (1 - ayf)
        + flat[idx, y0f, x1f] * axf * (1 - ayf)
        + flat[idx, y1f, x0f] * (1 - axf) * ayf
        + flat[idx, y1f, x1f] * axf * ayf
    ).reshape(inside.shape)
    return np.where(inside, np.clip(val, 0.0, 1.0), 0.0)
