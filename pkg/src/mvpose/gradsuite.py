"""Randomized finite-difference gradient suite over the loss terms and both parameter modes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .heatmap import Grid, render_gaussians
from .objective import LossWeights, ObjectiveConfig, ViewBatch, check_objective_gradient
from .skeleton import SkeletonDef, default_skeleton
from .synth import NoiseSpec, generate_dataset

TERMS = ("L_H", "L_B", "L_MC", "L_WS")
MODES = ("direct25d", "heatmap_logits")


@dataclass
class CaseResult:
    case: int
    mode: str
    term: str
    checked: int
    excluded: int
    max_rel_error: float
    ok: bool

    def to_json(self) -> dict:
        return dict(self.__dict__)


def term_config(term: str, mode: str, grid: Grid | None) -> ObjectiveConfig:
    """Objective that isolates one term (weights of the others set to zero)."""
    if term == "L_H":
        w, hw = LossWeights(alpha=0.0, beta=0.0), 1.0
    elif term == "L_B":
        w, hw = LossWeights(alpha=0.0, beta=1.0), 0.0
    elif term == "L_MC":
        w, hw = LossWeights(alpha=1.0, beta=0.0), 0.0
    elif term == "L_WS":
        w, hw = LossWeights(), 1.0
    else:
        raise ValueError(f"unknown term {term!r}")
    return ObjectiveConfig(mode=mode, weights=w, grid=grid, heatmap_weight=hw)


def random_case(rng: np.random.Generator, mode: str, skel: SkeletonDef, grid_size: int = 32,
                image_size: int = 256):
    """One noisy multi-view sample plus parameters perturbed away from the truth."""
    views = int(rng.integers(2, 5))
    noise = NoiseSpec(sigma_px=float(rng.uniform(0.0, 3.0)), occlusion_prob=float(rng.uniform(0.0, 0.2)),
                      seed=int(rng.integers(2**31)))
    sample = generate_dataset(1, views, noise, skel)
    batch = ViewBatch.from_samples(sample, skel)
    zr = batch.gt_zr + rng.uniform(-0.1, 0.1, batch.gt_zr.shape)
    zr[..., skel.root] = 0.0
    if mode == "direct25d":
        uv = batch.anchor_uv + rng.normal(0.0, 2.0, batch.anchor_uv.shape)
        return batch, {"uv": uv, "zr": zr}, None
    grid = Grid.regular(grid_size, grid_size, image_size / grid_size)
    centers = batch.anchor_uv + rng.normal(0.0, 2.0, batch.anchor_uv.shape)
    h2d = render_gaussians(centers, 2.0 * grid.stride, grid) + rng.normal(0.0, 0.05, (*centers.shape[:-1], *grid.shape))
    hz = zr[..., None, None] + rng.normal(0.0, 0.05, h2d.shape)
    return batch, {"h2d": h2d, "hz": hz}, grid


def run_suite(seed: int, cases: int, coords: int = 20, step: float = 1e-5, tolerance: float = 1e-5,
              skel: SkeletonDef | None = None) -> list[CaseResult]:
    """Cycle over (mode, term) pairs; each case checks ``coords`` random parameter coordinates."""
    skel = skel or default_skeleton()
    out = []
    for i in range(cases):
        rng = np.random.default_rng([seed, i])
        mode = MODES[i % 2]
        term = TERMS[(i // 2) % len(TERMS)]
        batch, params, grid = random_case(rng, mode, skel)
        cfg = term_config(term, mode, grid)
        size = sum(v.size for v in params.values())
        idx = rng.choice(size, min(coords, size), replace=False)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = check_objective_gradient(params, batch, cfg, skel, step=step, tolerance=tolerance, indices=idx)
        out.append(CaseResult(i, mode, term, int((~rep.excluded).sum()), int(rep.excluded.sum()),
                              rep.max_rel_error, rep.ok))
    return out
