"""Desk-scale trainer: per-sample 2.5D parameters optimized with the weakly-supervised objective."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceDetected, ValidationError
from .heatmap import Grid, render_gaussians, soft_argmax, spatial_softmax
from .metrics import EvalReport, evaluate_poses, recover_scale
from .objective import LossWeights, ObjectiveConfig, ViewBatch, forward
from .optim import AdamState, adam_step, step_schedule
from .skeleton import ROOT_OK, SkeletonDef, default_skeleton
from .synth import IMAGE_SIZE, MultiViewSample

log = logging.getLogger(__name__)

MODES = ("direct25d", "heatmap_logits")


@dataclass
class ParameterBlock:
    mode: str
    arrays: dict

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        for k, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"parameter {k!r} has non-finite values")

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.mode, {k: v.copy() for k, v in self.arrays.items()})

    def save(self, path) -> None:
        np.savez(path, mode=np.array(self.mode), **self.arrays)

    @classmethod
    def load(cls, path) -> "ParameterBlock":
        with np.load(path) as f:
            mode = str(f["mode"])
            return cls(mode, {k: f[k] for k in f.files if k != "mode"})


@dataclass
class TrainConfig:
    mode: str = "direct25d"
    psi: float = 5.0
    alpha: float = 10.0
    beta: float = 100.0
    temperature: float = 50.0
    lr: float = 5e-4
    lr_final: float = 5e-5
    lr_drop_at: float = 0.8
    # per-parameter multipliers on the learning rate (pixels move faster than depths)
    lr_scale: dict = field(default_factory=lambda: {"uv": 1.0, "zr": 1.0, "h2d": 1.0, "hz": 1.0})
    iterations: int = 2000
    batch_samples: int | None = None
    seed: int = 0
    max_views: int = 4
    grid_size: int = 32
    image_size: int = IMAGE_SIZE
    sigma_cells: float = 2.0
    anchor_scale_px: float = 4.0
    use_gt_extrinsics: bool = False
    supervised: bool = False
    init_depth_range: float = 0.2
    history_every: int = 50
    divergence_factor: float = 1e3
    # fraction of the budget optimized with beta = 0 before the limb-length term is switched on
    beta_warmup: float = 0.0
    # independent initializations per sample; at restart_select_at of the budget each sample
    # keeps the replica with the lowest objective (full weights) and the rest are dropped
    restarts: int = 1
    restart_select_at: float = 0.5

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValidationError("iteration budget must be positive")
        if self.restarts < 1:
            raise ValidationError("restarts must be >= 1")
        if not (0.0 <= self.beta_warmup <= 1.0 and 0.0 <= self.restart_select_at <= 1.0):
            raise ValidationError("schedule fractions must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.batch_samples is not None and self.batch_samples <= 0:
            raise ValidationError("batch_samples must be positive")

    @property
    def grid(self) -> Grid:
        stride = self.image_size / self.grid_size
        return Grid.regular(self.grid_size, self.grid_size, stride)

    def objective(self, beta: float | None = None) -> ObjectiveConfig:
        return ObjectiveConfig(
            mode=self.mode,
            weights=LossWeights(self.psi, self.alpha, self.beta if beta is None else beta),
            supervised=self.supervised,
            temperature=self.temperature,
            grid=self.grid if self.mode == "heatmap_logits" else None,
            sigma_cells=self.sigma_cells,
            anchor_scale_px=self.anchor_scale_px,
            use_gt_rotation=self.use_gt_extrinsics,
        )

    def to_json(self) -> dict:
        return asdict(self)


def init_params(batch: ViewBatch, mode: str, rng: np.random.Generator, cfg: TrainConfig | None = None,
                skel: SkeletonDef | None = None) -> ParameterBlock:
    """2D from the observations, relative depths uniform in +-init_depth_range (root 0)."""
    cfg = cfg or TrainConfig(mode=mode)
    skel = skel or default_skeleton()
    N, C, J = batch.shape
    if N == 0:
        raise ValidationError("empty dataset")
    if mode == "direct25d":
        zr = rng.uniform(-cfg.init_depth_range, cfg.init_depth_range, size=(N, C, J))
        zr[..., skel.root] = 0.0
        return ParameterBlock(mode, {"uv": batch.anchor_uv.copy(), "zr": zr})
    grid = cfg.grid
    h2d = render_gaussians(batch.anchor_uv, cfg.sigma_cells * grid.stride, grid)
    return ParameterBlock(mode, {"h2d": h2d, "hz": np.zeros_like(h2d)})


def decode(params: ParameterBlock, cfg: TrainConfig, skel: SkeletonDef):
    """(uv, zr) per sample/view/joint from either parameterization."""
    if params.mode == "direct25d":
        zr = params.arrays["zr"]
        return params.arrays["uv"], zr - zr[..., skel.root:skel.root + 1]
    probs = spatial_softmax(params.arrays["h2d"], cfg.temperature)
    uv = soft_argmax(probs, cfg.grid)
    zr = np.sum(probs * params.arrays["hz"], axis=(-2, -1))
    return uv, zr - zr[..., skel.root:skel.root + 1]


def evaluate(params: ParameterBlock, batch: ViewBatch, samples: list[MultiViewSample], cfg: TrainConfig,
             skel: SkeletonDef) -> tuple[EvalReport, dict]:
    """Reconstruct every view, recover metric scale from mean limb lengths, score against held-out truth."""
    ev = forward(params.arrays, batch, cfg.objective(), skel)
    status = ev.frozen.root_status
    preds, gts = [], []
    excluded = 0
    N, C, _ = batch.shape
    for n in range(N):
        for c in range(C):
            if not batch.view_valid[n, c]:
                continue
            if status[n, c] != ROOT_OK:
                excluded += 1
                continue
            pose = ev.poses[n, c]
            preds.append(recover_scale(pose, skel) * pose)
            gts.append(samples[n].views[c].gt_pose)
    report = evaluate_poses(preds, gts, skel, excluded=excluded)
    ok = batch.view_valid & (status == ROOT_OK)
    depth_err = float(np.mean(np.abs(ev.zr - batch.gt_zr)[ok])) if ok.any() else float("nan")
    uv_err = None
    extra = {"depth_error": depth_err}
    if samples and samples[0].views[0].exact_uv is not None:
        exact = np.zeros_like(ev.uv)
        for n, s in enumerate(samples):
            for c, v in enumerate(s.views[:C]):
                exact[n, c] = v.exact_uv
        uv_err = np.linalg.norm(ev.uv - exact, axis=-1)
        extra["uv_error_px"] = float(np.mean(uv_err[batch.view_valid]))
        extra["uv_error_per_joint"] = uv_err
    return report, extra


@dataclass
class TrainResult:
    params: ParameterBlock
    history: list
    initial_report: EvalReport | None = None
    final_report: EvalReport | None = None
    final_extra: dict = field(default_factory=dict)


HISTORY_FIELDS = ("iteration", "lr", "total", "L_H", "L_MC", "L_B", "L_z", "skipped_pairs", "failed_views",
                  "depth_error", "pmpjpe_mm", "mpjpe_mm")


def train(samples: list[MultiViewSample], cfg: TrainConfig, skel: SkeletonDef | None = None,
          batch: ViewBatch | None = None, params: ParameterBlock | None = None,
          evaluate_every: int | None = None) -> TrainResult:
    """Optimize L_WS (or L_FS when supervised) over per-sample parameters with Adam."""
    skel = skel or default_skeleton()
    batch = batch or ViewBatch.from_samples(samples, skel, max_views=cfg.max_views)
    rng = np.random.default_rng(cfg.seed)
    N = batch.shape[0]
    if cfg.alpha > 0 and batch.shape[1] < 2 and not cfg.supervised:
        warnings.warn("dataset has no multi-view samples; L_MC stays 0", RuntimeWarning)
    evaluate_every = cfg.history_every if evaluate_every is None else evaluate_every
    initial_report, _ = evaluate(params or init_params(batch, cfg.mode, np.random.default_rng(cfg.seed), cfg, skel),
                                 batch, samples, cfg, skel)

    # replicas are stacked along the sample axis: replica r of sample n sits at r * N + n
    K = cfg.restarts if params is None else 1
    select_at = int(cfg.restart_select_at * cfg.iterations) if K > 1 else None
    rep = np.tile(np.arange(N), K)
    run_batch = batch.subset(rep) if K > 1 else batch
    params = params or init_params(run_batch, cfg.mode, rng, cfg, skel)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    warm_end = int(cfg.beta_warmup * cfg.iterations)
    obj_warm, obj_full = cfg.objective(beta=0.0), cfg.objective()

    state = AdamState()
    history = []
    initial_total = None
    for it in range(cfg.iterations):
        if it == select_at:
            keep = _select_replicas(arrays, run_batch, obj_full, skel, K, N)
            arrays = {k: v[keep] for k, v in arrays.items()}
            if state.m:
                state = AdamState({k: v[keep] for k, v in state.m.items()},
                                  {k: v[keep] for k, v in state.v.items()}, state.t)
            run_batch = batch
            initial_total = None
        n_run = run_batch.shape[0]
        obj = obj_warm if it < warm_end else obj_full
        if cfg.batch_samples is None or cfg.batch_samples >= n_run:
            idx = None
            sub, sub_arrays = run_batch, arrays
        else:
            idx = np.sort(rng.choice(n_run, cfg.batch_samples, replace=False))
            sub = run_batch.subset(idx)
            sub_arrays = {k: v[idx] for k, v in arrays.items()}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ev = forward(sub_arrays, sub, obj, skel)
        grads = ev.gradient()
        total = ev.value
        if initial_total is None or it == warm_end:
            initial_total = total
        if initial_total > 0 and total > cfg.divergence_factor * initial_total:
            raise DivergenceDetected(f"loss {total:.3g} exceeds {cfg.divergence_factor:g}x initial {initial_total:.3g}")
        lr = step_schedule(it, cfg.iterations, cfg.lr, cfg.lr_final, cfg.lr_drop_at)
        lrs = {k: lr * cfg.lr_scale.get(k, 1.0) for k in sub_arrays}
        new, state_sub = adam_step(sub_arrays, grads, _sub_state(state, idx), lrs)
        state = _merge_state(state, state_sub, idx, arrays)
        if idx is None:
            arrays = new
        else:
            for k in arrays:
                arrays[k][idx] = new[k]
        rec = {"iteration": it, "lr": lr, "total": total,
               "skipped_pairs": ev.diagnostics["skipped_pairs"], "failed_views": ev.diagnostics["failed_views"]}
        rec.update({k: v for k, v in ev.components.items() if k != "total"})
        if evaluate_every and n_run == N and (it % evaluate_every == 0 or it == cfg.iterations - 1):
            report, extra = evaluate(ParameterBlock(cfg.mode, arrays), batch, samples, cfg, skel)
            rec.update(depth_error=extra["depth_error"], pmpjpe_mm=report.pmpjpe_mm, mpjpe_mm=report.mpjpe_mm)
        history.append(rec)
    if run_batch is not batch:
        keep = _select_replicas(arrays, run_batch, obj_full, skel, K, N)
        arrays = {k: v[keep] for k, v in arrays.items()}
    final = ParameterBlock(cfg.mode, arrays)
    final_report, final_extra = evaluate(final, batch, samples, cfg, skel)
    return TrainResult(final, history, initial_report, final_report, final_extra)


def _select_replicas(arrays, batch: ViewBatch, obj, skel: SkeletonDef, K: int, N: int) -> np.ndarray:
    """Index of the lowest-objective replica per sample; replicas with a failed root solve are ruled out
    (a dropped view removes its own loss terms and would otherwise look cheap)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ev = forward(arrays, batch, obj, skel)
    score = ev.sample_totals()
    failed = np.any(batch.view_valid & (ev.frozen.root_status != ROOT_OK), axis=1)
    score = np.where(failed, np.inf, score).reshape(K, N)
    best = np.argmin(score, axis=0)
    log.debug("replica choice per sample: %s", best)
    return best * N + np.arange(N)


def _sub_state(state: AdamState, idx):
    if idx is None or not state.m:
        return state if idx is None else AdamState({}, {}, state.t)
    return AdamState({k: v[idx] for k, v in state.m.items()}, {k: v[idx] for k, v in state.v.items()}, state.t)


def _merge_state(state: AdamState, sub: AdamState, idx, arrays):
    if idx is None:
        return sub
    m = state.m or {k: np.zeros_like(v) for k, v in arrays.items()}
    v = state.v or {k: np.zeros_like(a) for k, a in arrays.items()}
    for k in arrays:
        m[k][idx] = sub.m[k]
        v[k][idx] = sub.v[k]
    return AdamState(m, v, sub.t)


def write_history_csv(history: list, path, every: int = 50) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for rec in history:
            if rec["iteration"] % every == 0 or rec is history[-1]:
                w.writerow({k: rec.get(k, "") for k in HISTORY_FIELDS})


def save_run(result: TrainResult, cfg: TrainConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    result.params.save(run_dir / "params.npz")
    (run_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))
    write_history_csv(result.history, run_dir / "history.csv", cfg.history_every)
    return run_dir


def load_run(run_dir) -> tuple[ParameterBlock, TrainConfig]:
    run_dir = Path(run_dir)
    cfg = TrainConfig(**json.loads((run_dir / "config.json").read_text()))
    return ParameterBlock.load(run_dir / "params.npz"), cfg
