"""Command line entry point: generate / train / evaluate / gradcheck / reconstruct."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import MVPoseError, NumericalError, ValidationError
from .gradsuite import run_suite
from .objective import ViewBatch
from .skeleton import CameraIntrinsics, Pose25D, default_skeleton, reconstruct, solve_root_depth
from .synth import NoiseSpec, generate_dataset, read_jsonl, write_jsonl
from .train import TrainConfig, evaluate, load_run, save_run, train

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("mvpose")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


def cmd_generate(args) -> int:
    noise = NoiseSpec(sigma_px=args.noise_px, occlusion_prob=args.occlusion, seed=args.seed)
    samples = generate_dataset(args.samples, args.views, noise)
    write_jsonl(samples, args.out)
    log.info("wrote %d samples x %d views to %s", len(samples), args.views, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    samples = read_jsonl(args.data)
    cfg = TrainConfig(
        mode=args.mode, alpha=args.alpha, beta=args.beta, psi=args.psi, iterations=args.iters, seed=args.seed,
        use_gt_extrinsics=args.use_gt_extrinsics, lr=args.lr, lr_final=args.lr_final, lr_drop_at=args.lr_drop_at,
        restarts=args.restarts, beta_warmup=args.beta_warmup, restart_select_at=args.restart_select_at,
    )
    result = train(samples, cfg)
    run_dir = save_run(result, cfg, args.out)
    summary = {"run_dir": str(run_dir), "initial": result.initial_report.to_json(),
               "final": result.final_report.to_json(), "depth_error": result.final_extra["depth_error"]}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, cfg = load_run(args.run)
    samples = read_jsonl(args.data)
    skel = default_skeleton()
    batch = ViewBatch.from_samples(samples, skel, max_views=cfg.max_views)
    report, extra = evaluate(params, batch, samples, cfg, skel)
    doc = report.to_json()
    doc["depth_error"] = extra["depth_error"]
    if "uv_error_px" in extra:
        doc["uv_error_px"] = extra["uv_error_px"]
    text = json.dumps(doc, indent=2)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, args.cases, coords=args.coords)
    for r in results:
        print(json.dumps(r.to_json()))
    failed = sum(not r.ok for r in results)
    log.info("%d/%d cases passed", len(results) - failed, len(results))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_reconstruct(args) -> int:
    skel = default_skeleton()
    pose = Pose25D.from_json(_read_json(args.pose25d))
    K = CameraIntrinsics.from_json(_read_json(args.camera))
    z_root = solve_root_depth(pose, K, skel)
    out = reconstruct(pose, K, skel)
    print(json.dumps({"joints": np.round(out.joints, 12).tolist(), "scale_state": out.scale_state, "z_root": z_root}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvpose", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a multi-view dataset (JSON lines)")
    g.add_argument("--samples", type=int, default=50)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--noise-px", type=float, default=0.0)
    g.add_argument("--occlusion", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize the weakly-supervised objective")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=("direct25d", "heatmap_logits"), default="direct25d")
    t.add_argument("--alpha", type=float, default=10.0)
    t.add_argument("--beta", type=float, default=100.0)
    t.add_argument("--psi", type=float, default=5.0)
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--lr-final", type=float, default=5e-5)
    t.add_argument("--lr-drop-at", type=float, default=0.8)
    t.add_argument("--restarts", type=int, default=1)
    t.add_argument("--beta-warmup", type=float, default=0.0)
    t.add_argument("--restart-select-at", type=float, default=0.5)
    t.add_argument("--use-gt-extrinsics", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trained run against held-out ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--cases", type=int, default=200)
    c.add_argument("--coords", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("reconstruct", help="lift one 2.5D pose to a normalized 3D pose")
    r.add_argument("--pose25d", required=True)
    r.add_argument("--camera", required=True)
    r.set_defaults(func=cmd_reconstruct)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ValueError, KeyError, OSError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError, MVPoseError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
