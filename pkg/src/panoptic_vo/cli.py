"""Command-line interface: ``simulate``, ``solve`` and ``evaluate``.

Exit codes: 0 success, 1 usage or input error, 2 computation failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
OUT_ENV = "PANOPTIC_VO_OUT"
THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
DEMOS = ("static", "dynamic", "occlusion-free")
MODES = ("unweighted", "panoptic", "pipeline")

log = logging.getLogger("panoptic_vo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _k_list(text):
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid window list '{text}'") from None
    if not ks or any(k < 0 for k in ks):
        raise argparse.ArgumentTypeError(f"invalid window list '{text}'")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = _Parser(prog="panoptic-vo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic scene directory")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="scene INI file")
    src.add_argument("--demo", choices=DEMOS, help="built-in scene")
    s.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/scene)")

    s = sub.add_parser("solve", parents=[common], help="estimate trajectory, depth and panoptic video")
    s.add_argument("--scene", required=True)
    s.add_argument("--mode", choices=MODES, default="pipeline")
    s.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<mode>)")
    s.add_argument("--iterations", type=int, default=2, help="outer iterations in pipeline mode")
    s.add_argument("--working-scale", type=int, default=8, choices=(1, 2, 4, 8))
    s.add_argument("--eta", type=float, default=10.0)

    s = sub.add_parser("evaluate", parents=[common], help="score a result against a scene")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--k", type=_k_list, default=[0, 5, 10, 15], help="comma-separated VPQ windows")
    s.add_argument("--alignment", choices=("similarity", "rigid"), default="similarity")
    s.add_argument("--out", help="also write the key-value report here")
    return p


def _out_dir(arg, default_name):
    if arg:
        return arg
    base = os.environ.get(OUT_ENV)
    if not base:
        raise UsageError(f"no --out given and ${OUT_ENV} is not set")
    return os.path.join(base, default_name)


def _simulate(args):
    from .errors import ConfigError
    from .formats import directory_digest
    from .scene_io import write_scene
    from .simworld import (
        dynamic_demo_config,
        load_scene_config,
        occlusion_free_demo_config,
        render_sequence,
        static_demo_config,
    )

    if args.config:
        try:
            cfg = load_scene_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except ConfigError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
        if args.seed is not None:
            from dataclasses import replace
            cfg = replace(cfg, seed=args.seed)
    else:
        seed = args.seed or 0
        cfg = {"static": static_demo_config, "occlusion-free": occlusion_free_demo_config,
               "dynamic": dynamic_demo_config}[args.demo](seed=seed)
    out = _out_dir(args.out, "scene")
    t0 = time.perf_counter()
    frames = render_sequence(cfg)
    log.info("rendered %d frames in %.2f s", len(frames), time.perf_counter() - t0)
    write_scene(out, cfg, frames)
    print(f"frames {len(frames)}")
    print(f"digest {directory_digest(out)}")


def _solve(args):
    import numpy as np

    from .dba_solver import DBAConfig
    from .errors import FormatError
    from .metrics import ate_rmse
    from .pipeline import PipelineConfig, observations_from_frames, run_pvo
    from .scene_io import read_scene, upsample_labels, write_result

    try:
        scene = read_scene(args.scene)
    except (FormatError, OSError) as exc:
        raise UsageError(f"cannot load scene: {exc}") from exc
    if args.iterations < 1:
        raise UsageError("--iterations must be positive")
    from .metrics import Trajectory
    gt = Trajectory([f.timestamp for f in scene.frames], [f.gt_pose for f in scene.frames])
    obs = observations_from_frames(scene.frames, scene.intrinsics, args.working_scale, scene.flow_radius)
    config = PipelineConfig(
        outer_iterations=args.iterations if args.mode == "pipeline" else 1,
        dba=DBAConfig(), eta=args.eta, radius=scene.flow_radius, working_scale=args.working_scale,
        seed=args.seed or 0, use_filter=args.mode != "unweighted")
    t0 = time.perf_counter()
    result = run_pvo(obs, config, log=log.info)
    seconds = time.perf_counter() - t0
    report = {"mode": args.mode, "frames": len(scene.frames), "working_scale": args.working_scale,
              "eta": repr(config.eta), "outer_iterations": len(result.diagnostics)}
    for n, d in enumerate(result.diagnostics, start=1):
        report.update({
            f"iter{n}_objective": repr(d.objective), f"iter{n}_lm_steps": d.solver.iterations,
            f"iter{n}_stop": d.solver.stop_reason, f"iter{n}_dynamic_fraction": repr(d.dynamic_fraction),
            f"iter{n}_feature_loss": repr(d.feature_loss),
            f"iter{n}_consistency_loss": repr(d.consistency_loss),
            f"iter{n}_pose_change": repr(d.pose_change),
        })
    ate = ate_rmse(result.trajectory, gt)
    report["ate_rmse_similarity"] = repr(ate)
    video = [upsample_labels(p, args.working_scale, scene.intrinsics.shape) for p in result.panoptic_video]
    out = _out_dir(args.out, args.mode)
    write_result(out, {"mode": args.mode, "working_scale": args.working_scale}, result.trajectory,
                 np.asarray(result.depths), video, report)
    print(f"mode {args.mode}")
    print(f"ate_rmse {ate:.6g}")
    print(f"seconds {seconds:.2f}")


def _evaluate(args):
    from .errors import FormatError, WindowTooLarge
    from .metrics import ate_rmse
    from .panoptic import vpq
    from .scene_io import read_result, read_scene

    try:
        scene = read_scene(args.gt)
        result = read_result(args.pred, scene.thing_classes)
    except (FormatError, OSError) as exc:
        raise UsageError(f"cannot load inputs: {exc}") from exc
    gt_video = [f.gt_panoptic for f in scene.frames]
    from .metrics import Trajectory
    gt = Trajectory([f.timestamp for f in scene.frames], [f.gt_pose for f in scene.frames])
    timing = {}
    t0 = time.perf_counter()
    ate = ate_rmse(result.trajectory, gt, args.alignment)
    timing["ate"] = time.perf_counter() - t0
    rows = []
    t0 = time.perf_counter()
    for k in args.k:
        try:
            rows.append((k,) + vpq(result.panoptic_video, gt_video, k))
        except WindowTooLarge:
            rows.append((k, None, None, None))
    timing["vpq"] = time.perf_counter() - t0

    lines = [f"ATE RMSE ({args.alignment}): {ate:.6f} m", "", f"{'k':>4} {'VPQ':>8} {'VPQ_th':>8} {'VPQ_st':>8}"]
    for k, *vals in rows:
        lines.append(f"{k:>4} " + " ".join(f"{v:8.4f}" if v is not None else f"{'n/a':>8}" for v in vals))
    lines.append("")
    lines += [f"runtime {stage}: {s:.3f} s" for stage, s in timing.items()]
    print("\n".join(lines))

    kv = [f"alignment = {args.alignment}", f"ate_rmse = {ate!r}"]
    for k, *vals in rows:
        for name, v in zip(("vpq", "vpq_th", "vpq_st"), vals):
            kv.append(f"{name}_k{k} = {v!r}" if v is not None else f"{name}_k{k} = nan")
    print()
    print("\n".join(kv))
    if args.out:
        from pathlib import Path
        Path(args.out).write_text("\n".join(kv) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("panoptic-vo: error: --threads must be positive", file=sys.stderr)
            return EXIT_USAGE
        for name in THREAD_ENV:
            os.environ[name] = str(args.threads)

    from .errors import PanopticVOError
    handler = {"simulate": _simulate, "solve": _solve, "evaluate": _evaluate}[args.command]
    try:
        handler(args)
    except UsageError as exc:
        print(f"panoptic-vo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PanopticVOError as exc:
        print(f"panoptic-vo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
