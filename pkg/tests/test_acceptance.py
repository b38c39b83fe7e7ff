"""End-to-end acceptance checks, one test per criterion.

Each test records its verdict before asserting so the terminal summary lists
every criterion even when some fail.
"""

import time

import numpy as np
import pytest

from oracles import SMALL_K, brute_force_vpq, dense_kkt_step, fd_jacobians, random_two_frame_problem, schur_problem
from panoptic_vo.cli import EXIT_OK, main
from panoptic_vo.dba_solver import BundleState, FrameGraph, build_frame_graph, linearize, schur_solve, solve_dba
from panoptic_vo.formats import array_from_bytes, array_to_bytes, c2w_to_tum, directory_digest, parse_tum, read_tum
from panoptic_vo.geometry import CameraIntrinsics, pixel_grid, se3_exp
from panoptic_vo.metrics import Trajectory, ate_rmse
from panoptic_vo.panoptic import PanopticMap, panoptic_confidence, vpq
from panoptic_vo.pipeline import PipelineConfig, observations_from_frames, run_pvo
from panoptic_vo.scene_io import read_result, read_scene
from panoptic_vo.simworld import (
    dynamic_demo_config,
    occlusion_free_demo_config,
    render_sequence,
    scene_config_to_text,
    static_demo_config,
    thing_coverage,
)
from panoptic_vo.vps_fusion import propagate_video, warp_to_current

SEEDS = range(20)
ROUNDOFF = 1e-9

# solver reports from every run below, checked together at the end
REPORTS = []


def test_c01_jacobians_match_finite_differences(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        state, graph = random_two_frame_problem(seed)
        lin = linearize(state, graph, SMALL_K)
        for e in range(len(graph.edges)):
            Ji, Jj, Jd, valid = fd_jacobians(state, graph, SMALL_K, e)
            for ana, num in ((lin.J_i[e], Ji), (lin.J_j[e], Jj), (lin.J_d[e], Jd)):
                a, n = ana[valid], num[valid]
                worst = max(worst, np.linalg.norm(a - n) / np.linalg.norm(n))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10.0
    criterion(1, "Jacobians vs central differences", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 10.0


def test_c02_solver_recovers_static_scene(criterion):
    t0 = time.perf_counter()
    num_frames, s = 5, 8
    cfg = static_demo_config(num_frames=num_frames)
    frames = render_sequence(cfg)
    Kw = cfg.intrinsics.subsampled(s)
    edges = build_frame_graph(num_frames, 2)
    grid = pixel_grid(*Kw.shape)
    targets = np.stack([grid + frames[i].gt_flow_to[j][s // 2::s, s // 2::s] / s for i, j in edges])
    depths = np.stack([f.gt_depth[s // 2::s, s // 2::s] for f in frames])
    gt = [f.gt_pose for f in frames]
    rng = np.random.default_rng(0)
    noisy = [gt[0]] + [se3_exp(rng.normal(size=6) * 0.05) @ p for p in gt[1:]]
    out, report = solve_dba(BundleState(noisy, depths), FrameGraph(num_frames, edges, targets,
                                                                   np.ones_like(targets)), Kw)
    REPORTS.append(report)
    stamps = [f.timestamp for f in frames]
    ate = ate_rmse(Trajectory(stamps, out.poses), Trajectory(stamps, gt))
    elapsed = time.perf_counter() - t0
    ok = ate < 1e-6 and elapsed < 30.0
    criterion(2, "static scene solved exactly", ok, f"ATE {ate:.2e} m, {elapsed:.1f}s")
    assert ate < 1e-6
    assert elapsed < 30.0


def test_c03_schur_matches_dense(criterion):
    worst = 0.0
    for frames, shape in [(2, (4, 4)), (2, (8, 8)), (3, (5, 6)), (3, (8, 8))]:
        K = CameraIntrinsics(fx=10.0, fy=10.0, cx=(shape[1] - 1) / 2, cy=(shape[0] - 1) / 2,
                             width=shape[1], height=shape[0])
        for seed in range(3):
            for fix_scale in (True, False):
                _, _, lin = schur_problem(frames, K, seed=seed, fix_scale=fix_scale)
                # without the scale constraint an undamped system has a gauge null space
                for damping in ((0.0, 1e-3, 1.0) if fix_scale else (1e-3, 1.0)):
                    dxi, dd = schur_solve(lin, damping)
                    ref_xi, ref_d = dense_kkt_step(lin, damping)
                    worst = max(worst, np.max(np.abs(dxi - ref_xi)), np.max(np.abs(dd - ref_d)))
    ok = worst < 1e-9
    criterion(3, "Schur step equals dense solve", ok, f"max abs diff {worst:.1e}")
    assert ok


@pytest.fixture(scope="module")
def dynamic_runs():
    """Unweighted vs panoptic-weighted runs on the seeded dynamic scenes."""
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        cfg = dynamic_demo_config(seed)
        frames = render_sequence(cfg)
        obs = observations_from_frames(frames, cfg.intrinsics)
        gt = Trajectory(obs.timestamps, [f.gt_pose for f in frames])
        plain = run_pvo(obs, PipelineConfig(outer_iterations=1, use_filter=False), gt)
        full = run_pvo(obs, PipelineConfig(outer_iterations=2), gt)
        REPORTS.extend(d.solver for d in plain.diagnostics + full.diagnostics)
        rows.append({
            "seed": seed,
            "coverage": thing_coverage(cfg, 1),
            "unweighted": plain.diagnostics[0].ate,
            "iter1": full.diagnostics[0].ate,
            "iter2": full.diagnostics[-1].ate,
        })
    return rows, time.perf_counter() - t0


def test_c04_panoptic_filter_lowers_ate(criterion, dynamic_runs):
    rows, elapsed = dynamic_runs
    for r in rows:
        print(f"seed {r['seed']:2d} coverage {r['coverage']:.3f} unweighted {r['unweighted']:.4f} "
              f"weighted {r['iter1']:.4f} iter2 {r['iter2']:.4f} ({r['iter2'] - r['iter1']:+.1e})")
    assert all(0.15 <= r["coverage"] <= 0.25 for r in rows)
    plain = np.array([r["unweighted"] for r in rows])
    weighted = np.array([r["iter1"] for r in rows])
    wins = int(np.sum(weighted < plain))
    med_ok = np.median(weighted) < np.median(plain)
    need = int(np.ceil(0.8 * len(rows)))
    ok = med_ok and wins >= need and elapsed < 300.0
    criterion(4, "panoptic weighting beats unweighted", ok,
              f"median {np.median(weighted):.4f} vs {np.median(plain):.4f}, "
              f"wins {wins}/{len(rows)} (need {need}), {elapsed:.0f}s")
    assert med_ok
    assert wins >= need
    assert elapsed < 300.0


def test_c05_second_iteration_does_not_hurt(criterion, dynamic_runs):
    rows, _ = dynamic_runs
    # a converged loop may still take one no-op solver step; differences at
    # round-off level are not an increase
    held = sum(r["iter2"] <= r["iter1"] + ROUNDOFF for r in rows)
    strict = sum(r["iter2"] <= r["iter1"] for r in rows)
    need = int(np.ceil(0.8 * len(rows)))
    ok = held >= need
    criterion(5, "outer iteration 2 no worse than 1", ok,
              f"{held}/{len(rows)} seeds within {ROUNDOFF:g} m, {strict}/{len(rows)} strict (need {need})")
    assert ok


def test_c06_confidence_unit_values(criterion):
    raw = np.zeros((2, 2, 2))
    static = panoptic_confidence(raw, np.zeros((2, 2)), eta=10.0)
    dynamic = panoptic_confidence(raw, np.ones((2, 2)), eta=10.0)
    units_ok = (np.max(np.abs(static - 1.0 / (1.0 + np.exp(-10.0)))) < 1e-12
                and np.max(np.abs(dynamic - 0.5)) < 1e-12)

    cfg = dynamic_demo_config(seed=5, num_frames=5)
    obs = observations_from_frames(render_sequence(cfg), cfg.intrinsics)
    a = run_pvo(obs, PipelineConfig(eta=0.0))
    b = run_pvo(obs, PipelineConfig(use_filter=False))
    REPORTS.extend(d.solver for d in a.diagnostics + b.diagnostics)
    same = (len(a.diagnostics) == len(b.diagnostics)
            and all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a.trajectory.poses, b.trajectory.poses))
            and np.array_equal(a.depths, b.depths)
            and [d.objective for d in a.diagnostics] == [d.objective for d in b.diagnostics])
    ok = units_ok and same
    criterion(6, "confidence unit values and eta=0 identity", ok,
              f"units {'exact' if units_ok else 'off'}, eta=0 {'bit-identical' if same else 'differs'}")
    assert units_ok
    assert same


def _warp_agreement(frames, K):
    worst = 1.0
    for a, b in zip(frames, frames[1:]):
        w = warp_to_current(a.gt_panoptic, np.zeros(K.shape + (0,)), a.gt_depth, a.gt_pose, b.gt_pose, K,
                            b.gt_depth, flow=a.gt_flow_to[b.index], flow_mask=a.moving)
        keep = ~w.occlusion_mask
        same = ((w.warped_labels.class_id == b.gt_panoptic.class_id)
                & (w.warped_labels.instance_id == b.gt_panoptic.instance_id))
        worst = min(worst, float(same[keep].mean()))
    return worst


def test_c07_propagation_with_true_geometry(criterion):
    free_cfg = occlusion_free_demo_config()
    free = render_sequence(free_cfg)
    dyn_cfg = dynamic_demo_config(seed=0)
    dyn = render_sequence(dyn_cfg)
    agree = min(_warp_agreement(free, free_cfg.intrinsics), _warp_agreement(dyn, dyn_cfg.intrinsics))

    tracked, _ = propagate_video([f.obs_panoptic for f in free], [f.gt_depth for f in free],
                                 [f.gt_pose for f in free], free_cfg.intrinsics,
                                 flows=[a.gt_flow_to[a.index + 1] for a in free[:-1]],
                                 flow_masks=[a.moving for a in free[:-1]])
    gt = [f.gt_panoptic for f in free]
    v0, v15 = vpq(tracked, gt, 0)[0], vpq(tracked, gt, 15)[0]
    ok = agree >= 0.99 and v0 >= 0.95 and v15 >= 0.90
    criterion(7, "label propagation with true geometry", ok,
              f"agreement {agree:.4f}, VPQ k=0 {v0:.3f}, k=15 {v15:.3f}")
    assert agree >= 0.99
    assert v0 >= 0.95
    assert v15 >= 0.90


def _toy(rng, shape=(6, 7)):
    inst = rng.integers(0, 3, size=shape)
    cls = np.where(inst > 0, rng.choice([10, 11]), rng.integers(0, 2, size=shape))
    return PanopticMap(cls, inst, (10, 11))


def test_c08_metric_oracles(criterion):
    cfg = occlusion_free_demo_config()
    gt = [f.gt_panoptic for f in render_sequence(cfg)]
    self_vpq = [vpq(gt, gt, k) for k in range(len(gt))]
    self_ok = all(v == (1.0, 1.0, 1.0) for v in self_vpq)

    rng = np.random.default_rng(8)
    poses = [se3_exp(rng.normal(size=6) * 0.5) for _ in range(10)]
    traj = Trajectory(np.arange(10) * 0.1, poses)
    g = se3_exp(rng.normal(size=6) * 2.0)
    moved = Trajectory(traj.timestamps, [p @ g.inverse() for p in poses])
    ate = max(ate_rmse(moved, traj), ate_rmse(moved, traj, alignment="rigid"))

    mismatches = 0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        gt3 = [_toy(rng) for _ in range(3)]
        pred3 = [_toy(rng) for _ in range(3)]
        for k in range(3):
            if vpq(pred3, gt3, k) != brute_force_vpq(pred3, gt3, k):
                mismatches += 1
    ok = self_ok and ate < 1e-9 and mismatches == 0
    criterion(8, "metric oracles", ok,
              f"VPQ(gt,gt)=1 {'for all k' if self_ok else 'broken'}, rigid ATE {ate:.1e}, "
              f"tube mismatches {mismatches}/90")
    assert self_ok
    assert ate < 1e-9
    assert mismatches == 0


def _cli(*args):
    assert main([str(a) for a in args]) == EXIT_OK


def test_c09_determinism_and_formats(criterion, tmp_path, capsys):
    cfg = dynamic_demo_config(seed=3, num_frames=4)
    (tmp_path / "scene.ini").write_text(scene_config_to_text(cfg))
    for name in ("a", "b"):
        _cli("simulate", "--config", tmp_path / "scene.ini", "--out", tmp_path / name / "scene")
        _cli("solve", "--scene", tmp_path / name / "scene", "--mode", "pipeline",
             "--out", tmp_path / name / "result")
    capsys.readouterr()
    scene_same = directory_digest(tmp_path / "a" / "scene") == directory_digest(tmp_path / "b" / "scene")
    result_same = directory_digest(tmp_path / "a" / "result") == directory_digest(tmp_path / "b" / "result")
    reports = [(tmp_path / n / "result" / "report.txt").read_bytes() for n in "ab"]
    trajs = [(tmp_path / n / "result" / "trajectory.txt").read_bytes() for n in "ab"]
    runs_same = scene_same and result_same and reports[0] == reports[1] and trajs[0] == trajs[1]

    frames = render_sequence(cfg)
    scene = read_scene(tmp_path / "a" / "scene")
    trip = all(np.array_equal(x.gt_depth, y.gt_depth) and np.array_equal(x.moving, y.moving)
               and np.array_equal(x.obs_panoptic.instance_id, y.obs_panoptic.instance_id)
               and all(np.array_equal(x.noisy_flow_to[j], y.noisy_flow_to[j]) for j in y.noisy_flow_to)
               for x, y in zip(scene.frames, frames))
    text = trajs[0].decode()
    trip &= c2w_to_tum(*parse_tum(text)) == text
    result = read_result(tmp_path / "a" / "result")
    written = read_tum(tmp_path / "a" / "result" / "trajectory.txt")
    trip &= all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(result.trajectory.poses, written.poses))
    arr = np.random.default_rng(9).normal(size=(3, 5, 2))
    trip &= array_from_bytes(array_to_bytes(arr)).tobytes() == arr.tobytes()

    ok = runs_same and trip
    criterion(9, "determinism and round trips", ok,
              f"repeat runs {'identical' if runs_same else 'differ'}, "
              f"round trips {'exact' if trip else 'lossy'}")
    assert runs_same
    assert trip


def test_c10_accepted_steps_never_raise_cost(criterion):
    if not REPORTS:
        # run on its own: take the reports from a short pipeline run
        cfg = dynamic_demo_config(seed=5, num_frames=5)
        obs = observations_from_frames(render_sequence(cfg), cfg.intrinsics)
        REPORTS.extend(d.solver for d in run_pvo(obs).diagnostics)
    bad = sum(not r.monotone for r in REPORTS)
    steps = sum(len(r.cost_trace) - 1 for r in REPORTS)
    ok = bad == 0
    criterion(10, "cost monotone over accepted steps", ok,
              f"{len(REPORTS)} solver runs, {steps} cost transitions, {bad} violations")
    assert ok
