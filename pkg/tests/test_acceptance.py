"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary lines
are repeated at the end of the pytest report. The toy-training criteria
(6 and 9) take several minutes each.
"""

import json
import time

import numpy as np
import pytest

from pvcorr import autodiff as ad
from pvcorr.cli import main as cli_main
from pvcorr.correlation import point_branch, truncate, voxel_branch, voxel_lookup
from pvcorr.geometry import CubeSpec, KDTree, cube_assign, knn, knn_brute_force, subcube_ids
from pvcorr.metrics import evaluate
from pvcorr.network import (
    ModelConfig, ModelParams, SceneGraphs, gru_cell, iterate, neighbor_graph, set_conv,
)
from pvcorr.synthetic import gen_dataset
from pvcorr.training import TrainConfig, loss_iter, predict, train_main, train_refine

from gradcheck import check_grads, numeric_grad, rand64, rel_error

# Toy run for criteria 6 and 9: 20 scenes x 256 points, sigma 0.005, motion 0.3 m.
TOY_DATA = dict(n_scenes=20, n_points=256, motion_scale=0.3, noise=0.005, seed=1)
TOY = dict(t_train=8, t_eval=32, m=128, k=32, graph_k=16, scale_corr=True, lr=1e-3, warmup_steps=100,
           lr_decay="linear", epochs_main=20, epochs_refine=5)
TOY_BUDGET_S = 15 * 60


# --- 1 -------------------------------------------------------------------------

def test_criterion_1_knn_equals_brute_force(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for trial in range(200):
        k = (1, 4, 32)[trial % 3]
        n = int(rng.integers(k, 513))
        cloud = rng.normal(size=(n, 3))
        if trial % 4 == 0:
            cloud = np.round(cloud * 2) / 2  # duplicates and equal distances
        queries = rng.normal(size=(int(rng.integers(1, 129)), 3))
        a_idx, a_off = knn(KDTree(cloud), queries, k)
        b_idx, b_off = knn_brute_force(cloud, queries, k)
        mismatches += not (np.array_equal(a_idx, b_idx) and np.array_equal(a_off, b_off))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    report(1, "KNN oracle equivalence", ok, f"{mismatches} mismatching clouds of 200, {elapsed:.2f} s (< 10 s)")
    assert ok


# --- 2 -------------------------------------------------------------------------

def full_sort_oracle(c, m):
    rows = [sorted(range(len(r)), key=lambda j: (-r[j], j))[:m] for r in c]
    return np.array(rows), np.array([[r[j] for j in row] for r, row in zip(c, rows)])


def test_criterion_2_truncation_equals_sort(report):
    rng = np.random.default_rng(7)
    bad = 0
    with ad.precision(np.float64):
        for trial in range(100):
            n1, n2 = rng.integers(1, 40, size=2)
            kind = trial % 4
            if kind == 0:
                c = rng.normal(size=(n1, n2))
            elif kind == 1:
                c = rng.integers(0, 3, size=(n1, n2)).astype(float)
            elif kind == 2:
                c = np.full((n1, n2), -1.25)
            else:
                c = np.round(rng.normal(size=(n1, n2)), 1)
            m = int(rng.integers(1, n2 + 1))
            tc = truncate(ad.Tensor(c), m)
            idx, val = full_sort_oracle(c, m)
            bad += not (np.array_equal(tc.indices, idx) and np.array_equal(tc.scores.data, val))
    report(2, "truncation oracle equivalence", bad == 0, f"{bad} mismatching matrices of 100 (75 tie-heavy)")
    assert bad == 0


# --- 3 -------------------------------------------------------------------------

def boxes_containing(rel, spec, level):
    side = spec.side_length(level)
    out = []
    for i, c in enumerate(spec.subcube_indices()):
        d = rel - c * side
        if np.all(d >= -side / 2) and np.all(d < side / 2):
            out.append(i)
    return out


def test_criterion_3_voxel_assignment(report):
    spec = CubeSpec(3, 0.25, 3)
    rng = np.random.default_rng(3)
    problems = 0
    checked = 0
    for scene in gen_dataset(5, 256, 0.3, 0.005, seed=11):
        q = scene.p1[rng.choice(256, 8, replace=False)]
        for level in range(spec.levels):
            half = spec.resolution * spec.side_length(level) / 2
            assigned = cube_assign(q, scene.p2, spec, level)
            for qi, cubes in zip(q, assigned):
                rel = scene.p2 - qi
                ids = subcube_ids(rel, spec, level)
                in_cube = np.all((rel >= -half) & (rel < half), axis=1)
                for r, i, inside in zip(rel, ids, in_cube):
                    hits = boxes_containing(r, spec, level)
                    checked += 1
                    # inside the cube <=> exactly one box; the index must be that box
                    problems += (len(hits) == 1) != bool(inside) or (hits[0] if hits else -1) != i
                members = [j for v in cubes.values() for j in v]
                problems += len(members) != len(set(members)) or len(members) != int(in_cube.sum())
    # pre-MLP vector length
    s = gen_dataset(1, 64, seed=0)[0]
    with ad.no_grad():
        tc = truncate(ad.Tensor(s.p1 @ s.p2.T), 16)
        width = voxel_lookup(s.p1, s.p2, tc, spec).shape[1]
    ok = problems == 0 and width == 81 == spec.feature_dim
    report(3, "voxel assignment", ok, f"{checked} point/query/level cases, {problems} problems, vector length {width}")
    assert ok


# --- 4 -------------------------------------------------------------------------

def _op_cases(rng):
    r = lambda *s: rand64(rng, *s)  # noqa: E731
    x3, w, b = r(5, 3, 4), r(4, 6), r(6)
    a, c, d = r(4, 5), r(4, 5), r(4, 5)
    slope = r(1)
    gnx, gamma, beta = r(6, 3, 8), r(8), r(8)
    pool = r(6, 4, 5)
    idx = rng.integers(0, 7, size=9)
    src = r(7, 3)
    rows = r(5, 6)
    cols = rng.integers(0, 6, size=(5, 4))
    seg = rng.integers(-1, 4, size=(5, 6))
    wsum = ad.Tensor(rng.normal(size=(5, 3, 6)))
    return {
        "matmul": (lambda: ad.sum_all(ad.mul(ad.matmul(a, ad.transpose(c)), ad.Tensor(rng_fixed(4, 4)))), [a, c]),
        "transpose": (lambda: ad.sum_all(ad.mul(ad.transpose(a), ad.Tensor(rng_fixed(5, 4)))), [a]),
        "reshape": (lambda: ad.sum_all(ad.mul(ad.reshape(a, (2, 10)), ad.Tensor(rng_fixed(2, 10)))), [a]),
        "pointwise_linear": (lambda: ad.sum_all(ad.mul(ad.pointwise_linear(x3, w, b), wsum)), [x3, w, b]),
        "add/sub/mul": (lambda: ad.sum_all(ad.mul(ad.add(a, c), ad.sub(a, ad.scale(c, 0.3)))), [a, c]),
        "one_minus": (lambda: ad.sum_all(ad.mul(ad.one_minus(a), c)), [a, c]),
        "abs": (lambda: ad.sum_all(ad.mul(ad.abs_(a), c)), [a, c]),
        "mean_all": (lambda: ad.mean_all(ad.mul(a, c)), [a, c]),
        "sigmoid": (lambda: ad.sum_all(ad.mul(ad.sigmoid(a), c)), [a, c]),
        "tanh": (lambda: ad.sum_all(ad.mul(ad.tanh(a), c)), [a, c]),
        "relu": (lambda: ad.sum_all(ad.mul(ad.relu(a), c)), [a, c]),
        "leaky_relu": (lambda: ad.sum_all(ad.mul(ad.leaky_relu(a), c)), [a, c]),
        "prelu": (lambda: ad.sum_all(ad.mul(ad.prelu(a, slope), c)), [a, c, slope]),
        "group_norm": (lambda: ad.sum_all(ad.mul(ad.group_norm(gnx, 4, gamma, beta),
                                                 ad.Tensor(rng_fixed(6, 3, 8)))), [gnx, gamma, beta]),
        "max_pool_neighbors": (lambda: ad.sum_all(ad.mul(ad.max_pool_neighbors(pool),
                                                         ad.Tensor(rng_fixed(6, 5)))), [pool]),
        "concat": (lambda: ad.sum_all(ad.mul(ad.concat([a, c, d], axis=1),
                                             ad.Tensor(rng_fixed(4, 15)))), [a, c, d]),
        "gather_rows": (lambda: ad.sum_all(ad.mul(ad.gather_rows(src, idx), ad.Tensor(rng_fixed(9, 3)))), [src]),
        "repeat_rows": (lambda: ad.sum_all(ad.mul(ad.repeat_rows(src, 3), ad.Tensor(rng_fixed(7, 3, 3)))), [src]),
        "take_along_rows": (lambda: ad.sum_all(ad.mul(ad.take_along_rows(rows, cols),
                                                      ad.Tensor(rng_fixed(5, 4)))), [rows]),
        "segment_mean": (lambda: ad.sum_all(ad.mul(ad.segment_mean(rows, seg, 4),
                                                   ad.Tensor(rng_fixed(5, 4)))), [rows]),
    }


_FIXED = np.random.default_rng(99)
_FIXED_CACHE = {}


def rng_fixed(*shape):
    # constant weights per shape so every finite-difference evaluation sees the same loss
    if shape not in _FIXED_CACHE:
        _FIXED_CACHE[shape] = _FIXED.normal(size=shape)
    return _FIXED_CACHE[shape]


def _module_cases(rng):
    cfg = ModelConfig(m=10, k=4, graph_k=4)
    p = ModelParams.init(cfg, seed=1).astype(np.float64)
    pts = rng.normal(size=(10, 3))
    graph = neighbor_graph(pts, 4)
    feats = rand64(rng, 10, 3)
    sc = p.scope("feat.setconv0")
    gw = {n: rand64(rng, *t.shape) for n, t in p.scope("gru").items()}
    h, x = rand64(rng, 6, 128), rand64(rng, 6, 195)
    target = rng.normal(size=(12, 3))
    q = rand64(rng, 10, 3)
    scores = rand64(rng, 10, 12)
    with ad.no_grad():
        tc = truncate(scores, 10)
    tc.scores = ad.Tensor(tc.scores.data.copy(), requires_grad=True)
    pw, vw = p.scope("corr.point"), p.scope("corr.voxel")
    spec = cfg.cube
    return {
        "set_conv": (lambda: ad.sum_all(ad.mul(set_conv(feats, graph, sc), ad.Tensor(rng_fixed(10, 32)))),
                     [feats, sc["fc1.w"], sc["fc1.gamma"], sc["fc3.b"]]),
        "gru_cell": (lambda: ad.sum_all(ad.mul(gru_cell(h, x, gw), ad.Tensor(rng_fixed(6, 128)))),
                     [h, x] + list(gw.values())),
        "point_branch": (lambda: ad.sum_all(ad.mul(point_branch(q, target, tc, 4, pw), ad.Tensor(rng_fixed(10, 64)))),
                         [q, tc.scores, pw["fc1.w"], pw["fc2.w"]]),
        "voxel_branch": (lambda: ad.sum_all(ad.mul(voxel_branch(q.data, target, tc, spec, vw),
                                                   ad.Tensor(rng_fixed(10, 64)))),
                         [tc.scores, vw["fc1.w"], vw["fc2.w"]]),
    }


def _end_to_end_error():
    s = gen_dataset(1, 64, 0.3, 0.0, seed=5)[0]
    p1, p2, gt = (a[:16].astype(np.float64) for a in (s.p1, s.p2, s.gt_flow))
    cfg = ModelConfig(m=12, k=4, graph_k=8, detach_flow=False)
    params = ModelParams.init(cfg, seed=0).astype(np.float64)
    params["head.out.w"].data *= 100  # undo the small output init so every path carries gradient
    graphs = SceneGraphs.build(p1, p2, cfg.graph_k)
    main = [n for n in params if not n.startswith("refine.")]

    def loss():
        return loss_iter(iterate(p1, p2, params, 2, cfg, graphs), gt)

    with ad.Tape():
        out = loss()
    out.backward()
    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    for name in main:  # one sampled entry of every main-stage tensor
        t = params[name]
        j = int(rng.integers(t.data.size))
        analytic.append(t.grad.reshape(-1)[j])
        numeric.append(numeric_grad(loss, t, 1e-5, [j])[0])
    return rel_error(analytic, numeric), len(main)


def test_criterion_4_gradient_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_op, worst_name = 0.0, ""
    with ad.precision(np.float64):
        cases = {**_op_cases(rng), **_module_cases(rng)}
        for name, (fn, tensors) in cases.items():
            # all entries of small tensors, 200 sampled entries of large ones
            sampled = {i: rng.choice(t.data.size, 200, replace=False)
                       for i, t in enumerate(tensors) if t.data.size > 200}
            err = check_grads(fn, tensors, entries=sampled)
            if err > worst_op:
                worst_op, worst_name = err, name
        e2e, n_tensors = _end_to_end_error()
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-4 and e2e < 1e-3 and elapsed < 120
    report(4, "gradient suite", ok,
           f"{len(cases)} ops/blocks worst rel err {worst_op:.1e} ({worst_name}) < 1e-4; "
           f"end-to-end T=2 N=16 over {n_tensors} tensors rel err {e2e:.1e} < 1e-3; {elapsed:.1f} s (< 120 s)")
    assert ok


# --- 5 -------------------------------------------------------------------------

def test_criterion_5_gru_cases(report):
    cfg = ModelConfig(m=16, k=4, graph_k=4)
    w = {n: ad.Tensor(np.zeros_like(t.data)) for n, t in ModelParams.init(cfg).scope("gru").items()}
    rng = np.random.default_rng(5)
    h = ad.Tensor(rng.uniform(-1, 1, size=(9, 128)).astype(np.float32))
    halving = True
    for _ in range(5):
        nxt = gru_cell(h, ad.Tensor(rng.normal(size=(9, 195)).astype(np.float32)), w)
        halving &= np.array_equal(nxt.data, 0.5 * h.data)
        h = nxt
    bounded = True
    with ad.precision(np.float64):
        rw = {n: ad.Tensor(rng.normal(scale=2.0, size=t.shape)) for n, t in w.items()}
        h = ad.Tensor(rng.uniform(-1, 1, size=(4, 128)))
        for _ in range(1000):
            h = gru_cell(h, ad.Tensor(rng.normal(scale=3.0, size=(4, 195))), rw)
            bounded &= bool(np.isfinite(h.data).all() and np.abs(h.data).max() <= 1.0)
    ok = halving and bounded
    report(5, "GRU analytic cases", ok, f"zero weights halve h exactly: {halving}; |h| <= 1 over 1000 steps: {bounded}")
    assert ok


# --- 6 and 9 -----------------------------------------------------------------

def _dataset_epe(params, cfg, data, use_refine):
    per = [evaluate(predict(s.p1, s.p2, params, cfg, use_refine=use_refine), s.gt_flow) for s in data]
    return float(np.mean([m.epe for m in per]))


@pytest.fixture(scope="module")
def toy():
    data = gen_dataset(**TOY_DATA)
    baseline = float(np.mean([np.linalg.norm(s.gt_flow, axis=1).mean() for s in data]))
    return data, baseline


@pytest.fixture(scope="module")
def combined_run(toy):
    data, baseline = toy
    cfg = TrainConfig(**TOY)
    start = time.perf_counter()
    params, history = train_main(data, cfg)
    main_epe = _dataset_epe(params, cfg, data, use_refine=False)
    params, _ = train_refine(data, params, cfg)
    refined_epe = _dataset_epe(params, cfg, data, use_refine=True)
    elapsed = time.perf_counter() - start
    steps = len(history) * len(data)
    return dict(main_epe=main_epe, refined_epe=refined_epe, elapsed=elapsed, steps=steps, baseline=baseline)


def test_criterion_6_toy_convergence(report, combined_run):
    r = combined_run
    ratio = r["main_epe"] / r["baseline"]
    growth = r["refined_epe"] / r["main_epe"] - 1
    ok = r["steps"] >= 200 and ratio < 0.2 and growth <= 0.05 and r["elapsed"] < TOY_BUDGET_S
    report(6, "toy convergence", ok,
           f"{r['steps']} steps; EPE@T=32 {r['main_epe']:.4f} = {100 * ratio:.1f}% of zero-flow {r['baseline']:.4f} "
           f"(< 20%); refine {r['refined_epe']:.4f} ({100 * growth:+.1f}%, <= +5%); {r['elapsed']:.0f} s (< 900 s)")
    assert ok


def test_criterion_9_ablation(report, toy, combined_run):
    data, _ = toy
    epe = {"both": combined_run["main_epe"]}
    for mode in ("point", "voxel"):
        cfg = TrainConfig(**{**TOY, "corr_mode": mode})
        params, _ = train_main(data, cfg)
        epe[mode] = _dataset_epe(params, cfg, data, use_refine=False)
    limit = 1.1 * min(epe["point"], epe["voxel"])
    ok = epe["both"] <= limit
    report(9, "ablation hook", ok,
           f"EPE@T=32 point {epe['point']:.4f}, voxel {epe['voxel']:.4f}, combined {epe['both']:.4f} "
           f"(<= {limit:.4f})")
    assert ok


# --- 7 -------------------------------------------------------------------------

# (|gt|, |err| orthogonal to gt, strict, relax, outlier)
METRIC_CASES = [
    (0.5, 0.049, 1, 1, 0), (0.5, 0.05, 0, 1, 0), (0.5, 0.099, 0, 1, 1), (0.5, 0.1, 0, 0, 1),
    (4.0, 0.19, 1, 1, 0), (4.0, 0.2, 0, 1, 0), (4.0, 0.3, 0, 1, 0), (4.0, 0.31, 0, 1, 1),
    (4.0, 0.39, 0, 1, 1), (4.0, 0.4, 0, 0, 1),
]


def test_criterion_7_metric_boundaries(report):
    wrong = 0
    for g, e, strict, relax, outlier in METRIC_CASES:
        m = evaluate(np.array([[g, e, 0.0]]), np.array([[g, 0.0, 0.0]]))
        wrong += (m.epe, m.acc_strict, m.acc_relax, m.outliers) != (e, strict, relax, outlier)
    gt = np.array([[g, 0.0, 0.0] for g, *_ in METRIC_CASES])
    est = gt + np.array([[0.0, e, 0.0] for _, e, *_ in METRIC_CASES])
    m = evaluate(est, gt)
    expected = tuple(sum(c[i] for c in METRIC_CASES) / len(METRIC_CASES) for i in (2, 3, 4))
    exact = (m.acc_strict, m.acc_relax, m.outliers) == expected
    ok = wrong == 0 and exact
    report(7, "metric thresholds", ok,
           f"{len(METRIC_CASES)} boundary cases, {wrong} wrong; mixed-set fractions {expected} exact: {exact}")
    assert ok


# --- 8 -------------------------------------------------------------------------

def _full_run(root, capsys):
    root.mkdir()
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"m": 32, "k": 8, "graph_k": 8, "t_train": 3, "t_eval": 4, "epochs_main": 2,
                               "epochs_refine": 1, "seed": 13}))
    assert cli_main(["gen", "--out", str(root / "data"), "--scenes", "4", "--points", "96", "--seed", "13"]) == 0
    assert cli_main(["train", "--data", str(root / "data"), "--config", str(cfg), "--out", str(root / "main.ckpt")]) == 0
    assert cli_main(["train", "--data", str(root / "data"), "--config", str(cfg), "--out", str(root / "full.ckpt"),
                     "--stage", "refine", "--frozen", str(root / "main.ckpt")]) == 0
    capsys.readouterr()
    assert cli_main(["eval", "--data", str(root / "data"), "--ckpt", str(root / "full.ckpt"), "--iters", "4"]) == 0
    metrics = capsys.readouterr().out
    return (root / "main.ckpt").read_bytes(), (root / "full.ckpt").read_bytes(), metrics


def test_criterion_8_determinism(report, tmp_path, capsys):
    a = _full_run(tmp_path / "a", capsys)
    b = _full_run(tmp_path / "b", capsys)
    ok = a == b
    report(8, "determinism", ok, f"checkpoints ({len(a[1])} bytes) and metrics JSON identical: {ok}")
    assert ok
