import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ba_fixtures import K, object_problem, perturb
from jacobian_checks import CHECKS, worst_error
from semslam.bundle import (
    SamplingPlan,
    SolverConfig,
    build_sketch,
    evaluate,
    fit_ground_normal,
    load_snapshot,
    residual_ba2d,
    residual_ba3d,
    residual_bc,
    residual_nc1,
    residual_nc2,
    residual_tc1,
    residual_tc2,
    sample_pairs,
    save_snapshot,
    solve,
    total_cost,
)
from semslam.bundle.problem import _Layout, apply_step
from semslam.bundle.residuals import optimal_bound
from semslam.errors import BadDimensions, DegenerateConfiguration, MismatchedBody, NotEnoughPairs
from semslam.geometry import RigidMotion, compose, project, random_rotation


# residual examples


def test_ba2d_examples():
    rng = np.random.default_rng(0)
    pose = RigidMotion(random_rotation(rng), [0.1, -0.2, 5.0])
    X = rng.normal(size=3)
    assert np.allclose(residual_ba2d(pose, X, project(K, pose, X), K), 0.0)
    # principal ray: moving the point along the optical axis keeps it on (cx, cy)
    ident = RigidMotion.identity()
    assert np.allclose(residual_ba2d(ident, [0, 0, 7.0], [K.cx, K.cy], K), 0.0)
    assert np.allclose(residual_ba2d(ident, [0, 0, 2.0], [K.cx, K.cy], K), 0.0)
    for s in range(10):
        rng = np.random.default_rng(s)
        pose = RigidMotion(random_rotation(rng), rng.normal(size=3))
        Xc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 8)])
        X = pose.inverse().apply(Xc)
        px = rng.normal(size=2) * 10 + 300
        np.testing.assert_allclose(residual_ba2d(pose, X, px, K), px - project(K, pose, X), atol=1e-9)


def test_ba3d_examples():
    rng = np.random.default_rng(1)
    pose = RigidMotion(random_rotation(rng), rng.normal(size=3))
    X = rng.normal(size=3)
    assert np.allclose(residual_ba3d(pose, X, pose.apply(X)), 0.0)
    m = rng.normal(size=3)
    np.testing.assert_allclose(residual_ba3d(RigidMotion.identity(), X, m), m - X)
    np.testing.assert_allclose(residual_ba3d(pose, X, m), m - (pose.rotation @ X + pose.translation), atol=1e-12)


def test_nc_examples():
    n = np.array([0.0, 0.0, 1.0])
    assert residual_nc1([1.0, 2.0, 0.0], n) == pytest.approx(0.0, abs=1e-15)
    assert abs(residual_nc1([0.0, 0.0, -3.0], n)) == pytest.approx(1.0)
    d = [np.cos(np.deg2rad(30)), 0.0, np.sin(np.deg2rad(30))]
    assert residual_nc1(np.multiply(d, 4.0), n) == pytest.approx(0.5, abs=1e-12)
    assert residual_nc1([0.0, 0.0, 0.0], n) == 0.0
    t = [0.3, -1.0, 0.7]
    assert residual_nc2(t, [n, n, n]) == pytest.approx(residual_nc1(t, n), abs=1e-15)
    assert residual_nc2(t, [n]) == residual_nc1(t, n)
    a = np.array([np.sin(0.1), 0.0, np.cos(0.1)])
    b = np.array([-np.sin(0.1), 0.0, np.cos(0.1)])
    assert residual_nc2([1.0, 0.0, 0.0], [a, b]) == pytest.approx(0.0, abs=1e-15)


def test_tc_examples():
    np.testing.assert_array_equal(residual_tc1([1.0, 0, 0], [0, 1.0, 0]), [0, 0, -1])
    assert np.allclose(residual_tc1([1.0, 2, 3], [2.0, 4, 6]), 0.0)
    assert np.allclose(residual_tc1([1.0, 2, 3], [7.5, 15, 22.5]), 0.0)
    np.testing.assert_array_equal(residual_tc2([0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]), [1, 0, 0])
    assert np.allclose(residual_tc2([1, 1, 1], [2, 3, 4], [3, 5, 7]), 0.0)
    assert np.allclose(residual_tc2([1, 1, 1], [1, 1, 1], [1, 1, 1]), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(0.1, 10))
def test_tc1_direction_only(seed, sa, sb):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3))
    ua, ub = a / np.linalg.norm(a), b / np.linalg.norm(b)
    r = residual_tc1(sa * ua, sb * ub)
    # the cross product of the normalized directions is unchanged by rescaling
    np.testing.assert_allclose(r / (sa * sb), residual_tc1(ua, ub), atol=1e-12)


def test_bc_slack_is_absorbed():
    delta = np.array([1.0, 1.0, 1.0])
    diff = np.array([0.4, -0.9, 0.2])
    b = optimal_bound("BC1", diff, delta)
    assert np.allclose(residual_bc("BC1", diff, np.zeros(3), b, delta), 0.0)
    diffs = np.array([0.3, 0.3, 0.3])
    assert np.allclose(residual_bc("BC3", diffs + 5, [5, 5, 5], diffs, delta), 0.0)


@pytest.mark.parametrize("d", [0.5, 2.0, 2.9, 3.1, 6.0])
def test_bc4_scalar_optimum(d):
    delta = 1.0
    b = optimal_bound("BC4", [d, 0, 0], delta)
    assert b == pytest.approx(min(delta, d / 3))
    grid = np.linspace(-delta, delta, 200_001)
    cost = (d - grid) ** 2 + 2 * grid**2
    assert b == pytest.approx(grid[np.argmin(cost)], abs=1e-5)
    r = residual_bc("BC4", [d, 0, 0], [0, 0, 0], b, delta)
    assert np.sum(r**2) == pytest.approx(cost.min(), abs=1e-8)


def test_bc_mismatched_body():
    with pytest.raises(MismatchedBody):
        residual_bc("BC1", np.zeros(3), np.ones(3), np.zeros(3), 1.0, body_i=0, body_j=1)
    problem, _, _ = object_problem(bc="BC1")
    problem.point_body[problem.pairs[0, 0]] = 7
    with pytest.raises(MismatchedBody):
        problem.validate()


@pytest.mark.parametrize("family", sorted(CHECKS))
def test_jacobians_match_finite_differences(family):
    assert worst_error(family, n_points=100) < 1e-5


@pytest.mark.parametrize("variants", [("NC1", "TC1", "BC1"), ("NC2", "TC2", "BC2"), (None, "TC1", "BC3"),
                                      ("NC1", None, "BC4")])
def test_assembled_jacobian_matches_finite_differences(variants):
    nc, tc, bc = variants
    problem, _, _ = object_problem(seed=3, n_frames=4, n_points=6, noise=0.5, nc=nc, tc=tc, bc=bc, n_pairs=5)
    problem.bounds = np.random.default_rng(0).normal(size=problem.bounds.shape) * 0.3
    cfg = SolverConfig(w_bc=0.7, w_nc=2.0, w_tc=1.5)
    layout = _Layout(problem, cfg)
    r0, J, _, _, _ = evaluate(problem, cfg, True, layout)
    J = J.toarray()
    Jf = np.zeros_like(J)
    h = 1e-6
    for c in range(layout.n):
        e = np.zeros(layout.n)
        e[c] = h
        rp = evaluate(apply_step(problem, layout, e), cfg, False, layout)[0]
        rm = evaluate(apply_step(problem, layout, -e), cfg, False, layout)[0]
        Jf[:, c] = (rp - rm) / (2 * h)
    assert np.linalg.norm(J - Jf) / np.linalg.norm(Jf) < 1e-5


# solver


def _full(problem_kwargs=None):
    kw = dict(nc="NC1", tc="TC2", bc="BC1")
    kw.update(problem_kwargs or {})
    return object_problem(**kw)


def test_solve_at_ground_truth_converges_immediately():
    problem, _, _ = object_problem()
    out, rep = solve(problem, SolverConfig())
    assert len(rep.iterations) - 1 <= 2
    assert rep.final_cost < 1e-12


def test_solve_recovers_perturbed_poses():
    problem, body, X = object_problem(seed=2)
    start = perturb(problem, seed=9, rot_deg=1.0, trans=0.05)
    out, rep = solve(start, SolverConfig(max_iters=50))
    est = np.array([p.translation for p in out.poses])
    ref = np.array([p.translation for p in body])
    assert np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))) < 1e-6
    assert rep.final_cost < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_solve_never_increases_cost(seed):
    problem, _, _ = _full({"seed": seed, "noise": 0.5})
    start = perturb(problem, seed=seed, rot_deg=3, trans=0.3, point=0.2)
    out, rep = solve(start, SolverConfig(max_iters=15))
    totals = [it["total"] for it in rep.iterations]
    assert all(b < a for a, b in zip(totals, totals[1:]))
    assert rep.final_cost <= rep.initial_cost
    assert total_cost(out, SolverConfig())[0] == pytest.approx(rep.final_cost)


def test_report_breakdown_sums_to_total():
    problem, _, _ = _full({"noise": 0.3})
    _, rep = solve(perturb(problem, 1), SolverConfig(max_iters=3))
    for it in rep.iterations:
        assert it["total"] == pytest.approx(sum(it[k] for k in ("ba2d", "ba3d", "nc", "tc", "bc")))
    assert all(rep.iterations[0][k] > 0 for k in ("ba2d", "ba3d", "nc", "tc", "bc"))


def test_gauge_invariance():
    for seed in range(3):
        problem, _, _ = _full({"seed": seed, "noise": 0.4, "tc": "TC1"})
        problem = perturb(problem, seed, rot_deg=2, trans=0.2)
        rng = np.random.default_rng(100 + seed)
        G = RigidMotion(random_rotation(rng), rng.normal(size=3) * 5)
        moved = problem.copy()
        moved.prefixes = [compose(C, G.inverse()) for C in problem.prefixes]
        moved.poses = [compose(G, B) for B in problem.poses]
        moved.normals = problem.normals @ G.rotation.T
        cfg = SolverConfig()
        a, ca = total_cost(problem, cfg)
        b, cb = total_cost(moved, cfg)
        assert abs(a - b) <= 1e-9 * max(1.0, a)
        for k in ca:
            assert abs(ca[k] - cb[k]) <= 1e-9 * max(1.0, ca[k])


def test_zero_weights_reproduce_plain_ba_bit_for_bit():
    full, _, _ = _full({"noise": 0.5, "seed": 4})
    plain, _, _ = object_problem(noise=0.5, seed=4)
    start_full = perturb(full, 3, point=0.1)
    start_plain = perturb(plain, 3, point=0.1)
    cfg0 = SolverConfig(w_nc=0.0, w_tc=0.0, w_bc=0.0, max_iters=10)
    a, ra = solve(start_full, cfg0)
    b, rb = solve(start_plain, cfg0)
    assert np.array_equal(a.points, b.points)
    for p, q in zip(a.poses, b.poses):
        assert np.array_equal(p.rotation, q.rotation) and np.array_equal(p.translation, q.translation)
    assert [it["total"] for it in ra.iterations] == [it["total"] for it in rb.iterations]


def test_flagged_poses_drop_trajectory_terms():
    problem, _, _ = _full({"noise": 0.3})
    base = total_cost(problem, SolverConfig())[1]
    problem.flagged = list(range(len(problem.poses)))
    flagged = total_cost(problem, SolverConfig())[1]
    assert flagged["tc"] == 0 and flagged["nc"] == 0
    assert flagged["ba2d"] == base["ba2d"]


def test_non_positive_depth_is_flagged_not_raised():
    problem, _, _ = object_problem()
    problem.points[0] = problem.poses[0].inverse().apply(
        problem.prefixes[0].inverse().apply(np.array([[0.0, 0.0, -1.0]])))[0]
    _, _, _, flags, _ = evaluate(problem, SolverConfig(), False)
    assert flags["nonPositiveDepth"] >= 1


def test_snapshot_roundtrip(tmp_path):
    problem, _, _ = _full({"noise": 0.2})
    out, rep = solve(perturb(problem, 0), SolverConfig(max_iters=3))
    path = tmp_path / "ba.json"
    save_snapshot(path, out, rep, SolverConfig())
    back, rep2, cfg = load_snapshot(path)
    assert rep2.final_cost == rep.final_cost
    np.testing.assert_array_equal(back.points, out.points)
    np.testing.assert_array_equal(back.bounds, out.bounds)
    assert total_cost(back, cfg)[0] == total_cost(out, cfg)[0]
    csv_path = tmp_path / "cost.csv"
    rep.write_csv(csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "iter,total,ba2d,ba3d,nc,tc,bc"
    assert len(lines) == len(rep.iterations) + 1


# pair sampling


def test_strat1_exhaustive_small():
    pts = np.random.default_rng(0).normal(size=(3, 3))
    pairs = sample_pairs(pts, SamplingPlan("Strat1", 3, seed=5))
    assert sorted(pairs) == [(0, 1), (0, 2), (1, 2)]


def test_strat2_picks_far_end_on_a_line():
    pts = np.column_stack([np.arange(6.0), np.zeros(6), np.zeros(6)])
    ends_seen = set()
    for seed in range(30):
        anchor = int(np.random.default_rng(seed).permutation(6)[0])
        partner = 5 if anchor < 2.5 else 0
        (pair,) = sample_pairs(pts, SamplingPlan("Strat2", 1, seed=seed))
        assert pair == (min(anchor, partner), max(anchor, partner))
        if anchor in (0, 5):
            ends_seen.add(anchor)
    assert ends_seen == {0, 5}


def _strat3_by_hand(points, t, seed):
    """Literal replay of the rule: shuffled anchors, partners by descending distance."""
    rng = np.random.default_rng(seed)
    anchors = list(rng.permutation(len(points)))
    paired, out = set(), []
    for a in anchors:
        if len(out) == t:
            break
        others = [j for j in range(len(points)) if j != a]
        others.sort(key=lambda j: (-float(np.sum((points[j] - points[a]) ** 2)), j))
        for j in others:
            if j not in paired:
                out.append((min(a, j), max(a, j)))
                paired.update((a, j))
                break
    return out


def test_strat3_matches_hand_simulation():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [7.0, 0, 0]])
    for seed in range(20):
        got = sample_pairs(pts, SamplingPlan("Strat3", 2, seed=seed))
        assert got == _strat3_by_hand(pts, 2, seed)
    # first pair: the first shuffled anchor with its farthest point
    order = list(np.random.default_rng(0).permutation(4))
    first = order[0]
    far = max(range(4), key=lambda j: (abs(pts[j, 0] - pts[first, 0]), -j))
    assert sample_pairs(pts, SamplingPlan("Strat3", 2, seed=0))[0] == (min(first, far), max(first, far))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["Strat1", "Strat2", "Strat3"]), st.integers(2, 12), st.integers(0, 1000), st.data())
def test_pairs_distinct_and_deterministic(strategy, n, seed, data):
    total = n * (n - 1) // 2
    t = data.draw(st.integers(1, total))
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    pairs = sample_pairs(pts, SamplingPlan(strategy, t, seed))
    assert len(pairs) == t == len(set(pairs))
    assert all(i < j for i, j in pairs)
    assert pairs == sample_pairs(pts, SamplingPlan(strategy, t, seed))


def test_not_enough_pairs():
    with pytest.raises(NotEnoughPairs):
        sample_pairs(np.zeros((3, 3)), SamplingPlan("Strat1", 4))
    with pytest.raises(NotEnoughPairs):
        sample_pairs(np.zeros((1, 3)), SamplingPlan("Strat3", 1))


# sketch


def test_selection_sketch_full_is_exact():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(50, 4))
    S = build_sketch(50, 50, seed=3)
    assert sorted(S.rows) == list(range(50))
    assert np.linalg.norm(S.apply(A)) == np.linalg.norm(A)


def test_sketch_bad_dimensions():
    with pytest.raises(BadDimensions):
        build_sketch(10, 0, seed=0)
    with pytest.raises(BadDimensions):
        build_sketch(10, 11, seed=0)


def sign_sketch_ratios(m=2000, t=400, n_seeds=200, d=10):
    rng = np.random.default_rng(12345)
    A = rng.normal(size=(m, d))
    x = rng.normal(size=d)
    B = rng.normal(size=m)
    full = np.linalg.norm(A @ x - B)
    out = []
    for s in range(n_seeds):
        S = build_sketch(m, t, seed=s, mode="sign")
        out.append(np.linalg.norm(S.apply(A) @ x - S.apply(B)) / full)
    return np.array(out)


def test_sign_sketch_embedding_property():
    ratios = sign_sketch_ratios()
    assert np.mean((ratios >= 0.5) & (ratios <= 1.5)) >= 0.95


def test_sign_sketch_structure():
    S = build_sketch(30, 7, seed=1, mode="sign").matrix().toarray()
    assert S.shape == (7, 30)
    assert np.all(np.sum(S != 0, axis=0) == 1)
    assert set(np.unique(S)) <= {-1.0, 0.0, 1.0}


# ground normal


def test_ground_normal_exact_plane():
    rng = np.random.default_rng(0)
    P = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-5, 5, 50), np.zeros(50)])
    np.testing.assert_allclose(fit_ground_normal(P), [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(fit_ground_normal(P, reference=[0, 0, -1]), [0, 0, -1], atol=1e-12)


def test_ground_normal_noisy_plane():
    rng = np.random.default_rng(7)
    P = np.column_stack([rng.uniform(-10, 10, 500), rng.uniform(-10, 10, 500), rng.normal(0, 0.01, 500)])
    n = fit_ground_normal(P)
    assert np.degrees(np.arccos(min(1.0, n @ [0, 0, 1]))) < 0.5
    top = fit_ground_normal(P, "ransacTopM", seed=1, m=4)
    assert top.shape == (4, 3)
    np.testing.assert_allclose(np.linalg.norm(top, axis=1), 1.0)
    assert np.all(np.degrees(np.arccos(np.clip(top @ [0, 0, 1], -1, 1))) < 1.0)


def test_ground_normal_collinear():
    P = np.array([[0.0, 0, 0], [1.0, 1, 0], [2.0, 2, 0]])
    with pytest.raises(DegenerateConfiguration):
        fit_ground_normal(P)
    with pytest.raises(DegenerateConfiguration):
        fit_ground_normal(P, "ransacTopM")


@pytest.mark.parametrize("variant", ["BC1", "BC2", "BC3", "BC4"])
def test_initial_bounds_match_inner_minimizer(variant):
    from semslam.bundle import initial_bounds

    problem, _, _ = object_problem(seed=2, bc=variant, n_pairs=20)
    delta = np.array([1.5, 1.2, 1.0])
    u = initial_bounds(problem, delta, limit=1 - 1e-12)
    d = problem.points[problem.pairs[:, 0]] - problem.points[problem.pairs[:, 1]]
    if variant in ("BC3", "BC4"):
        d = d.mean(axis=0, keepdims=True)
    scale = delta if variant in ("BC1", "BC3") else delta.min()
    for row, diff in zip(np.tanh(u) * scale, d):
        np.testing.assert_allclose(row, optimal_bound(variant, diff, delta), atol=1e-9)
