import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crf_oracle import brute_energy, exact_marginals
from semslam.errors import ShapeMismatch, SingularCovariance
from semslam.geometry import CameraIntrinsics, RigidMotion, back_project, project
from semslam.scene import FrameObservation
from semslam.segmentation import (
    CompatibilityMatrix,
    JointLabeling,
    MarginalFields,
    PairwiseParams,
    UnaryField,
    decode,
    energy,
    feature_static_costs,
    joint_unary,
    mahalanobis_sq,
    mean_field_infer,
    motion_unary,
    pairwise_motion,
    pairwise_object,
    render_ppm,
)

WEAK = PairwiseParams(
    w_smooth=0.05, w_appearance=0.05, w_motion=0.1,
    theta_gamma=1.0, theta_alpha=1.0, theta_beta=1.0, theta_flow=1.0, radius=2.0,
)
OFF = PairwiseParams(w_smooth=0.0, w_appearance=0.0, w_motion=0.0)


def softmax_neg(c):
    e = np.exp(-(c - c.min(-1, keepdims=True)))
    return e / e.sum(-1, keepdims=True)


# --- motion unary -------------------------------------------------------------

def test_mahalanobis_examples():
    assert mahalanobis_sq(np.zeros(2), np.eye(2)) == 0.0
    assert mahalanobis_sq(np.array([1.0, 0.0]), np.eye(2)) == pytest.approx(1.0)
    assert mahalanobis_sq(np.array([3.0, 4.0]), np.diag([1.0, 4.0])) == pytest.approx(13.0)


def test_singular_covariance_rejected():
    with pytest.raises(SingularCovariance):
        mahalanobis_sq(np.ones(2), np.diag([1.0, 0.0]))
    with pytest.raises(SingularCovariance):
        mahalanobis_sq(np.ones(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5))
def test_mahalanobis_rotation_invariant(angle, rx, ry, s1, s2):
    c, s = np.cos(angle), np.sin(angle)
    Q = np.array([[c, -s], [s, c]])
    cov = np.diag([s1, s2])
    r = np.array([rx, ry])
    cov_rot = Q @ cov @ Q.T
    cov_rot = 0.5 * (cov_rot + cov_rot.T)
    assert mahalanobis_sq(Q @ r, cov_rot) == pytest.approx(mahalanobis_sq(r, cov), rel=1e-9, abs=1e-12)


def _single_feature_frame(K, motion, pixel, depth, flow_offset):
    X = back_project(K, pixel, depth)
    nxt = project(K, motion, X)
    flow = nxt - pixel + flow_offset
    return FrameObservation(
        0, np.array([0]), np.array([pixel]), np.array([depth]), np.array([flow]), np.array([X])
    )


def test_feature_static_costs():
    K = CameraIntrinsics(500, 500, 320, 240)
    M = RigidMotion.from_rotvec([0, 0.01, 0], [0.1, 0, 0.5])
    f0 = _single_feature_frame(K, M, np.array([300.0, 200.0]), 10.0, np.zeros(2))
    assert feature_static_costs(f0, M, K, np.eye(2))[0] == pytest.approx(0.0, abs=1e-12)
    # measured endpoint off by (3, 4): residual predicted - measured = (-3, -4)
    f1 = _single_feature_frame(K, M, np.array([300.0, 200.0]), 10.0, np.array([3.0, 4.0]))
    assert feature_static_costs(f1, M, K, np.diag([1.0, 4.0]))[0] == pytest.approx(13.0)


def test_motion_unary_raster():
    K = CameraIntrinsics(500, 500, 320, 240)
    M = RigidMotion(np.eye(3), [0, 0, 1.0])
    f = _single_feature_frame(K, M, np.array([15.0, 5.0]), 10.0, np.array([1.0, 0.0]))
    u = motion_unary(f, M, K, np.eye(2), (640, 480), (64, 48), tau=4.0)
    assert u.shape == (48, 64, 2)
    assert u[0, 1, 0] == pytest.approx(1.0)
    assert u[0, 1, 1] == 4.0
    # cells with no feature are uninformative
    assert np.all(u[1:] == 0.0)


# --- joint unary --------------------------------------------------------------

def test_joint_unary_zero_lambda_is_sum():
    rng = np.random.default_rng(0)
    u = UnaryField(rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 4, 2)))
    ju = joint_unary(u, CompatibilityMatrix.zeros(3))
    np.testing.assert_allclose(ju, u.object_unary[..., :, None] + u.motion_unary[..., None, :])


def test_joint_unary_single_active_term():
    classes = ["road", "car"]
    u = UnaryField(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))
    lam = CompatibilityMatrix.from_mapping(classes, {"car": [0.0, -1.0]})
    ju = joint_unary(u, lam)[0, 0]
    assert np.unravel_index(np.argmin(ju), ju.shape) == (1, 1)


def test_joint_unary_enumeration():
    u = UnaryField(np.array([[[0.3, 1.2]]]), np.array([[[0.7, 2.0]]]))
    lam = CompatibilityMatrix([[-0.5, 1.0], [0.25, -0.75]])
    ju = joint_unary(u, lam)[0, 0]
    expected = np.array([[0.3 + 0.7 - 0.5, 0.3 + 2.0 + 1.0], [1.2 + 0.7 + 0.25, 1.2 + 2.0 - 0.75]])
    np.testing.assert_allclose(ju, expected)


def test_joint_unary_shape_mismatch():
    u = UnaryField(np.zeros((2, 2, 3)), np.zeros((2, 2, 2)))
    with pytest.raises(ShapeMismatch):
        joint_unary(u, CompatibilityMatrix.zeros(2))


def test_compatibility_range():
    with pytest.raises(ValueError):
        CompatibilityMatrix([[0.0, 1.5], [0.0, 0.0]])


# --- pairwise -----------------------------------------------------------------

def test_pairwise_object_examples():
    p = PairwiseParams(w_smooth=0.7, w_appearance=0.4)
    assert pairwise_object(1, 1, (0, 0), (3, 4), p, 1.0, 2.0) == 0.0
    assert pairwise_object(0, 1, (2, 2), (2, 2), p, 5.0, 5.0) == pytest.approx(1.1)
    assert pairwise_object(0, 1, (0, 0), (1e6, 0), p, 5.0, 5.0) < 1e-12


def test_pairwise_motion_examples():
    p = PairwiseParams(w_motion=0.8, theta_flow=2.0)
    assert pairwise_motion(0, 0, (1, 1), (5, 5), p) == 0.0
    assert pairwise_motion(0, 1, (1, 1), (1, 1), p) == pytest.approx(0.8)
    assert pairwise_motion(1, 0, (0, 0), (0, 2.0), p) == pytest.approx(0.8 * np.exp(-1))


# --- mean field -----------------------------------------------------------------

def test_decoupled_crf_is_softmax_in_one_iteration():
    rng = np.random.default_rng(1)
    u = UnaryField(rng.normal(size=(5, 6, 4)), rng.normal(size=(5, 6, 2)))
    m = mean_field_infer(u, CompatibilityMatrix.zeros(4), OFF, max_iters=10, tol=1e-9)
    assert m.iterations == 1
    np.testing.assert_allclose(m.q_object, softmax_neg(u.object_unary), atol=1e-12)
    np.testing.assert_allclose(m.q_motion, softmax_neg(u.motion_unary), atol=1e-12)


def test_uniform_unaries_give_uniform_marginals():
    u = UnaryField(np.zeros((6, 6, 3)), np.zeros((6, 6, 2)))
    p = PairwiseParams(w_smooth=1.0, w_appearance=0.0, w_motion=0.0, radius=3)
    m = mean_field_infer(u, CompatibilityMatrix.zeros(3), p, max_iters=20)
    np.testing.assert_allclose(m.q_object, 1 / 3, atol=1e-12)
    np.testing.assert_allclose(m.q_motion, 0.5, atol=1e-12)


def test_marginals_normalized_every_iteration():
    rng = np.random.default_rng(2)
    u = UnaryField(rng.uniform(0, 3, (12, 10, 4)), rng.uniform(0, 5, (12, 10, 2)))
    p = PairwiseParams(w_smooth=1.0, w_appearance=1.0, w_motion=1.0, radius=3)
    app = rng.uniform(0, 10, (12, 10))
    flow = rng.normal(size=(12, 10, 2))
    flow[0, 0] = np.nan
    seen = []

    def check(it, marg):
        assert marg.is_normalized(1e-9)
        seen.append(it)

    mean_field_infer(u, CompatibilityMatrix(rng.uniform(-1, 1, (4, 2))), p, app, flow,
                     max_iters=8, tol=0.0, callback=check)
    assert seen == list(range(1, 9))


def test_mean_field_two_pixel_chain_matches_enumeration():
    u = UnaryField(np.array([[[0.2, 1.0], [0.9, 0.1]]]), np.array([[[0.0, 0.6], [1.1, 0.3]]]))
    lam = CompatibilityMatrix.zeros(2)
    flow = np.array([[[0.0, 0.0], [0.5, 0.0]]])
    app = np.array([[1.0, 1.3]])
    m = mean_field_infer(u, lam, WEAK, app, flow, max_iters=100, tol=1e-12)
    qo, qm, _ = exact_marginals(u, lam.values, WEAK, app, flow)
    assert 0.5 * np.abs(m.q_object - qo).sum(-1).max() < 1e-3
    assert 0.5 * np.abs(m.q_motion - qm).sum(-1).max() < 1e-3


def test_decode_agrees_with_exact_map_in_weak_regime():
    rng = np.random.default_rng(3)
    for _ in range(30):
        # margins > 1 nat between best and second-best label in every cell
        best_o = rng.integers(0, 2, (2, 2))
        best_m = rng.integers(0, 2, (2, 2))
        uo = np.full((2, 2, 2), 0.0)
        um = np.full((2, 2, 2), 0.0)
        r, c = np.indices((2, 2))
        uo[r, c, 1 - best_o] = rng.uniform(1.2, 3.0, (2, 2))
        um[r, c, 1 - best_m] = rng.uniform(1.2, 3.0, (2, 2))
        u = UnaryField(uo, um)
        lam = CompatibilityMatrix(rng.uniform(-0.05, 0.05, (2, 2)))
        flow = rng.normal(size=(2, 2, 2))
        app = rng.uniform(0, 2, (2, 2))
        lab = decode(mean_field_infer(u, lam, WEAK, app, flow, max_iters=50, tol=1e-10))
        _, _, (xs, ys) = exact_marginals(u, lam.values, WEAK, app, flow)
        assert tuple(lab.object_labels.ravel()) == xs
        assert tuple(lab.motion_labels.ravel()) == ys


# --- decode / energy -------------------------------------------------------------

def test_decode_one_hot_and_ties():
    qo = np.array([[[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]]])
    qm = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    lab = decode(MarginalFields(qo, qm))
    np.testing.assert_array_equal(lab.object_labels, [[1, 0]])
    np.testing.assert_array_equal(lab.motion_labels, [[0, 0]])


def test_decode_decoupled_equals_unary_argmin():
    rng = np.random.default_rng(4)
    u = UnaryField(rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 2)))
    lab = decode(mean_field_infer(u, CompatibilityMatrix.zeros(3), OFF))
    np.testing.assert_array_equal(lab.object_labels, u.object_unary.argmin(-1))
    np.testing.assert_array_equal(lab.motion_labels, u.motion_unary.argmin(-1))


def test_energy_all_zero():
    u = UnaryField(np.zeros((3, 3, 2)), np.zeros((3, 3, 2)))
    lab = JointLabeling(np.array([[0, 1, 0]] * 3), np.array([[1, 0, 1]] * 3))
    assert energy(lab, u, CompatibilityMatrix.zeros(2), OFF) == 0.0


def test_energy_two_pixel_hand_sum():
    p = PairwiseParams(w_smooth=0.3, theta_gamma=1.0, w_appearance=0.2, theta_alpha=2.0,
                       theta_beta=1.0, w_motion=0.5, theta_flow=2.0, radius=1.0)
    u = UnaryField(np.array([[[0.1, 0.4], [0.7, 0.2]]]), np.array([[[0.3, 0.9], [0.6, 0.05]]]))
    lam = CompatibilityMatrix([[0.1, -0.2], [0.3, 0.4]])
    app = np.array([[1.0, 2.0]])
    flow = np.array([[[0.0, 0.0], [3.0, 4.0]]])
    lab = JointLabeling(np.array([[0, 1]]), np.array([[1, 0]]))
    unary_terms = (0.1 + 0.9 - 0.2) + (0.2 + 0.6 + 0.3)
    p_ij = 0.3 * np.exp(-0.5) + 0.2 * np.exp(-1 / 8 - 1 / 2)
    g_ij = 0.5 * np.exp(-5 / 2)
    expected = unary_terms + p_ij + g_ij
    assert energy(lab, u, lam, p, app, flow) == pytest.approx(expected, rel=1e-12)
    assert brute_energy((0, 1), (1, 0), u, lam.values, p, app, flow) == pytest.approx(expected, rel=1e-12)


def test_energy_matches_brute_force_on_grid():
    rng = np.random.default_rng(5)
    u = UnaryField(rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 2)))
    lam = CompatibilityMatrix(rng.uniform(-1, 1, (3, 2)))
    p = PairwiseParams(w_smooth=0.4, w_appearance=0.3, w_motion=0.6, radius=2.0)
    app = rng.uniform(0, 3, (3, 3))
    flow = rng.normal(size=(3, 3, 2))
    for _ in range(10):
        xs = rng.integers(0, 3, 9)
        ys = rng.integers(0, 2, 9)
        lab = JointLabeling(xs.reshape(3, 3), ys.reshape(3, 3))
        assert energy(lab, u, lam, p, app, flow) == pytest.approx(
            brute_energy(tuple(xs), tuple(ys), u, lam.values, p, app, flow), rel=1e-10
        )


def test_decoded_energy_beats_random_labelings():
    rng = np.random.default_rng(6)
    H = W = 16
    truth = np.zeros((H, W), int)
    truth[4:12, 5:11] = 1
    uo = rng.uniform(0, 1, (H, W, 2))
    uo[np.arange(H)[:, None], np.arange(W)[None, :], truth] -= 1.0
    um = rng.uniform(0, 1, (H, W, 2))
    um[np.arange(H)[:, None], np.arange(W)[None, :], truth] -= 1.0
    u = UnaryField(uo, um)
    lam = CompatibilityMatrix([[-0.5, 0.5], [0.2, -0.4]])
    p = PairwiseParams(w_smooth=0.3, w_appearance=0.0, w_motion=0.3, radius=2.0)
    flow = np.where(truth[..., None] == 1, 5.0, 0.0) * np.ones((H, W, 2))
    lab = decode(mean_field_infer(u, lam, p, flow=flow, max_iters=30))
    e = energy(lab, u, lam, p, flow=flow)
    for _ in range(100):
        rand = JointLabeling(rng.integers(0, 2, (H, W)), rng.integers(0, 2, (H, W)))
        assert e <= energy(rand, u, lam, p, flow=flow)


def test_raising_moving_cost_never_adds_moving_pixels():
    rng = np.random.default_rng(7)
    p = PairwiseParams(w_smooth=0.3, w_appearance=0.2, w_motion=0.4, radius=2.0)
    for _ in range(10):
        u = UnaryField(rng.uniform(0, 2, (10, 10, 3)), rng.uniform(0, 2, (10, 10, 2)))
        app = rng.uniform(0, 2, (10, 10))
        flow = rng.normal(size=(10, 10, 2))
        base = rng.uniform(-1, 0.5, (3, 2))
        for cls in range(3):
            counts = []
            for value in np.linspace(-1, 1, 6):
                lam = base.copy()
                lam[cls, 1] = value
                lab = decode(mean_field_infer(u, CompatibilityMatrix(lam), p, app, flow, max_iters=30))
                counts.append(int(np.sum((lab.object_labels == cls) & (lab.motion_labels == 1))))
            assert all(b <= a for a, b in zip(counts, counts[1:])), counts


def test_render_ppm():
    lab = JointLabeling(np.array([[0, 1], [2, 3]]), np.array([[0, 1], [0, 0]]))
    data = render_ppm(lab, ["road", "car", "vegetation", "sky"])
    assert data.startswith(b"P6\n2 2\n255\n")
    assert len(data) == len(b"P6\n2 2\n255\n") + 12
    # moving car cell is blended halfway to red
    body = data[len(b"P6\n2 2\n255\n"):]
    assert tuple(body[3:6]) == ((0 + 255) // 2, 0, 142 // 2)
