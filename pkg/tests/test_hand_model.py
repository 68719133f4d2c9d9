import numpy as np
import pytest

from handgcat.graph import PARENTS
from handgcat.hand_model import (ARTICULATED, NUM_VERTS, HandModel, ManoParams, default_hand_model,
                                 lbs_forward, rodrigues, rodrigues_np, rodrigues_t)
from handgcat.tensor import Tensor


@pytest.fixture(scope="module")
def hand():
    return default_hand_model()


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_of(R):
    angle = np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (2 * np.sin(angle))
    return axis * angle


class TestRodrigues:
    def test_zero(self):
        assert np.array_equal(rodrigues([0.0, 0.0, 0.0]), np.eye(3))

    def test_half_turn_about_x(self):
        np.testing.assert_allclose(rodrigues([np.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-15)

    def test_orthonormal_over_seeds(self):
        for seed in range(1000):
            r = np.random.default_rng(seed).normal(size=3) * 2
            R = rodrigues(r)
            assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
            assert abs(np.linalg.det(R) - 1) < 1e-9

    def test_axis_is_fixed_and_angle_matches(self, rng):
        r = rng.normal(size=3)
        r *= rng.uniform(0.1, 3.0) / np.linalg.norm(r)   # keep the angle inside (0, pi)
        R = rodrigues(r)
        np.testing.assert_allclose(R @ r, r, atol=1e-12)
        assert np.arccos((np.trace(R) - 1) / 2) == pytest.approx(np.linalg.norm(r), abs=1e-12)

    def test_small_angle_branch_continuous(self):
        r = np.array([3e-9, -1e-9, 2e-9])
        np.testing.assert_allclose(rodrigues(r), np.eye(3) + np.array(
            [[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]]), atol=1e-16)

    def test_tensor_version_matches(self, rng):
        r = rng.normal(size=(4, 5, 3))
        np.testing.assert_allclose(rodrigues_t(Tensor(r)).data, rodrigues_np(r), atol=1e-14)

    def test_gradient_at_zero(self):
        # d R / d r_k at 0 is the generator skew(e_k)
        r = Tensor(np.zeros(3), requires_grad=True)
        G = np.arange(9.0).reshape(3, 3)
        (rodrigues_t(r) * Tensor(G)).sum().backward()
        want = [G[2, 1] - G[1, 2], G[0, 2] - G[2, 0], G[1, 0] - G[0, 1]]
        np.testing.assert_allclose(r.grad, want, atol=1e-12)


class TestHandModel:
    def test_shapes(self, hand):
        assert hand.template_vertices.shape == (NUM_VERTS, 3)
        assert hand.shape_basis.shape == (10, NUM_VERTS, 3)
        assert hand.joint_regressor.shape == (21, NUM_VERTS)
        assert hand.skinning_weights.shape == (NUM_VERTS, 21)

    def test_row_stochastic(self, hand):
        assert np.abs(hand.joint_regressor.sum(1) - 1).max() <= 1e-9
        assert np.abs(hand.skinning_weights.sum(1) - 1).max() <= 1e-9
        assert hand.skinning_weights.min() >= 0

    def test_tree_matches_graph(self, hand):
        assert tuple(hand.parents) == PARENTS
        assert len(ARTICULATED) == 16

    def test_seeded_and_versioned(self, hand):
        other = HandModel.generate(hand.seed)
        assert np.array_equal(other.shape_basis, hand.shape_basis)
        assert np.array_equal(other.template_vertices, hand.template_vertices)
        assert not np.array_equal(HandModel.generate(hand.seed + 1).shape_basis, hand.shape_basis)

    def test_save_load(self, hand, tmp_path):
        hand.save(tmp_path / "hand")
        back = HandModel.load(tmp_path / "hand")
        assert back.seed == hand.seed
        assert np.array_equal(back.skinning_weights, hand.skinning_weights)

    def test_params_validation(self):
        ManoParams(np.zeros(48), np.zeros(10))
        with pytest.raises(ValueError):
            ManoParams(np.zeros((16, 3)), np.zeros(10))


class TestLbs:
    def test_zero_pose_identity(self, hand):
        V, J = lbs_forward(hand, np.zeros(48), np.zeros(10))
        assert np.abs(V.data - hand.template_vertices).max() <= 1e-12
        assert np.abs(J.data - hand.rest_joints).max() <= 1e-12

    def test_shape_linearity(self, hand):
        beta = np.zeros(10)
        beta[0] = 1.0
        V, _ = lbs_forward(hand, np.zeros(48), beta)
        np.testing.assert_allclose(V.data, hand.template_vertices + hand.shape_basis[0], atol=1e-12)

    def test_root_rotation_equivariance(self, hand, rng):
        theta = rng.uniform(-0.6, 0.6, size=48)
        beta = rng.uniform(-1, 1, size=10)
        theta[:3] = 0
        V0, J0 = lbs_forward(hand, theta, beta)
        R = random_rotation(rng)
        theta[:3] = axis_angle_of(R)
        V1, J1 = lbs_forward(hand, theta, beta)
        # rotation pivots on the shaped rest-pose wrist
        rest, _ = lbs_forward(hand, np.zeros(48), beta)
        root = (hand.joint_regressor @ rest.data)[0]
        np.testing.assert_allclose(V1.data, (V0.data - root) @ R.T + root, atol=1e-9)
        np.testing.assert_allclose(J1.data, (J0.data - root) @ R.T + root, atol=1e-9)

    def test_translation_equivariance(self, hand, rng):
        theta, beta, t = rng.uniform(-0.6, 0.6, 48), rng.uniform(-1, 1, 10), rng.normal(size=3) * 50
        V0, J0 = lbs_forward(hand, theta, beta)
        V1, J1 = lbs_forward(hand, theta, beta, t)
        np.testing.assert_allclose(V1.data, V0.data + t, atol=1e-9)
        np.testing.assert_allclose(J1.data, J0.data + t, atol=1e-9)

    def test_joints_regressed_from_posed_vertices(self, hand, rng):
        V, J = lbs_forward(hand, rng.uniform(-0.6, 0.6, 48), rng.uniform(-1, 1, 10))
        np.testing.assert_allclose(J.data, hand.joint_regressor @ V.data, atol=1e-12)

    def test_subtree_locality(self, hand, rng):
        theta, beta = rng.uniform(-0.6, 0.6, 48), rng.uniform(-1, 1, 10)
        V0, _ = lbs_forward(hand, theta, beta)
        j = ARTICULATED[5]
        subtree = {j}
        for k in range(21):
            if PARENTS[k] in subtree:
                subtree.add(k)
        theta[3 * 5:3 * 5 + 3] += rng.normal(size=3) * 0.3
        V1, _ = lbs_forward(hand, theta, beta)
        free = hand.skinning_weights[:, sorted(subtree)].sum(1) == 0
        assert free.any() and (~free).any()
        np.testing.assert_allclose(V1.data[free], V0.data[free], atol=1e-12)
        assert np.abs(V1.data[~free] - V0.data[~free]).max() > 1e-6

    def test_batched_matches_single(self, hand, rng):
        th, be = rng.uniform(-0.6, 0.6, (3, 48)), rng.uniform(-1, 1, (3, 10))
        Vb, Jb = lbs_forward(hand, th, be)
        for i in range(3):
            V, J = lbs_forward(hand, th[i], be[i])
            np.testing.assert_allclose(Vb.data[i], V.data, atol=1e-12)

    def test_non_finite(self, hand):
        th = np.zeros(48)
        th[5] = np.nan
        with pytest.raises(ValueError):
            lbs_forward(hand, th, np.zeros(10))
