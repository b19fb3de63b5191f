import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from spavatar.pointcloud import OrientedPointCloud, normalize
from spavatar.skeleton import (DimensionMismatch, InvalidWeights, PoseParams, Skeleton, canonical_to_pose,
                               euler_to_rotation, forward_kinematics, lbs_apply)

angles = st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3)


def chain(n, offset=(0.0, 1.0, 0.0)):
    return Skeleton([f"b{i}" for i in range(n)], [-1] + list(range(n - 1)), [(0, 0, 0)] + [offset] * (n - 1))


def cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    return OrientedPointCloud(rng.normal(size=(n, 3)), normalize(rng.normal(size=(n, 3))))


def test_euler_identity():
    np.testing.assert_array_equal(euler_to_rotation([0, 0, 0]), np.eye(3))


def test_euler_x_axis():
    np.testing.assert_allclose(euler_to_rotation([np.pi / 2, 0, 0]) @ [0, 1, 0], [0, 0, 1], atol=1e-15)


@given(angles)
def test_euler_orthonormal(a):
    r = euler_to_rotation(a)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-10)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-10)


@given(angles)
def test_euler_convention_is_rz_ry_rx(a):
    expect = Rotation.from_euler("z", a[2]).as_matrix() @ Rotation.from_euler("y", a[1]).as_matrix() \
        @ Rotation.from_euler("x", a[0]).as_matrix()
    np.testing.assert_allclose(euler_to_rotation(a), expect, atol=1e-12)


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton(["a", "b"], [-1, -1], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Skeleton(["a", "b", "c"], [-1, 2, 1], np.zeros((3, 3)))
    with pytest.raises(DimensionMismatch):
        Skeleton(["a"], [-1, 0], np.zeros((2, 3)))


def test_skeleton_json_round_trip(tmp_path):
    s = chain(3)
    s.save(tmp_path / "s.json")
    back = Skeleton.load(tmp_path / "s.json")
    assert back.parents == s.parents and back.names == s.names
    np.testing.assert_array_equal(back.rest_offsets, s.rest_offsets)


def test_pose_json_round_trip():
    p = PoseParams(np.arange(6.0).reshape(2, 3), np.ones(4))
    back = PoseParams.from_json(p.to_json())
    np.testing.assert_array_equal(back.body_pose, p.body_pose)
    np.testing.assert_array_equal(back.expression, p.expression)


def test_fk_zero_pose_zero_offsets():
    s = Skeleton(["a", "b"], [-1, 0], np.zeros((2, 3)))
    z = PoseParams.zeros(2)
    bt = forward_kinematics(s, z, z)
    np.testing.assert_array_equal(bt.posed, np.tile(np.eye(4), (2, 1, 1)))


def test_fk_chain_translation():
    s = Skeleton(["a", "b", "c"], [-1, 0, 1], [(0, 0, 0), (0, 1, 0), (0, 1, 0)])
    z = PoseParams.zeros(3)
    np.testing.assert_array_equal(forward_kinematics(s, z, z).posed[2][:3, 3], [0, 2, 0])


def test_fk_matches_naive_products():
    rng = np.random.default_rng(0)
    s = Skeleton(["a", "b", "c"], [-1, 0, 1], rng.normal(size=(3, 3)))
    pose = PoseParams(rng.uniform(-1, 1, (3, 3)))
    bt = forward_kinematics(s, pose, PoseParams.zeros(3))

    def local(i):
        m = np.eye(4)
        m[:3, :3] = Rotation.from_euler("xyz", pose.body_pose[i]).as_matrix()
        m[:3, 3] = s.rest_offsets[i]
        return m

    np.testing.assert_allclose(bt.posed[2], local(0) @ local(1) @ local(2), atol=1e-12)


def test_fk_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward_kinematics(chain(3), PoseParams.zeros(2), PoseParams.zeros(3))


def test_bone_transforms_are_rotations():
    rng = np.random.default_rng(1)
    bt = forward_kinematics(chain(4), PoseParams(rng.normal(size=(4, 3))), PoseParams.zeros(4))
    r = bt.posed[:, :3, :3]
    np.testing.assert_allclose(r @ np.swapaxes(r, 1, 2), np.tile(np.eye(3), (4, 1, 1)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rest_pose_identity(seed):
    rng = np.random.default_rng(seed)
    s = chain(4)
    pose = PoseParams(rng.normal(size=(4, 3)))
    c = cloud(20, seed)
    w = rng.dirichlet(np.ones(4), size=20)
    out = canonical_to_pose(c, w, s, pose, pose)
    np.testing.assert_allclose(out.positions, c.positions, atol=1e-9, rtol=0)
    np.testing.assert_allclose(out.normals, c.normals, atol=1e-9, rtol=0)


def test_one_hot_translation():
    s = Skeleton(["root"], [-1], [(0, 0, 0)])
    bt = forward_kinematics(s, PoseParams.zeros(1), PoseParams.zeros(1))
    moved = bt.posed.copy()
    moved[0, :3, 3] = [1, 2, 3]
    c = cloud(5)
    out = lbs_apply(c, np.ones((5, 1)), type(bt)(moved, bt.template))
    np.testing.assert_allclose(out.positions, c.positions + [1, 2, 3], atol=1e-12)
    np.testing.assert_allclose(out.normals, c.normals, atol=1e-12)


def test_half_blend_of_translations():
    s = Skeleton(["a", "b"], [-1, 0], np.zeros((2, 3)))
    bt = forward_kinematics(s, PoseParams.zeros(2), PoseParams.zeros(2))
    moved = bt.posed.copy()
    moved[0, :3, 3] = [1, 0, 0]
    moved[1, :3, 3] = [0, 2, 0]
    c = cloud(4)
    out = lbs_apply(c, np.full((4, 2), 0.5), type(bt)(moved, bt.template))
    np.testing.assert_allclose(out.positions, c.positions + [0.5, 1.0, 0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_one_hot_is_rigid(seed):
    rng = np.random.default_rng(seed)
    s = chain(3)
    c = cloud(30, seed)
    w = np.eye(3)[rng.integers(0, 3)][None].repeat(30, axis=0)
    out = canonical_to_pose(c, w, s, PoseParams(rng.normal(size=(3, 3))), PoseParams(rng.normal(size=(3, 3))))
    d0 = np.linalg.norm(c.positions[:, None] - c.positions[None], axis=2)
    d1 = np.linalg.norm(out.positions[:, None] - out.positions[None], axis=2)
    np.testing.assert_allclose(d1, d0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-6)


def test_root_rotation_matches_rigid_rotation():
    s = chain(2)
    c = cloud(10)
    pose = PoseParams([[np.pi / 4, 0, 0], [0, 0, 0]])
    out = canonical_to_pose(c, np.tile([1.0, 0.0], (10, 1)), s, pose, PoseParams.zeros(2))
    r = Rotation.from_euler("x", np.pi / 4)
    np.testing.assert_allclose(out.positions, r.apply(c.positions), atol=1e-12)
    np.testing.assert_allclose(out.normals, r.apply(c.normals), atol=1e-12)


def test_invalid_weights():
    s = chain(2)
    z = PoseParams.zeros(2)
    bt = forward_kinematics(s, z, z)
    with pytest.raises(InvalidWeights):
        lbs_apply(cloud(2), [[0.7, 0.7], [0.5, 0.5]], bt)
    with pytest.raises(InvalidWeights):
        lbs_apply(cloud(2), [[1.5, -0.5], [0.5, 0.5]], bt)
    with pytest.raises(DimensionMismatch):
        lbs_apply(cloud(2), [[1.0, 0.0, 0.0]] * 2, bt)


def test_lbs_jvp_matches_finite_differences():
    # positions are linear in the weights and in x; check the weight direction numerically
    rng = np.random.default_rng(5)
    s = chain(3)
    bt = forward_kinematics(s, PoseParams(rng.normal(size=(3, 3))), PoseParams.zeros(3))
    c = cloud(6, 5)
    w = rng.dirichlet(np.ones(3), size=6)
    dw = rng.normal(size=w.shape)
    dw -= dw.mean(axis=1, keepdims=True)
    h = 1e-5
    rel = bt.relative()[:, :3]
    analytic = np.einsum("nb,bij,nj->ni", dw, rel[:, :, :3], c.positions) + dw @ rel[:, :, 3]
    fd = (lbs_apply(c, w + h * dw, bt).positions - lbs_apply(c, w - h * dw, bt).positions) / (2 * h)
    assert np.abs(fd - analytic).max() / np.abs(analytic).max() < 1e-4
