import numpy as np
import pytest

from spavatar.avatar import load_subject, save_subject
from spavatar.pointcloud import OrientedPointCloud
from spavatar.semantic import PartLabel
from spavatar.skeleton import canonical_to_pose
from spavatar.synthetic import generate_subject, posed_scan, reference_weights


def test_subject_shape(subject):
    assert len(subject) == 3 == len(subject.scans)
    assert subject.skeleton.bone_count == 17
    np.testing.assert_array_equal(subject.poses[0].body_pose, 0.0)
    assert subject.template_scan.vertex_colors is not None
    assert subject.template_scan.faces.shape == subject.body.mesh.faces.shape


def test_meshes_are_watertight(subject):
    assert subject.body.mesh.is_watertight()
    for scan in subject.scans:
        assert scan.is_watertight()


def test_reference_weights_valid(subject):
    w = subject.gt_weights
    assert w.shape == (len(subject.body.mesh.vertices), 17)
    assert w.min() >= 0
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(reference_weights(subject.body.mesh.vertices, subject.capsules), w, atol=1e-12)


def test_hands_are_labelled(subject):
    counts = np.bincount(subject.body.vertex_labels, minlength=8)
    assert counts[PartLabel.LEFT_HAND] > 0 and counts[PartLabel.RIGHT_HAND] > 0


def test_generator_weights_reproduce_posed_scans(subject):
    tpl = subject.template_scan
    cloud = OrientedPointCloud(tpl.vertices, tpl.vertex_normals())
    for i in range(1, len(subject)):
        out = canonical_to_pose(cloud, subject.gt_weights, subject.skeleton, subject.poses[i], subject.template_pose)
        np.testing.assert_allclose(out.positions, posed_scan(subject, i, bump=False).vertices, atol=1e-5, rtol=0)


def test_wrinkles_vanish_at_rest_pose(subject):
    a = posed_scan(subject, 0, bump=True)
    np.testing.assert_array_equal(a.vertices, subject.template_scan.vertices)
    posed = posed_scan(subject, 1, bump=True).vertices - posed_scan(subject, 1, bump=False).vertices
    assert 0 < np.abs(posed).max() < 0.02


def test_generator_deterministic():
    a, b = generate_subject(2, 2), generate_subject(2, 2)
    assert a.scans[1].vertices.tobytes() == b.scans[1].vertices.tobytes()
    assert a.template_scan.vertex_colors.tobytes() == b.template_scan.vertex_colors.tobytes()


def test_generator_needs_two_poses():
    with pytest.raises(ValueError):
        generate_subject(1, 1)


def test_subject_round_trip(subject, tmp_path):
    save_subject(subject, tmp_path / "s.spav")
    back = load_subject(tmp_path / "s.spav")
    assert len(back) == len(subject)
    assert back.skeleton.names == subject.skeleton.names
    np.testing.assert_array_equal(back.gt_weights, subject.gt_weights)
    np.testing.assert_array_equal(back.body.mesh.face_labels, subject.body.mesh.face_labels)
    for s, t in zip(back.scans, subject.scans):
        np.testing.assert_array_equal(s.vertices, t.vertices)
    for p, q in zip(back.poses, subject.poses):
        np.testing.assert_array_equal(p.body_pose, q.body_pose)
