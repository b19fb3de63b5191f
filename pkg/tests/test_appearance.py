import numpy as np
import pytest

from conftest import directional_fd_error, icosphere
from spavatar.appearance import (AppearanceModel, EmptyTrainingSet, MissingColors, aggregate_feature,
                                 aggregate_features, color_mesh, feature_loss, idw_weights, init_features,
                                 neighbours, pretrain_autoencoder, train_features)
from spavatar.nn.autograd import Tensor
from spavatar.nn.mlp import AutoencoderSpec, init_autoencoder
from spavatar.pointcloud import KTooLarge, TriangleMesh, sample_surface

SMALL = AutoencoderSpec(latent_dim=8, encoder_depth=2, encoder_width=32, decoder_depth=3, decoder_width=32)


@pytest.fixture(scope="module")
def two_tone():
    """Sphere painted red above the equator and blue below, plus a model pretrained on its colours."""
    mesh = icosphere(3, 0.3)
    top = mesh.vertices[:, 2] > 0
    colors = np.where(top[:, None], [0.9, 0.1, 0.1], [0.1, 0.2, 0.8])
    scan = TriangleMesh(mesh.vertices, mesh.faces, colors)
    model, _ = pretrain_autoencoder(colors, epochs=300, lr=3e-3, batch_size=2, seed=0, spec=SMALL)
    return scan, model


# -- autoencoder ------------------------------------------------------------------

def test_autoencoder_black_and_white():
    bw = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    model, log = pretrain_autoencoder(bw, epochs=300, lr=3e-3, batch_size=2, seed=0, spec=SMALL)
    out = model.decode(model.encode(bw))
    assert np.abs(out - bw).max() <= 0.01
    assert model.frozen
    assert np.all(np.diff(log.best) <= 0)


def test_autoencoder_errors():
    with pytest.raises(EmptyTrainingSet):
        pretrain_autoencoder(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        pretrain_autoencoder([[1.5, 0, 0]])


def test_appearance_sections_round_trip(two_tone):
    _, model = two_tone
    back = AppearanceModel.from_sections(model.to_sections())
    assert back.decoder_hash() == model.decoder_hash()
    assert back.frozen and back.feature_dim == 8


# -- IDW ----------------------------------------------------------------------------

def test_idw_k1_is_nearest_feature():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]])
    feats = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(aggregate_feature([0.9, 0.1, 0], pts, feats, k=1), feats[1])


def test_idw_equidistant_mean():
    pts = np.array([[-1.0, 0, 0], [1.0, 0, 0], [0, 9.0, 0]])
    feats = np.array([[1.0, 4.0], [3.0, 0.0], [100.0, 100.0]])
    np.testing.assert_allclose(aggregate_feature([0, 0, 0.5], pts, feats, k=2), [2.0, 2.0], atol=1e-12)


def test_idw_exact_hit():
    rng = np.random.default_rng(0)
    pts, feats = rng.random((20, 3)), rng.normal(size=(20, 4))
    np.testing.assert_array_equal(aggregate_feature(pts[7], pts, feats, k=5), feats[7])


def test_idw_weights_normalised():
    d = np.sort(np.random.default_rng(1).random((50, 8)), axis=1)
    for mode in ("inverse", "distance"):
        w = idw_weights(d, mode)
        assert w.min() >= 0
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    # closer neighbours weigh more under inverse weighting
    assert np.all(np.diff(idw_weights(d), axis=1) <= 1e-15)


def test_idw_matches_direct_formula():
    rng = np.random.default_rng(2)
    pts, feats, q = rng.random((40, 3)), rng.normal(size=(40, 3)), rng.random((5, 3))
    got, _, _ = aggregate_features(q, pts, feats, k=4)
    for i, x in enumerate(q):
        d = np.linalg.norm(pts - x, axis=1)
        nn = np.argsort(d)[:4]
        w = 1.0 / (d[nn] + 1e-8)
        np.testing.assert_allclose(got[i], w @ feats[nn] / w.sum(), atol=1e-12)


def test_idw_continuous_away_from_ties():
    rng = np.random.default_rng(3)
    pts, feats = rng.random((30, 3)), rng.normal(size=(30, 2))
    q = np.array([0.41, 0.52, 0.47])
    a = aggregate_feature(q, pts, feats, k=3)
    b = aggregate_feature(q + 1e-9, pts, feats, k=3)
    assert np.abs(a - b).max() < 1e-6


def test_idw_k_too_large():
    with pytest.raises(KTooLarge):
        neighbours(np.zeros((3, 3)), [[0, 0, 0]], 4)
    with pytest.raises(KTooLarge):
        neighbours(np.zeros((3, 3)), [[0, 0, 0]], 0)


# -- feature training ------------------------------------------------------------------

def test_feature_training_freezes_decoder(two_tone):
    scan, model = two_tone
    pts = sample_surface(scan, 500, 1).positions
    before = model.decoder_hash()
    bank, log = train_features(model, [pts], [scan], epochs=5, lr=1e-2, samples=512, seed=0)
    assert model.decoder_hash() == before
    assert bank.shape == (500, 8)
    assert np.all(np.diff(log.best) <= 0)
    assert len(log.loss) == 5


def test_uniform_gray_scan():
    mesh = icosphere(2, 0.3)
    gray = TriangleMesh(mesh.vertices, mesh.faces, np.full((len(mesh.vertices), 3), 0.5))
    model, _ = pretrain_autoencoder(np.random.default_rng(0).random((64, 3)), epochs=150, lr=3e-3,
                                    batch_size=16, seed=0, spec=SMALL)
    pts = sample_surface(gray, 300, 2).positions
    bank, _ = train_features(model, [pts], [gray], epochs=150, lr=1e-2, samples=512, seed=0)
    # the loss constrains aggregated features, so check colours where they are decoded
    out = color_mesh(gray, pts, bank, model)
    assert np.abs(out.vertex_colors - 0.5).max() <= 0.02


def test_encoder_init_beats_random(two_tone):
    scan, model = two_tone
    pts = sample_surface(scan, 400, 3).positions
    cloud = sample_surface(scan, 1000, 4)
    idx, d = neighbours(pts, cloud.positions, 8)
    w = idw_weights(d)
    enc = feature_loss(init_features(model, pts, scan), model, idx, w, cloud.colors).item()
    rnd = feature_loss(init_features(model, pts, scan, "random", 0), model, idx, w, cloud.colors).item()
    assert enc < rnd


def test_feature_loss_gradient(two_tone):
    scan, model = two_tone
    rng = np.random.default_rng(5)
    pts = sample_surface(scan, 16, 5).positions
    bank = Tensor(rng.normal(size=(16, 8)), requires_grad=True)
    q = sample_surface(scan, 12, 6)
    idx, d = neighbours(pts, q.positions, 4)
    w = idw_weights(d)
    assert directional_fd_error(lambda: feature_loss(bank, model, idx, w, q.colors), [bank]) < 1e-4


def test_missing_colors():
    mesh = icosphere(1)
    model = AppearanceModel(*init_autoencoder(SMALL, np.random.default_rng(0)), SMALL)
    with pytest.raises(MissingColors):
        train_features(model, [mesh.vertices], [mesh], epochs=1)


# -- mesh colouring ----------------------------------------------------------------------

def test_color_mesh_coincident_vertex(two_tone):
    _, model = two_tone
    rng = np.random.default_rng(7)
    pts, feats = rng.random((30, 3)), rng.normal(size=(30, 8))
    mesh = TriangleMesh(pts[:3], [[0, 1, 2]])
    out = color_mesh(mesh, pts, feats, model)
    np.testing.assert_allclose(out.vertex_colors, model.decode(feats[:3]), atol=1e-12)


def test_color_mesh_uniform_features(two_tone):
    _, model = two_tone
    mesh = icosphere(1)
    feats = np.tile(np.random.default_rng(8).normal(size=8), (50, 1))
    out = color_mesh(mesh, np.random.default_rng(9).normal(size=(50, 3)), feats, model)
    np.testing.assert_allclose(out.vertex_colors, np.broadcast_to(out.vertex_colors[0], (42, 3)), atol=1e-12)
    assert 0 <= out.vertex_colors.min() and out.vertex_colors.max() <= 1


def test_two_tone_body_colours(subject):
    scan = subject.template_scan
    model, _ = pretrain_autoencoder(scan.vertex_colors, epochs=300, lr=3e-3, batch_size=4, seed=0, spec=SMALL)
    # a seventh of the vertices border the other tone, so the points must be dense next to the mesh
    pts = sample_surface(scan, 20000, 0).positions
    bank, _ = train_features(model, [pts], [scan], epochs=60, lr=1e-2, samples=8192, seed=0)
    out = color_mesh(scan, pts, bank, model)
    close = np.abs(out.vertex_colors - scan.vertex_colors).max(axis=1) <= 0.1
    assert close.mean() >= 0.95
