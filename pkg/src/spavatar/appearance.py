"""Per-point neural texture.

A small colour autoencoder is trained first; its decoder is then frozen and
only the per-point features are optimised so that features gathered at scan
points by inverse-distance weighting decode to the scan colours.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import color_loss
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.checkpoint import pack_json, unpack_json
from .nn.mlp import AutoencoderSpec, Mlp, init_autoencoder, mlp_from_arrays
from .nn.optim import AdamState, adam_step
from .pointcloud import KdIndex, KTooLarge, TriangleMesh, sample_surface

log = logging.getLogger(__name__)

IDW_EPS = 1e-8
EXACT_HIT = 1e-12


class EmptyTrainingSet(ValueError):
    pass


class MissingColors(ValueError):
    pass


def _frozen_copy(net: Mlp) -> Mlp:
    return Mlp(net.spec, [Tensor(p.data) for p in net.params])


@dataclass(eq=False)
class AppearanceModel:
    encoder: Mlp
    decoder: Mlp
    spec: AutoencoderSpec = field(default_factory=AutoencoderSpec)
    frozen: bool = False

    @property
    def feature_dim(self):
        return self.spec.latent_dim

    def encode(self, colors):
        return _frozen_copy(self.encoder)(np.atleast_2d(colors)).data

    def decode(self, features, clamp=True):
        out = _frozen_copy(self.decoder)(np.atleast_2d(features)).data
        return np.clip(out, 0.0, 1.0) if clamp else out

    def decoder_hash(self):
        h = hashlib.sha256()
        for a in self.decoder.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def to_sections(self, prefix="appearance/"):
        out = {prefix + "meta": pack_json({"spec": self.spec.__dict__, "frozen": self.frozen})}
        for name, net in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, a in enumerate(net.arrays()):
                out[f"{prefix}{name}/{i:02d}"] = a
        return out

    @classmethod
    def from_sections(cls, sections, prefix="appearance/"):
        meta = unpack_json(sections[prefix + "meta"])
        spec = AutoencoderSpec(**meta["spec"])
        nets = []
        for name, mspec in (("encoder", spec.encoder()), ("decoder", spec.decoder())):
            keys = sorted(k for k in sections if k.startswith(f"{prefix}{name}/"))
            nets.append(mlp_from_arrays(mspec, [sections[k] for k in keys]))
        return cls(nets[0], nets[1], spec, bool(meta["frozen"]))


@dataclass
class TrainLog:
    loss: list = field(default_factory=list)
    best: list = field(default_factory=list)

    def record(self, value):
        self.loss.append(float(value))
        self.best.append(min(self.best[-1], float(value)) if self.best else float(value))


def pretrain_autoencoder(colors, epochs=200, lr=1e-3, batch_size=512, seed=0,
                         spec: AutoencoderSpec | None = None, max_colors=4096):
    """Fit ``D(E(c)) = c`` on pooled colours; returns the model (decoder frozen) and its log.

    Colours are deduplicated at 8-bit precision and subsampled to
    ``max_colors`` before training.
    """
    spec = spec or AutoencoderSpec()
    c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(c) == 0:
        raise EmptyTrainingSet("no colours to pretrain on")
    if c.min() < 0 or c.max() > 1:
        raise ValueError("colours must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    c = np.unique(np.round(c * 255.0) / 255.0, axis=0)
    if len(c) > max_colors:
        c = c[rng.choice(len(c), max_colors, replace=False)]
    encoder, decoder = init_autoencoder(spec, rng)
    params = encoder.params + decoder.params
    state = AdamState.for_params(params, lr=lr)
    history = TrainLog()
    best = [p.data.copy() for p in params]
    for _ in range(epochs):
        order = rng.permutation(len(c))
        for start in range(0, len(c), batch_size):
            batch = c[order[start:start + batch_size]]
            loss = color_loss(decoder(encoder(batch)), batch)
            adam_step(state, params, ag.grad(loss, params))
        history.record(color_loss(decoder(encoder(c)), c).item())
        if history.loss[-1] == history.best[-1]:
            best = [p.data.copy() for p in params]
    # minibatch Adam is noisy late in training; keep the best full-set fit
    for p, b in zip(params, best):
        p.data[...] = b
    model = AppearanceModel(encoder, decoder, spec, frozen=True)
    log.info("autoencoder pretrained on %d colours, final loss %.3g", len(c), history.loss[-1])
    return model, history


def idw_weights(distances, mode="inverse", eps=IDW_EPS):
    """Normalised neighbour weights; an exact hit takes all the weight."""
    d = np.asarray(distances, dtype=np.float64)
    if mode == "inverse":
        w = 1.0 / (d + eps)
    elif mode == "distance":
        w = d.copy()
        w[np.all(w == 0, axis=-1)] = 1.0
    else:
        raise ValueError(f"unknown IDW mode {mode!r}")
    hit = d[..., 0] < EXACT_HIT
    if np.any(hit):
        w[hit] = 0.0
        w[hit, 0] = 1.0
    return w / w.sum(axis=-1, keepdims=True)


def neighbours(index, queries, k):
    """``(idx, weights)`` of the ``k`` nearest posed semantic points for each query."""
    if not isinstance(index, KdIndex):
        index = KdIndex(index)
    if k < 1 or k > len(index):
        raise KTooLarge(f"k={k} invalid for {len(index)} semantic points")
    d, idx = index.query(np.atleast_2d(queries), k)
    return idx.reshape(len(d), k), d.reshape(len(d), k)


def aggregate_features(queries, index, features, k=8, mode="inverse"):
    """Batched IDW feature aggregation; returns ``(F, idx, w)``."""
    idx, d = neighbours(index, queries, k)
    w = idw_weights(d, mode)
    return np.einsum("nk,nkd->nd", w, np.asarray(features)[idx]), idx, w


def aggregate_feature(query, posed_points, features, k=8, mode="inverse"):
    """Inverse-distance weighted mean feature of the ``k`` nearest posed points."""
    return aggregate_features(np.asarray(query, dtype=np.float64)[None, :], posed_points, features, k, mode)[0][0]


def _gather(features: Tensor, idx, w):
    n, k = idx.shape
    picked = features[idx.ravel()].reshape(n, k, features.shape[1])
    return ag.tsum(picked * w[:, :, None], axis=1)


def init_features(model: AppearanceModel, semantic_positions, scan: TriangleMesh, mode="encoder", seed=0):
    """Features from the encoded colour of each point's nearest scan vertex, or small noise."""
    n = len(semantic_positions)
    if mode == "random":
        return np.random.default_rng(seed).normal(0.0, 0.1, size=(n, model.feature_dim))
    if scan.vertex_colors is None:
        raise MissingColors("scan has no vertex colours")
    _, nearest = KdIndex(scan.vertices).query(semantic_positions, 1)
    return model.encode(scan.vertex_colors[np.ravel(nearest)])


def feature_loss(features, model: AppearanceModel, idx, w, colors) -> Tensor:
    decoder = _frozen_copy(model.decoder)
    return color_loss(decoder(_gather(ag.as_tensor(features), idx, w)), colors)


def train_features(model: AppearanceModel, posed_points, scans, features=None, epochs=20, lr=1e-3,
                   samples=4096, k=8, seed=0, mode="inverse"):
    """Optimise the feature bank against coloured scans with geometry and decoder frozen.

    ``posed_points[i]`` holds the semantic point positions deformed to the
    pose of ``scans[i]``. Each epoch visits every pose once in a seeded
    order. Returns the trained bank and a :class:`TrainLog` (one entry per
    iteration).
    """
    if len(posed_points) != len(scans) or not scans:
        raise ValueError("need one posed point set per scan")
    for s in scans:
        if s.vertex_colors is None:
            raise MissingColors("every training scan needs vertex colours")
    rng = np.random.default_rng(seed)
    if features is None:
        features = init_features(model, posed_points[0], scans[0], seed=seed)
    bank = Tensor(np.array(features, dtype=np.float64), requires_grad=True)
    indices = [KdIndex(p) for p in posed_points]
    state = AdamState.for_params([bank], lr=lr)
    history = TrainLog()
    for _ in range(epochs):
        for i in rng.permutation(len(scans)):
            cloud = sample_surface(scans[i], samples, rng)
            idx, d = neighbours(indices[i], cloud.positions, k)
            loss = feature_loss(bank, model, idx, idw_weights(d, mode), cloud.colors)
            history.record(loss.item())
            adam_step(state, [bank], ag.grad(loss, [bank]))
    return bank.data, history


def color_points(queries, posed_points, features, models, texture_source=None, k=8, mode="inverse"):
    """Decoded colours at arbitrary query positions.

    With several decoders each query uses the decoder of its nearest
    semantic point, aggregating only over neighbours that share it.
    """
    if not isinstance(models, (list, tuple)):
        models = (models,)
    idx, d = neighbours(posed_points, queries, k)
    features = np.asarray(features)
    if texture_source is None or len(models) == 1:
        w = idw_weights(d, mode)
        agg = np.einsum("nk,nkd->nd", w, features[idx])
        return models[0].decode(agg)
    src = np.asarray(texture_source)[idx]
    owner = src[:, 0]
    w = idw_weights(d, mode) * (src == owner[:, None])
    w /= w.sum(axis=1, keepdims=True)
    agg = np.einsum("nk,nkd->nd", w, features[idx])
    out = np.zeros((len(idx), 3))
    for s in np.unique(owner):
        sel = owner == s
        out[sel] = models[s].decode(agg[sel])
    return out


def color_mesh(mesh: TriangleMesh, posed_points, features, models, k=8, texture_source=None,
               mode="inverse") -> TriangleMesh:
    """Colour every vertex with the decoded aggregate feature at its position."""
    colors = color_points(mesh.vertices, posed_points, features, models, texture_source, k, mode)
    return TriangleMesh(mesh.vertices, mesh.faces, np.clip(colors, 0.0, 1.0), mesh.face_labels)
