"""Part labels pinned to template-mesh faces.

Semantic points live in a face's local frame (barycentric coordinates plus
an offset along the face normal), so their part label and correspondence
survive any optimisation of their geometry.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .deformation import deform
from .losses import LossWeights, chamfer, emd_loss, emd_match
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.optim import AdamState, adam_step
from .pointcloud import EmptyMesh, OrientedPointCloud, TriangleMesh, sample_surface, sample_surface_with_faces

log = logging.getLogger(__name__)


class PartLabel(enum.IntEnum):
    HEAD = 0
    BODY = 1
    LEFT_ARM = 2
    RIGHT_ARM = 3
    LEFT_HAND = 4
    RIGHT_HAND = 5
    LEFT_LEG = 6
    RIGHT_LEG = 7


HAND_LABELS = frozenset({PartLabel.LEFT_HAND, PartLabel.RIGHT_HAND})


def parse_parts(spec):
    """``"left_leg,right_leg"`` (or an iterable of names / ints) -> label set."""
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    out = set()
    for item in spec:
        if isinstance(item, str) and not item.strip().isdigit():
            out.add(PartLabel[item.strip().upper()])
        else:
            out.add(PartLabel(int(item)))
    return frozenset(out)


class UnlabeledVertex(ValueError):
    pass


class NotConverged(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LabeledTemplateMesh:
    mesh: TriangleMesh                  # face_labels always set
    vertex_labels: np.ndarray
    vertex_weights: np.ndarray | None = None   # reference skinning weights per vertex

    def __post_init__(self):
        if self.mesh.face_labels is None:
            raise ValueError("labeled template needs face labels")


def label_faces(mesh: TriangleMesh, per_vertex_labels, vertex_weights=None) -> LabeledTemplateMesh:
    """Majority vote of the three vertex labels; ties go to the lowest label."""
    labels = np.asarray(per_vertex_labels)
    if labels.shape != (len(mesh.vertices),) or np.any(labels < 0) or np.any(labels > 7):
        raise UnlabeledVertex("every vertex needs a label in 0..7")
    fl = labels[mesh.faces]                       # (F, 3)
    votes = np.zeros((len(fl), 8), dtype=np.int64)
    for k in range(3):
        np.add.at(votes, (np.arange(len(fl)), fl[:, k]), 1)
    face_labels = votes.argmax(axis=1)            # argmax picks the lowest label on ties
    labeled = TriangleMesh(mesh.vertices, mesh.faces, mesh.vertex_colors, face_labels)
    return LabeledTemplateMesh(labeled, labels.astype(np.int64), vertex_weights)


def read_vertex_labels(path):
    return np.array([int(line) for line in Path(path).read_text().split()], dtype=np.int64)


def write_vertex_labels(labels, path):
    Path(path).write_text("\n".join(str(int(v)) for v in labels) + "\n")


@dataclass(frozen=True, eq=False)
class SemanticPointSet:
    templates: tuple                 # LabeledTemplateMesh per geometry source
    source: np.ndarray               # (n,) template / deformation model index
    face_index: np.ndarray           # (n,)
    barycentric: np.ndarray          # (n, 3)
    normal_offset: np.ndarray        # (n,)
    labels: np.ndarray               # (n,)
    features: np.ndarray | None = None         # (n, d) appearance features
    texture_source: np.ndarray | None = None   # (n,) decoder index for features

    def __post_init__(self):
        n = len(self.face_index)
        b = np.asarray(self.barycentric, dtype=np.float64)
        if b.shape != (n, 3):
            raise ValueError("barycentric must be (n, 3)")
        if n and (b.min() < -1e-9 or np.abs(b.sum(1) - 1).max() > 1e-6):
            raise ValueError("barycentric coordinates must lie on the simplex")
        if self.features is not None and len(self.features) != n:
            raise ValueError("feature bank length must match point count")
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.texture_source is None:
            object.__setattr__(self, "texture_source", np.zeros(n, dtype=np.int64))

    def __len__(self):
        return len(self.face_index)

    def _frames(self):
        pos = np.zeros((len(self), 3))
        nrm = np.zeros((len(self), 3))
        for s, tpl in enumerate(self.templates):
            sel = self.source == s
            if not np.any(sel):
                continue
            mesh = tpl.mesh
            tri = mesh.vertices[mesh.faces[self.face_index[sel]]]
            fn = mesh.face_normals()[self.face_index[sel]]
            pos[sel] = np.einsum("nk,nkd->nd", self.barycentric[sel], tri) + self.normal_offset[sel, None] * fn
            nrm[sel] = fn
        return pos, nrm

    def positions(self):
        return self._frames()[0]

    def normals(self):
        return self._frames()[1]

    def cloud(self):
        pos, nrm = self._frames()
        return OrientedPointCloud(pos, nrm, labels=self.labels)

    def subset(self, index):
        index = np.asarray(index)
        return SemanticPointSet(
            self.templates, self.source[index], self.face_index[index], self.barycentric[index],
            self.normal_offset[index], self.labels[index],
            None if self.features is None else self.features[index], self.texture_source[index])

    def with_features(self, features, texture_source=None):
        return replace(self, features=np.asarray(features, dtype=np.float64),
                       texture_source=self.texture_source if texture_source is None else texture_source)

    def census(self):
        return np.bincount(self.labels, minlength=8)


def sample_semantic(template: LabeledTemplateMesh, n: int, seed) -> SemanticPointSet:
    """Area-weighted face choice with uniform barycentrics; labels from faces."""
    if len(template.mesh.faces) == 0:
        raise EmptyMesh("template mesh has no faces")
    cloud, face, bary = sample_surface_with_faces(template.mesh, n, seed)
    return SemanticPointSet((template,), np.zeros(n, dtype=np.int64), face, bary, np.zeros(n),
                            template.mesh.face_labels[face].copy())


def project_simplex(v):
    """Euclidean projection of each row onto the probability simplex."""
    n, d = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, d + 1)
    cond = u - css / ind > 0
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    w = np.maximum(v - theta[:, None], 0.0)
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class AlignResult:
    points: SemanticPointSet
    history: list = field(default_factory=list)   # per-iteration loss
    best: list = field(default_factory=list)      # best-so-far loss
    final_chamfer: float = float("nan")


def align_to_template_scan(points: SemanticPointSet, template_scan, iters=100, lr=0.02,
                           offset_lr=None, max_offset=0.05, weights: LossWeights | None = None,
                           seed=0, tolerance=1e-3, emd_kw=None) -> AlignResult:
    """Fit each point's local frame coordinates to the template scan.

    Barycentric coordinates and the normal offset are optimised by Adam
    against the chamfer and EMD terms; after every step barycentrics are
    projected back onto the simplex and offsets clipped to ``max_offset``.
    Face attachment and labels never change.
    """
    weights = weights or LossWeights()
    emd_kw = emd_kw or {}
    n = len(points)
    if isinstance(template_scan, TriangleMesh):
        target = sample_surface(template_scan, n, seed)
    else:
        target = template_scan
        if len(target) != n:
            idx = np.random.default_rng(seed).choice(len(target), n, replace=len(target) < n)
            target = target.subset(idx)
    target_pos = target.positions
    offset_lr = offset_lr if offset_lr is not None else lr * 0.05
    tri = np.zeros((n, 3, 3))
    fn = np.zeros((n, 3))
    for s, tpl in enumerate(points.templates):
        sel = points.source == s
        tri[sel] = tpl.mesh.vertices[tpl.mesh.faces[points.face_index[sel]]]
        fn[sel] = tpl.mesh.face_normals()[points.face_index[sel]]
    bary = Tensor(points.barycentric.copy(), requires_grad=True)
    noff = Tensor(points.normal_offset.copy(), requires_grad=True)
    params = [bary, noff]
    state = AdamState.for_params(params, lr=[lr, offset_lr])
    result = AlignResult(points)
    best = np.inf
    best_state = (bary.data.copy(), noff.data.copy())
    for _ in range(iters + 1):
        x = ag.tsum(ag.reshape(bary, (n, 3, 1)) * tri, axis=1) + ag.reshape(noff, (n, 1)) * fn
        terms = []
        if weights.use_chamfer:
            terms.append(weights.chamfer * chamfer(x, target_pos))
        if weights.use_emd:
            match = emd_match(x.data, target_pos, **emd_kw)
            terms.append(weights.emd * emd_loss(match, x, target_pos))
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        value = loss.item()
        result.history.append(value)
        if value < best:
            best = value
            best_state = (bary.data.copy(), noff.data.copy())
        result.best.append(best)
        if len(result.history) > iters:
            break
        for p in params:
            p.grad = None
        loss.backward()
        adam_step(state, params, [bary.grad, noff.grad])
        bary.data[...] = project_simplex(bary.data)
        np.clip(noff.data, -max_offset, max_offset, out=noff.data)
    aligned = replace(points, barycentric=best_state[0], normal_offset=best_state[1])
    result.points = aligned
    result.final_chamfer = chamfer(aligned.positions(), target_pos).item()
    if result.final_chamfer > tolerance:
        warnings.warn(f"semantic alignment ended with chamfer {result.final_chamfer:.3g} "
                      f"> tolerance {tolerance:.3g}", NotConverged, stacklevel=2)
    return result


def repose_semantic(points: SemanticPointSet, models, pose) -> OrientedPointCloud:
    """Deform attached points with their source's model; labels carried through.

    ``models`` is one :class:`DeformationModel` or a sequence indexed by
    ``points.source``.
    """
    if not isinstance(models, (list, tuple)):
        models = (models,)
    pos, nrm = points._frames()
    out_x = np.zeros_like(pos)
    out_n = np.zeros_like(nrm)
    for s in np.unique(points.source):
        sel = points.source == s
        batch = deform(models[s], pos[sel], pose, normals=nrm[sel])
        out_x[sel] = batch.x_d.data
        out_n[sel] = batch.n_d.data
    out_n /= np.linalg.norm(out_n, axis=1, keepdims=True)
    return OrientedPointCloud(out_x, out_n, labels=points.labels)


def write_semantic_ply(points: SemanticPointSet, path, binary=True):
    """Attachment record per point (face, barycentrics, offset, label) plus its position and normal."""
    from .io import write_ply_elements

    pos, nrm = points._frames()
    props = {c: pos[:, i].astype(np.float32) for i, c in enumerate("xyz")}
    props.update({c: nrm[:, i].astype(np.float32) for i, c in enumerate(("nx", "ny", "nz"))})
    props.update({"face_index": points.face_index.astype(np.uint32),
                  "b0": points.barycentric[:, 0].astype(np.float32),
                  "b1": points.barycentric[:, 1].astype(np.float32),
                  "b2": points.barycentric[:, 2].astype(np.float32),
                  "noff": points.normal_offset.astype(np.float32),
                  "label": points.labels.astype(np.uint8)})
    write_ply_elements(path, [("vertex", props)], binary=binary)
