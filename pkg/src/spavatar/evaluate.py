"""Mesh comparison metrics: chamfer (mean and max), normal consistency, IoU."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import TriangleMesh, sample_surface_with_faces
from .semantic import HAND_LABELS

log = logging.getLogger(__name__)


class OpenMesh(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    cd: float            # symmetric mean point-to-surface distance (mm)
    cd_max: float        # largest point-to-surface distance (mm)
    nc: float            # mean cosine between matched normals
    iou: float | None    # volumetric IoU; None when a mesh is open
    cd_hands: float | None = None
    cd_max_hands: float | None = None
    nc_hands: float | None = None

    def __post_init__(self):
        if self.cd_max < self.cd - 1e-12:
            raise ValueError("cd_max below cd")
        if not -1.0 - 1e-9 <= self.nc <= 1.0 + 1e-9:
            raise ValueError("nc outside [-1, 1]")
        if self.iou is not None and not 0.0 <= self.iou <= 1.0:
            raise ValueError("iou outside [0, 1]")

    def to_dict(self):
        return asdict(self)


def closest_point_on_triangles(p, a, b, c):
    """Closest point to ``p[i]`` on triangle ``(a[i], b[i], c[i])``; all ``(m, 3)``."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, value):
        mask = mask & ~done
        out[mask] = value[mask] if value.ndim == 2 else value
        done[mask] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)
        take((d3 >= 0) & (d4 <= d3), b)
        take((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        take(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    # degenerate triangles can leave NaNs; fall back to the nearest corner
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        corners = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.linalg.norm(corners - p[bad, None], axis=2).argmin(axis=1)
        out[bad] = corners[np.arange(len(k)), k]
    return out


def _incident_faces(mesh: TriangleMesh):
    """``(V, max_valence)`` face ids around each vertex, padded with the first one."""
    nv = len(mesh.vertices)
    vert = mesh.faces.ravel()
    face = np.repeat(np.arange(len(mesh.faces)), 3)
    order = np.argsort(vert, kind="stable")
    vert, face = vert[order], face[order]
    valence = np.bincount(vert, minlength=nv)
    width = max(int(valence.max()), 1)
    slot = np.arange(len(vert)) - np.repeat(np.cumsum(valence) - valence, valence)
    out = np.full((nv, width), -1, dtype=np.int64)
    out[vert, slot] = face
    first = np.where(out[:, 0] >= 0, out[:, 0], 0)
    return np.where(out >= 0, out, first[:, None])


def point_to_mesh(points, mesh: TriangleMesh, candidates=8, samples=None, seed=0):
    """Distance from each point to ``mesh``, with the face attaining it.

    Candidate faces are the owners of the nearest dense surface samples plus
    every face around the nearest vertex; the exact point-triangle distance
    is taken over the candidates.
    """
    points = np.asarray(points, dtype=np.float64)
    if samples is None:
        samples = max(2 * len(mesh.faces), 20000)
    cloud, face, _ = sample_surface_with_faces(mesh, samples, seed)
    k = min(candidates, samples)
    _, nn = cKDTree(cloud.positions).query(points, k=k)
    _, nv = cKDTree(mesh.vertices).query(points, k=1)
    cand = np.concatenate([face[nn.reshape(len(points), k)], _incident_faces(mesh)[nv]], axis=1)
    width = cand.shape[1]
    tri = mesh.vertices[mesh.faces[cand.ravel()]]
    rep = np.repeat(points, width, axis=0)
    cp = closest_point_on_triangles(rep, tri[:, 0], tri[:, 1], tri[:, 2])
    d = np.linalg.norm(cp - rep, axis=1).reshape(len(points), width)
    best = d.argmin(axis=1)
    rows = np.arange(len(points))
    return d[rows, best], cand[rows, best]


def _ray_parity_volume(mesh: TriangleMesh, origin, spacing, shape, jitter):
    """Inside/outside voxel centres by counting ray crossings along +z."""
    nx, ny, nz = shape
    v = (mesh.vertices - origin) / spacing - 0.5 - np.r_[jitter, 0.0]   # cell-centre coordinates
    tri = v[mesh.faces]
    lo = np.ceil(tri[:, :, :2].min(axis=1)).astype(np.int64)
    hi = np.floor(tri[:, :, :2].max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [nx - 1, ny - 1])
    cx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    cy = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    count = cx * cy
    t = np.repeat(np.arange(len(tri)), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    ix = lo[t, 0] + local % cx[t]
    iy = lo[t, 1] + local // cx[t]
    a, b, c = tri[t, 0], tri[t, 1], tri[t, 2]
    # 2-D barycentrics of the column centre in the projected triangle
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    ok = np.abs(det) > 1e-15
    px, py = ix - a[:, 0], iy - a[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (px * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * py) / det
        l2 = ((b[:, 0] - a[:, 0]) * py - px * (b[:, 1] - a[:, 1])) / det
        l0 = 1.0 - l1 - l2
        hit = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    z = l0 * a[:, 2] + l1 * b[:, 2] + l2 * c[:, 2]
    ix, iy, z = ix[hit], iy[hit], z[hit]
    # each crossing flips the parity of every voxel centre above it
    start = np.clip(np.floor(z).astype(np.int64) + 1, 0, nz)
    flips = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    np.add.at(flips, (ix, iy, start), 1)
    return (np.cumsum(flips, axis=2)[:, :, :nz] % 2).astype(bool)


def volumetric_iou(a: TriangleMesh, b: TriangleMesh, resolution=128, seed=0):
    """IoU of the solids bounded by two closed meshes, voxelised on a shared grid."""
    for m in (a, b):
        if not m.is_watertight():
            raise OpenMesh("IoU needs closed meshes")
    lo = np.minimum(a.vertices.min(0), b.vertices.min(0))
    hi = np.maximum(a.vertices.max(0), b.vertices.max(0))
    spacing = float((hi - lo).max()) / resolution
    lo = lo - spacing
    shape = tuple(int(s) for s in np.ceil((hi - lo) / spacing).astype(int) + 2)
    # a fixed irrational sub-cell shift keeps rays off mesh edges and vertices
    jitter = np.random.default_rng(seed).uniform(-1e-3, 1e-3, 2) + np.array([np.sqrt(2), np.sqrt(3)]) * 1e-4
    va = _ray_parity_volume(a, lo, spacing, shape, jitter)
    vb = _ray_parity_volume(b, lo, spacing, shape, jitter)
    union = np.count_nonzero(va | vb)
    return 1.0 if union == 0 else np.count_nonzero(va & vb) / union


def evaluate(pred: TriangleMesh, gt: TriangleMesh, hand_labels=HAND_LABELS, samples=50000,
             iou_resolution=128, unit_scale=1000.0, seed=0) -> EvalReport:
    """Compare a predicted mesh with ground truth.

    Distances are scaled by ``unit_scale`` (scene metres to millimetres by
    default). The hands split uses ground-truth face labels: ground-truth
    samples on hand faces, and predicted samples whose closest ground-truth
    face is a hand face.
    """
    ps, pf, _ = sample_surface_with_faces(pred, samples, seed)
    gs, gf, _ = sample_surface_with_faces(gt, samples, seed + 1)
    d_pg, face_pg = point_to_mesh(ps.positions, gt, seed=seed + 2)
    d_gp, face_gp = point_to_mesh(gs.positions, pred, seed=seed + 3)
    n_gt = gt.face_normals()
    n_pred = pred.face_normals()
    cos_pg = np.einsum("ij,ij->i", ps.normals, n_gt[face_pg])
    cos_gp = np.einsum("ij,ij->i", gs.normals, n_pred[face_gp])
    cd = 0.5 * (d_pg.mean() + d_gp.mean()) * unit_scale
    cd_max = max(d_pg.max(), d_gp.max()) * unit_scale
    nc = 0.5 * (cos_pg.mean() + cos_gp.mean())
    try:
        iou = volumetric_iou(pred, gt, iou_resolution, seed)
    except OpenMesh:
        log.warning("open mesh: IoU not reported")
        iou = None
    hands = {}
    if gt.face_labels is not None and hand_labels:
        labels = np.array(sorted(int(h) for h in hand_labels))
        sel_g = np.isin(gt.face_labels[gf], labels)
        sel_p = np.isin(gt.face_labels[face_pg], labels)
        if sel_g.any() and sel_p.any():
            hands = {
                "cd_hands": 0.5 * (d_pg[sel_p].mean() + d_gp[sel_g].mean()) * unit_scale,
                "cd_max_hands": max(d_pg[sel_p].max(), d_gp[sel_g].max()) * unit_scale,
                "nc_hands": 0.5 * (cos_pg[sel_p].mean() + cos_gp[sel_g].mean()),
            }
    return EvalReport(float(cd), float(cd_max), float(nc), None if iou is None else float(iou),
                      **{k: float(v) for k, v in hands.items()})


def nn_distance_variance(points):
    """Variance of each point's distance to its nearest neighbour; low means evenly spread."""
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].var())


def cloud_metrics(points, normals, gt: TriangleMesh, samples=None, unit_scale=1000.0, seed=0):
    """CD, NC and uniformity of an oriented point set against a ground-truth mesh.

    Used where no surface has been extracted yet, e.g. to compare deformed
    template samples with a posed scan. CD averages the point-to-mesh term
    and the term from mesh samples to their nearest point.
    """
    points = np.asarray(points, dtype=np.float64)
    gs, _, _ = sample_surface_with_faces(gt, samples or len(points), seed)
    d_pg, face = point_to_mesh(points, gt, seed=seed + 1)
    d_gp, nn = cKDTree(points).query(gs.positions)
    cd = 0.5 * (d_pg.mean() + d_gp.mean()) * unit_scale
    nc = 0.5 * (np.einsum("ij,ij->i", normals, gt.face_normals()[face]).mean()
                + np.einsum("ij,ij->i", gs.normals, np.asarray(normals)[nn]).mean())
    return {"cd": float(cd), "nc": float(nc), "uniformity": nn_distance_variance(points) * unit_scale ** 2}
