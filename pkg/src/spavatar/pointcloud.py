"""Oriented point clouds, triangle meshes, surface sampling and k-NN queries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class EmptyMesh(ValueError):
    pass


class EmptyCloud(ValueError):
    pass


class KTooLarge(ValueError):
    pass


class MissingNormals(ValueError):
    pass


def normalize(v, axis=-1):
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    """Positions with unit normals and optional RGB colours in [0, 1].

    ``labels`` optionally carries one part label per point.
    """

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        nrm = _frozen(self.normals).reshape(-1, 3)
        if len(pos) != len(nrm):
            raise ValueError(f"{len(pos)} positions but {len(nrm)} normals")
        if len(nrm):
            err = np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max()
            if err > 1e-6:
                raise ValueError(f"normals must be unit length (max deviation {err:.3g})")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "normals", nrm)
        if self.colors is not None:
            col = _frozen(self.colors).reshape(-1, 3)
            if len(col) != len(pos):
                raise ValueError("colors must match positions in length")
            object.__setattr__(self, "colors", col)
        if self.labels is not None:
            lab = _frozen(self.labels, np.int64).reshape(-1)
            if len(lab) != len(pos):
                raise ValueError("labels must match positions in length")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.positions)

    def subset(self, index):
        return OrientedPointCloud(
            self.positions[index], self.normals[index],
            None if self.colors is None else self.colors[index],
            None if self.labels is None else self.labels[index],
        )


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None
    face_labels: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_colors is not None:
            c = _frozen(self.vertex_colors).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("vertex_colors must match vertices")
            object.__setattr__(self, "vertex_colors", c)
        if self.face_labels is not None:
            lab = _frozen(self.face_labels, np.int64).reshape(-1)
            if len(lab) != len(f):
                raise ValueError("face_labels must match faces")
            object.__setattr__(self, "face_labels", lab)

    def face_normals(self, unit=True):
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return normalize(n) if unit else n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def vertex_normals(self):
        n = np.zeros_like(self.vertices)
        fn = self.face_normals(unit=False)
        for k in range(3):
            np.add.at(n, self.faces[:, k], fn)
        return normalize(n)

    def edge_counts(self):
        """Map each undirected edge ``(i, j), i < j`` to its face count."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def is_watertight(self):
        if len(self.faces) == 0:
            return False
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))

    def with_vertices(self, vertices):
        return TriangleMesh(vertices, self.faces, self.vertex_colors, self.face_labels)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> OrientedPointCloud:
    """Area-weighted uniform sampling with flat face normals.

    Faces are chosen by stratified inverse-CDF draws (one uniform per
    stratum of width ``1/n``, in shuffled order), so every region's sample
    count stays within about one of its expected share.
    """
    cloud, _, _ = sample_surface_with_faces(mesh, n, seed)
    return cloud


def sample_surface_with_faces(mesh: TriangleMesh, n: int, seed):
    """Like :func:`sample_surface`, also returning face indices and barycentrics."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMesh("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    u = (np.arange(n) + rng.random(n)) / n
    face = np.minimum(np.searchsorted(cdf, rng.permutation(u), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    pos = np.einsum("nk,nkd->nd", bary, tri)
    normals = mesh.face_normals()[face]
    colors = None
    if mesh.vertex_colors is not None:
        colors = np.einsum("nk,nkd->nd", bary, mesh.vertex_colors[mesh.faces[face]])
    labels = None if mesh.face_labels is None else mesh.face_labels[face]
    return OrientedPointCloud(pos, normals, colors, labels), face, bary


class KdIndex:
    """Static k-d tree over a point set (thin wrapper over ``cKDTree``)."""

    def __init__(self, points):
        self.points = _frozen(points).reshape(-1, 3)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k=1):
        """Batch query. Returns ``(distances, indices)`` of shape ``(m, k)``."""
        if k > len(self.points):
            raise KTooLarge(f"k={k} exceeds indexed set size {len(self.points)}")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        d, i = self._tree.query(q, k=k)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i

    def knn(self, query, k):
        """The ``k`` nearest points to one query, ties broken by lower index."""
        if k > len(self.points):
            raise KTooLarge(f"k={k} exceeds indexed set size {len(self.points)}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        extra = min(k + 1, len(self.points))
        d, i = self._tree.query(q, k=extra)
        d, i = np.atleast_1d(d), np.atleast_1d(i)
        if extra > k and d[k] <= d[k - 1]:
            # a tie straddles the cut: gather every point at the k-th distance
            i = np.array(self._tree.query_ball_point(q, d[k - 1] * (1 + 1e-12) + 1e-300))
            d = np.linalg.norm(self.points[i] - q, axis=1)
        order = np.lexsort((i, d))[:k]
        return [(int(i[j]), float(d[j])) for j in order]


def knn(index: KdIndex, query, k: int):
    return index.knn(query, k)
