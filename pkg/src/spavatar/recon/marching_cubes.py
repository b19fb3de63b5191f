"""Marching cubes with a generated 256-case table.

The case table is built once at import by tracing the iso-contour on each
cube face and linking the face segments into closed polygons. On faces with
two diagonal inside corners the inside corners are always separated, so two
cells sharing a face always agree on its segments and the extracted surface
has no cracks. Polygons are fanned from a vertex whose diagonals stay off
the cube faces.

Convention: a node is *inside* when its value is below the iso level.
Triangles are wound counter-clockwise seen from the outside, so face normals
point toward increasing values (outward for a signed distance field).
"""
from __future__ import annotations

import numpy as np

from ..pointcloud import TriangleMesh


class EmptySurface(ValueError):
    pass


CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
EDGES = np.array([(a, b) for a in range(8) for b in range(a + 1, 8)
                  if bin(a ^ b).count("1") == 1])
EDGE_AXIS = np.array([int(np.log2(a ^ b)) for a, b in EDGES])
_EDGE_ID = {(int(a), int(b)): i for i, (a, b) in enumerate(EDGES)}


def _edge(a, b):
    return _EDGE_ID[(min(a, b), max(a, b))]


def _faces():
    """Each cube face as (corner ring, outward normal)."""
    faces = []
    for axis in range(3):
        u, v = [d for d in range(3) if d != axis]
        for side in (0, 1):
            ring = []
            for cu, cv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                bits = {axis: side, u: cu, v: cv}
                ring.append(bits[0] | (bits[1] << 1) | (bits[2] << 2))
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            faces.append((ring, normal))
    return faces


FACES = _faces()


def _midpoint(e):
    a, b = EDGES[e]
    return (CORNERS[a] + CORNERS[b]) / 2.0


def _case_polygons(case):
    """Closed edge cycles for one case, wound so normals point outside."""
    inside = [(case >> c) & 1 for c in range(8)]
    succ = {}
    for ring, normal in FACES:
        edges = [_edge(ring[i], ring[(i + 1) % 4]) for i in range(4)]
        crossing = [inside[ring[i]] != inside[ring[(i + 1) % 4]] for i in range(4)]
        hits = [i for i in range(4) if crossing[i]]
        if len(hits) == 2:
            i, j = hits
            segs = [(edges[i], edges[j])]
        elif len(hits) == 4:
            # corner k is cut by face edges k-1 and k; keep inside corners apart
            segs = [(edges[(k - 1) % 4], edges[k]) for k in range(4) if inside[ring[k]]]
        else:
            segs = []
        for e0, e1 in segs:
            p, q = _midpoint(e0), _midpoint(e1)
            # seen from outside the cell, inside corners end up right of p -> q
            a, b = EDGES[e0]
            corner = a if inside[a] else b
            if np.cross(q - p, CORNERS[corner] - p) @ normal > 0:
                e0, e1 = e1, e0
            succ[e0] = e1
    polygons, seen = [], set()
    for start in sorted(succ):
        if start in seen:
            continue
        poly, cur = [], start
        while cur not in seen:
            seen.add(cur)
            poly.append(cur)
            cur = succ[cur]
        polygons.append(poly)
    return polygons


def _edge_faces():
    out = {}
    for f, (ring, _) in enumerate(FACES):
        for i in range(4):
            out.setdefault(_edge(ring[i], ring[(i + 1) % 4]), set()).add(f)
    return out


def _fan_apex(poly, edge_faces):
    # fan diagonals must not lie on a cube face, or the neighbouring cell
    # could emit the same diagonal
    n = len(poly)
    for a in range(n):
        if all(not (edge_faces[poly[a]] & edge_faces[poly[(a + k) % n]]) for k in range(2, n - 1)):
            return a
    raise AssertionError("no interior fan apex")  # cannot happen for cube polygons


def _build_table():
    tris = np.full((256, 12, 3), -1, dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    edge_faces = _edge_faces()
    for case in range(256):
        k = 0
        for poly in _case_polygons(case):
            a = _fan_apex(poly, edge_faces)
            poly = poly[a:] + poly[:a]
            for i in range(1, len(poly) - 1):
                tris[case, k] = (poly[0], poly[i], poly[i + 1])
                k += 1
        counts[case] = k
    width = counts.max()
    return tris[:, :width], counts


TRI_TABLE, TRI_COUNT = _build_table()


def marching_cubes(values, iso=0.0, origin=(0.0, 0.0, 0.0), spacing=1.0) -> TriangleMesh:
    """Extract the ``iso`` level set of a 3-D grid of node values.

    Node ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)``. Vertices are
    shared between cells through an edge-keyed cache, so a closed level set
    yields a watertight mesh.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 3 or min(vals.shape) < 2:
        raise ValueError("values must be a 3-D grid with at least 2 nodes per axis")
    if not (vals.min() < iso <= vals.max()):
        raise EmptySurface(f"iso level {iso!r} outside the grid range [{vals.min()}, {vals.max()}]")
    nx, ny, nz = vals.shape
    inside = vals < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (cx, cy, cz) in enumerate(CORNERS):
        case |= inside[cx:nx - 1 + cx, cy:ny - 1 + cy, cz:nz - 1 + cz].astype(np.int64) << c
    cells = np.flatnonzero((case != 0) & (case != 255))
    if cells.size == 0:
        raise EmptySurface("no cell crosses the iso level")
    cell_case = case.ravel()[cells]
    ntri = TRI_COUNT[cell_case]
    rep = np.repeat(np.arange(cells.size), ntri)
    slot = np.arange(rep.size) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    local = TRI_TABLE[cell_case[rep], slot]                     # (T, 3) local edge ids
    ci, cj, ck = np.unravel_index(cells[rep], case.shape)
    start = EDGES[local][..., 0]                                # corner at the low end
    node = np.stack([ci[:, None] + CORNERS[start][..., 0],
                     cj[:, None] + CORNERS[start][..., 1],
                     ck[:, None] + CORNERS[start][..., 2]], axis=-1)
    gid = (np.ravel_multi_index((node[..., 0], node[..., 1], node[..., 2]), vals.shape) * 3
           + EDGE_AXIS[local])
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    axis = uniq % 3
    n0 = np.stack(np.unravel_index(uniq // 3, vals.shape), axis=1)
    n1 = n0.copy()
    n1[np.arange(len(n1)), axis] += 1
    v0 = vals[n0[:, 0], n0[:, 1], n0[:, 2]]
    v1 = vals[n1[:, 0], n1[:, 1], n1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    verts = n0 + t[:, None] * (n1 - n0)
    verts = np.asarray(origin, dtype=np.float64) + spacing * verts
    return TriangleMesh(verts, inverse.reshape(-1, 3))
