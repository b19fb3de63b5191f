import numpy as np
import pytest

from spavatar.pointcloud import TriangleMesh


def icosphere(subdivisions=3, radius=1.0):
    """Closed triangulated sphere, outward winding."""
    t = (1.0 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache, nf = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def unit_cube(offset=(0.0, 0.0, 0.0)):
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], float) + offset
    f = np.array([[0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
                  [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]])
    return TriangleMesh(v, f)


@pytest.fixture(scope="session")
def sphere():
    return icosphere(3)


@pytest.fixture(scope="session")
def subject():
    from spavatar.synthetic import generate_subject

    return generate_subject(1, 3)


def directional_fd_error(loss_fn, params, h=1e-6, seed=0):
    """Relative gap between <grad, v> and the central difference of ``loss_fn`` along a random ``v``.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter values.
    """
    from spavatar.nn import autograd as ag

    rng = np.random.default_rng(seed)
    grads = ag.grad(loss_fn(), params)
    dirs = [rng.normal(size=p.shape) for p in params]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    base = [p.data.copy() for p in params]

    def at(step):
        for p, b, d in zip(params, base, dirs):
            p.data[...] = b + step * d
        return loss_fn().item()

    numeric = (at(h) - at(-h)) / (2 * h)
    at(0.0)
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)
