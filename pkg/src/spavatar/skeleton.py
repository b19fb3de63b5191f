"""Kinematic tree, Euler-angle poses, forward kinematics and linear blend skinning.

Rotations use R = Rz(gamma) @ Ry(beta) @ Rx(alpha) for angles
``(alpha, beta, gamma)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import OrientedPointCloud, normalize


class DimensionMismatch(ValueError):
    pass


class InvalidWeights(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Skeleton:
    names: tuple
    parents: tuple  # parent index per bone, -1 for the root
    rest_offsets: np.ndarray  # (n_bones, 3) translation from the parent frame

    def __post_init__(self):
        offsets = np.array(self.rest_offsets, dtype=np.float64).reshape(-1, 3)
        offsets.setflags(write=False)
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(-1 if p is None else int(p) for p in self.parents))
        n = len(self.parents)
        if len(self.names) != n or len(offsets) != n:
            raise DimensionMismatch("names, parents and rest_offsets must have equal length")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError(f"skeleton needs exactly one root, found {len(roots)}")
        for i in range(n):
            seen, b = set(), i
            while b >= 0:
                if b in seen:
                    raise ValueError(f"cycle in kinematic tree through bone {i}")
                seen.add(b)
                b = self.parents[b]

    @property
    def bone_count(self):
        return len(self.parents)

    @property
    def root(self):
        return self.parents.index(-1)

    def topological_order(self):
        order, done = [], set()
        while len(order) < self.bone_count:
            for i, p in enumerate(self.parents):
                if i not in done and (p < 0 or p in done):
                    order.append(i)
                    done.add(i)
        return order

    def rest_joints(self):
        """World position of each joint at the zero pose."""
        joints = np.zeros((self.bone_count, 3))
        for i in self.topological_order():
            p = self.parents[i]
            joints[i] = self.rest_offsets[i] + (joints[p] if p >= 0 else 0.0)
        return joints

    def to_json(self):
        return {"bones": [{"name": n, "parent": (None if p < 0 else p), "offset": list(map(float, o))}
                          for n, p, o in zip(self.names, self.parents, self.rest_offsets)]}

    @classmethod
    def from_json(cls, data):
        bones = data["bones"]
        return cls([b["name"] for b in bones],
                   [-1 if b["parent"] is None else b["parent"] for b in bones],
                   [b["offset"] for b in bones])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class PoseParams:
    body_pose: np.ndarray  # (n_bones, 3) Euler angles, radians
    expression: np.ndarray = field(default_factory=lambda: np.zeros(10))

    def __post_init__(self):
        bp = np.array(self.body_pose, dtype=np.float64).reshape(-1, 3)
        ex = np.array(self.expression, dtype=np.float64).reshape(-1)
        bp.setflags(write=False)
        ex.setflags(write=False)
        object.__setattr__(self, "body_pose", bp)
        object.__setattr__(self, "expression", ex)

    @classmethod
    def zeros(cls, n_bones, expression_dim=10):
        return cls(np.zeros((n_bones, 3)), np.zeros(expression_dim))

    def to_json(self):
        return {"body_pose": self.body_pose.tolist(), "expression": self.expression.tolist()}

    @classmethod
    def from_json(cls, data):
        if isinstance(data, list):
            return cls(data)
        return cls(data["body_pose"], data.get("expression", np.zeros(10)))


@dataclass(frozen=True, eq=False)
class BoneTransforms:
    posed: np.ndarray     # (n_bones, 4, 4)  B_i
    template: np.ndarray  # (n_bones, 4, 4)  B_i^c

    def relative(self):
        """``B_i @ inv(B_i^c)`` per bone: template pose to target pose."""
        r = self.template[:, :3, :3]
        inv = np.zeros_like(self.template)
        inv[:, :3, :3] = np.swapaxes(r, 1, 2)
        inv[:, :3, 3] = -np.einsum("bji,bj->bi", r, self.template[:, :3, 3])
        inv[:, 3, 3] = 1.0
        rel = self.posed @ inv
        same = np.all(self.posed == self.template, axis=(1, 2))
        rel[same] = np.eye(4)
        return rel


def euler_to_rotation(angles):
    """Rotation matrix for Euler angles; batched over leading axes."""
    a = np.asarray(angles, dtype=np.float64)
    ca, cb, cg = np.cos(a[..., 0]), np.cos(a[..., 1]), np.cos(a[..., 2])
    sa, sb, sg = np.sin(a[..., 0]), np.sin(a[..., 1]), np.sin(a[..., 2])
    r = np.empty(a.shape[:-1] + (3, 3))
    r[..., 0, 0] = cg * cb
    r[..., 0, 1] = cg * sb * sa - sg * ca
    r[..., 0, 2] = cg * sb * ca + sg * sa
    r[..., 1, 0] = sg * cb
    r[..., 1, 1] = sg * sb * sa + cg * ca
    r[..., 1, 2] = sg * sb * ca - cg * sa
    r[..., 2, 0] = -sb
    r[..., 2, 1] = cb * sa
    r[..., 2, 2] = cb * ca
    return r


def _chain(skel, body_pose):
    rot = euler_to_rotation(body_pose)
    out = np.zeros((skel.bone_count, 4, 4))
    for i in skel.topological_order():
        local = np.eye(4)
        local[:3, :3] = rot[i]
        local[:3, 3] = skel.rest_offsets[i]
        p = skel.parents[i]
        out[i] = local if p < 0 else out[p] @ local
    return out


def forward_kinematics(skel: Skeleton, pose: PoseParams, template_pose: PoseParams) -> BoneTransforms:
    """Compose ``B_i = B_parent @ T(offset_i) @ R(theta_i)`` root to leaf."""
    for p in (pose, template_pose):
        if p.body_pose.shape != (skel.bone_count, 3):
            raise DimensionMismatch(
                f"pose has {len(p.body_pose)} bones, skeleton has {skel.bone_count}")
    return BoneTransforms(_chain(skel, pose.body_pose), _chain(skel, template_pose.body_pose))


def check_weights(weights, n_points, n_bones, tol=1e-5):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_points, n_bones):
        raise DimensionMismatch(f"weights shape {w.shape}, expected {(n_points, n_bones)}")
    if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=1) - 1.0) > tol):
        raise InvalidWeights("skinning weights must be nonnegative with rows summing to 1")
    return w


def lbs_apply(points: OrientedPointCloud, weights, bt: BoneTransforms) -> OrientedPointCloud:
    """Blend per-bone relative transforms; normals use the linear part only."""
    n_bones = bt.posed.shape[0]
    w = check_weights(weights, len(points), n_bones)
    rel = bt.relative()
    blended = np.einsum("nb,bij->nij", w, rel[:, :3, :])
    x = np.einsum("nij,nj->ni", blended[:, :, :3], points.positions) + blended[:, :, 3]
    n = normalize(np.einsum("nij,nj->ni", blended[:, :, :3], points.normals))
    return OrientedPointCloud(x, n, points.colors, points.labels)


def canonical_to_pose(points, weights, skel, pose, template_pose):
    return lbs_apply(points, weights, forward_kinematics(skel, pose, template_pose))
