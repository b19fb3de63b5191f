"""Procedural articulated subject with exact ground truth.

The bare body is a smooth union of capsules, one per bone, meshed with
marching cubes. Reference skinning weights are a softmax over negated
capsule distances. The clothed template scan pushes the body out along its
normals by a per-bone garment thickness; posed scans skin that template with
the reference weights and then add a wrinkle displacement that grows with
joint bending and vanishes at rest.

Posing here deliberately uses its own kinematics (``scipy`` rotations and an
explicit per-bone loop) so it can serve as an oracle for :mod:`skeleton`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .pointcloud import TriangleMesh
from .recon.marching_cubes import marching_cubes
from .semantic import LabeledTemplateMesh, PartLabel
from .skeleton import PoseParams, Skeleton

BONES = (
    # name, parent, rest offset, part
    ("pelvis", None, (0.0, 0.95, 0.0), PartLabel.BODY),
    ("spine", "pelvis", (0.0, 0.25, 0.0), PartLabel.BODY),
    ("head", "spine", (0.0, 0.30, 0.0), PartLabel.HEAD),
    ("l_shoulder", "spine", (0.08, 0.22, 0.0), PartLabel.BODY),
    ("l_upperarm", "l_shoulder", (0.12, 0.0, 0.0), PartLabel.LEFT_ARM),
    ("l_forearm", "l_upperarm", (0.28, 0.0, 0.0), PartLabel.LEFT_ARM),
    ("l_hand", "l_forearm", (0.25, 0.0, 0.0), PartLabel.LEFT_HAND),
    ("r_shoulder", "spine", (-0.08, 0.22, 0.0), PartLabel.BODY),
    ("r_upperarm", "r_shoulder", (-0.12, 0.0, 0.0), PartLabel.RIGHT_ARM),
    ("r_forearm", "r_upperarm", (-0.28, 0.0, 0.0), PartLabel.RIGHT_ARM),
    ("r_hand", "r_forearm", (-0.25, 0.0, 0.0), PartLabel.RIGHT_HAND),
    ("l_thigh", "pelvis", (0.10, -0.05, 0.0), PartLabel.LEFT_LEG),
    ("l_shin", "l_thigh", (0.0, -0.42, 0.0), PartLabel.LEFT_LEG),
    ("l_foot", "l_shin", (0.0, -0.40, 0.0), PartLabel.LEFT_LEG),
    ("r_thigh", "pelvis", (-0.10, -0.05, 0.0), PartLabel.RIGHT_LEG),
    ("r_shin", "r_thigh", (0.0, -0.42, 0.0), PartLabel.RIGHT_LEG),
    ("r_foot", "r_shin", (0.0, -0.40, 0.0), PartLabel.RIGHT_LEG),
)

# joint limits per bone (radians, min/max for x, y, z); right side mirrors y and z
_LIMITS = {
    "pelvis": ((-0.1, 0.1), (-0.4, 0.4), (-0.1, 0.1)),
    "spine": ((-0.25, 0.25), (-0.25, 0.25), (-0.2, 0.2)),
    "head": ((-0.4, 0.4), (-0.5, 0.5), (-0.3, 0.3)),
    "shoulder": ((0.0, 0.0), (-0.15, 0.15), (-0.15, 0.2)),
    "upperarm": ((-0.5, 0.5), (-0.6, 0.6), (-0.9, 0.3)),
    "forearm": ((-0.3, 0.3), (-1.3, 0.0), (0.0, 0.0)),
    "hand": ((-0.4, 0.4), (-0.3, 0.3), (-0.4, 0.4)),
    "thigh": ((-1.0, 0.4), (-0.3, 0.3), (-0.3, 0.3)),
    "shin": ((0.0, 1.4), (0.0, 0.0), (0.0, 0.0)),
    "foot": ((-0.3, 0.3), (-0.2, 0.2), (-0.2, 0.2)),
}

# garment thickness per bone (meters): a shirt on the torso and upper arms, trousers on the legs
_CLOTH = {"pelvis": 0.012, "spine": 0.015, "l_shoulder": 0.012, "r_shoulder": 0.012,
          "l_upperarm": 0.008, "r_upperarm": 0.008, "l_thigh": 0.010, "r_thigh": 0.010,
          "l_shin": 0.006, "r_shin": 0.006}

# two tones per part: proximal half and distal half of the dominant bone
PALETTE = np.array([
    [[0.90, 0.75, 0.60], [0.35, 0.20, 0.10]],   # head: skin / hair
    [[0.15, 0.35, 0.75], [0.85, 0.85, 0.85]],   # body
    [[0.80, 0.20, 0.20], [0.90, 0.75, 0.60]],   # left arm
    [[0.20, 0.65, 0.25], [0.90, 0.75, 0.60]],   # right arm
    [[0.90, 0.75, 0.60], [0.95, 0.90, 0.30]],   # left hand
    [[0.90, 0.75, 0.60], [0.60, 0.30, 0.70]],   # right hand
    [[0.20, 0.20, 0.25], [0.55, 0.40, 0.20]],   # left leg
    [[0.45, 0.45, 0.50], [0.10, 0.10, 0.10]],   # right leg
])

WEIGHT_TEMPERATURE = 0.01
WEIGHT_FLOOR = 1e-4
WRINKLE_AMPLITUDE = 0.004
WRINKLE_WAVELENGTH = 0.05


@dataclass(frozen=True, eq=False)
class SyntheticSubject:
    seed: int
    skeleton: Skeleton
    template_pose: PoseParams
    body: LabeledTemplateMesh       # bare body with reference weights and labels
    template_scan: TriangleMesh     # clothed, coloured, same connectivity as the body
    poses: tuple                    # PoseParams per scan; pose 0 is the template pose
    scans: tuple                    # TriangleMesh per pose
    capsules: tuple = field(repr=False, default=())

    @property
    def gt_weights(self):
        return self.body.vertex_weights

    def __len__(self):
        return len(self.poses)


def _capsule_distance(points, a, b, r):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1) - r, t


def _smooth_min(d, k=0.03):
    """Log-sum-exp smooth minimum over the last axis."""
    m = d.min(axis=-1)
    return m - k * np.log(np.exp(-(d - m[..., None]) / k).sum(axis=-1))


def _skeleton(rng):
    height = rng.uniform(0.95, 1.05)
    names, parents, offsets = [], [], []
    index = {}
    for name, parent, off, _ in BONES:
        index[name] = len(names)
        names.append(name)
        parents.append(-1 if parent is None else index[parent])
        scale = height * (rng.uniform(0.95, 1.05) if name[2:] in ("upperarm", "forearm", "shin") else 1.0)
        offsets.append(np.array(off) * scale)
    # limbs stay left/right symmetric
    for i, name in enumerate(names):
        if name.startswith("r_"):
            offsets[i] = offsets[index["l_" + name[2:]]] * (-1, 1, 1)
    return Skeleton(tuple(names), tuple(parents), np.array(offsets))


def _capsules(skel: Skeleton, rng):
    j = skel.rest_joints()
    girth = rng.uniform(0.9, 1.1)
    idx = {n: i for i, n in enumerate(skel.names)}
    caps = [None] * skel.bone_count
    caps[idx["pelvis"]] = (j[0] + (-0.08, -0.02, 0), j[0] + (0.08, -0.02, 0), 0.11 * girth)
    caps[idx["spine"]] = (j[0] + (0, 0.06, 0), j[idx["spine"]] + (0, 0.18, 0), 0.13 * girth)
    caps[idx["head"]] = (j[idx["head"]] + (0, 0.06, 0), j[idx["head"]] + (0, 0.16, 0), 0.095)
    for s in "lr":
        sh, ua, fa, ha = (idx[f"{s}_{p}"] for p in ("shoulder", "upperarm", "forearm", "hand"))
        caps[sh] = (j[sh], j[ua], 0.055 * girth)
        caps[ua] = (j[ua], j[fa], 0.05 * girth)
        caps[fa] = (j[fa], j[ha], 0.04 * girth)
        d = (j[ha] - j[fa]) / np.linalg.norm(j[ha] - j[fa])
        caps[ha] = (j[ha] + 0.02 * d, j[ha] + 0.10 * d, 0.035)
        th, sn, ft = (idx[f"{s}_{p}"] for p in ("thigh", "shin", "foot"))
        caps[th] = (j[th], j[sn], 0.075 * girth)
        caps[sn] = (j[sn], j[ft], 0.055 * girth)
        caps[ft] = (j[ft] + (0, -0.02, 0), j[ft] + (0, -0.03, 0.14), 0.04)
    return tuple((np.asarray(a, float), np.asarray(b, float), float(r)) for a, b, r in caps)


def _body_mesh(capsules, spacing=0.012):
    lo = np.min([np.minimum(a, b) - r for a, b, r in capsules], axis=0) - 3 * spacing
    hi = np.max([np.maximum(a, b) + r for a, b, r in capsules], axis=0) + 3 * spacing
    axes = [np.arange(l, h + spacing, spacing) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d = np.stack([_capsule_distance(grid, a, b, r)[0] for a, b, r in capsules], axis=1)
    sdf = _smooth_min(d).reshape(len(axes[0]), len(axes[1]), len(axes[2]))
    return marching_cubes(sdf, 0.0, lo, spacing)


def reference_weights(points, capsules):
    """Softmax of negated capsule distances; tiny weights pruned and rows renormalised."""
    d = np.stack([_capsule_distance(points, a, b, r)[0] for a, b, r in capsules], axis=1)
    z = -(d - d.min(axis=1, keepdims=True)) / WEIGHT_TEMPERATURE
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    w[w < WEIGHT_FLOOR] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _bone_parts():
    return np.array([part for *_, part in BONES])


def _vertex_colors(vertices, weights, capsules):
    dom = weights.argmax(axis=1)
    parts = _bone_parts()[dom]
    t = np.empty(len(vertices))
    for b, (a, e, r) in enumerate(capsules):
        sel = dom == b
        if np.any(sel):
            t[sel] = _capsule_distance(vertices[sel], a, e, r)[1]
    tone = (t >= 0.5).astype(np.int64)
    return PALETTE[parts, tone]


def _face_majority(vertex_labels, faces):
    votes = np.zeros((len(faces), 8), dtype=np.int64)
    rows = np.arange(len(faces))
    for k in range(3):
        votes[rows, vertex_labels[faces[:, k]]] += 1
    return votes.argmax(axis=1)


def _world_transforms(skel: Skeleton, body_pose):
    """Per-bone 4x4 world transforms, root first, via scipy rotations."""
    out = [None] * skel.bone_count
    for b in skel.topological_order():
        local = np.eye(4)
        local[:3, :3] = Rotation.from_euler("xyz", body_pose[b]).as_matrix()
        local[:3, 3] = skel.rest_offsets[b]
        p = skel.parents[b]
        out[b] = local if p < 0 else out[p] @ local
    return np.array(out)


def pose_vertices(skel: Skeleton, template_pose: PoseParams, pose: PoseParams, vertices, weights):
    """Skin ``vertices`` from the template pose to ``pose`` with ``weights``."""
    posed = _world_transforms(skel, pose.body_pose)
    rest = _world_transforms(skel, template_pose.body_pose)
    out = np.zeros_like(vertices)
    homo = np.c_[vertices, np.ones(len(vertices))]
    for b in range(skel.bone_count):
        sel = weights[:, b] > 0
        if not np.any(sel):
            continue
        m = posed[b] @ np.linalg.inv(rest[b])
        out[sel] += weights[sel, b, None] * (homo[sel] @ m.T)[:, :3]
    return out


def random_pose(skel: Skeleton, rng, expression_dim=10):
    angles = np.zeros((skel.bone_count, 3))
    for i, name in enumerate(skel.names):
        key = name if name in _LIMITS else name[2:]
        lim = np.array(_LIMITS[key])
        a = rng.uniform(lim[:, 0], lim[:, 1])
        if name.startswith("r_"):
            a[1:] *= -1.0
        angles[i] = a
    return PoseParams(angles, np.zeros(expression_dim))


def _wrinkles(skel: Skeleton, pose: PoseParams, template_vertices, weights, capsules):
    """Pose-dependent normal displacement, zero at the template pose."""
    bend = np.linalg.norm(pose.body_pose, axis=1)
    bend[skel.root] = 0.0
    amp = WRINKLE_AMPLITUDE * (weights @ np.minimum(bend, 1.0))
    phase = np.zeros(len(template_vertices))
    for b, (a, e, _) in enumerate(capsules):
        axis = (e - a) / np.linalg.norm(e - a)
        phase += weights[:, b] * (template_vertices @ axis)
    return amp * np.sin(2.0 * np.pi * phase / WRINKLE_WAVELENGTH)


def posed_scan(subject: SyntheticSubject, i: int, bump=True) -> TriangleMesh:
    """Regenerate scan ``i`` from the subject's parts."""
    pose = subject.poses[i]
    tpl = subject.template_scan
    if i == 0:
        return tpl
    w = subject.gt_weights
    verts = pose_vertices(subject.skeleton, subject.template_pose, pose, tpl.vertices, w)
    mesh = tpl.with_vertices(verts)
    if bump:
        disp = _wrinkles(subject.skeleton, pose, tpl.vertices, w, subject.capsules)
        mesh = tpl.with_vertices(verts + disp[:, None] * mesh.vertex_normals())
    return mesh


def generate_subject(seed: int = 1, pose_count: int = 8) -> SyntheticSubject:
    """Deterministic subject with ``pose_count`` scans (pose 0 is the rest pose)."""
    if pose_count < 2:
        raise ValueError("pose_count must be at least 2")
    rng = np.random.default_rng(seed)
    skel = _skeleton(rng)
    capsules = _capsules(skel, rng)
    body = _body_mesh(capsules)
    weights = reference_weights(body.vertices, capsules)
    vlabels = _bone_parts()[weights.argmax(axis=1)].astype(np.int64)
    flabels = _face_majority(vlabels, body.faces)
    colors = _vertex_colors(body.vertices, weights, capsules)
    body_mesh = TriangleMesh(body.vertices, body.faces, colors, flabels)
    labeled = LabeledTemplateMesh(body_mesh, vlabels, weights)
    normals = body_mesh.vertex_normals()
    thickness = weights @ np.array([_CLOTH.get(n, 0.0) for n in skel.names])
    scan = TriangleMesh(body.vertices + thickness[:, None] * normals, body.faces, colors, flabels)
    template_pose = PoseParams.zeros(skel.bone_count)
    poses = (template_pose,) + tuple(random_pose(skel, rng) for _ in range(pose_count - 1))
    subject = SyntheticSubject(seed, skel, template_pose, labeled, scan, poses, (), capsules)
    scans = tuple(posed_scan(subject, i) for i in range(pose_count))
    object.__setattr__(subject, "scans", scans)
    return subject
