"""The trained avatar bundle and its checkpoint layout.

An avatar is a semantic point set plus the deformation models and colour
decoders its points refer to. Composite avatars keep several of each and
route every point by its ``source`` (geometry) and ``texture_source``
(decoder) index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .appearance import AppearanceModel, color_points
from .deformation import DeformationModel
from .nn.checkpoint import CheckpointError, load_checkpoint, pack_json, save_checkpoint, unpack_json
from .pointcloud import OrientedPointCloud, TriangleMesh
from .semantic import LabeledTemplateMesh, SemanticPointSet, repose_semantic
from .skeleton import PoseParams, Skeleton

FORMAT = "spavatar"


@dataclass(frozen=True, eq=False)
class Avatar:
    models: tuple                             # DeformationModel per geometry source
    points: SemanticPointSet | None = None
    decoders: tuple = ()                      # AppearanceModel per texture source

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "decoders", tuple(self.decoders))
        if self.points is not None and len(self.points.templates) != len(self.models):
            raise ValueError("one deformation model per template is required")

    @property
    def model(self) -> DeformationModel:
        return self.models[0]

    @property
    def has_texture(self):
        return self.points is not None and self.points.features is not None and bool(self.decoders)

    def repose(self, pose: PoseParams) -> OrientedPointCloud:
        """Posed semantic points with labels and, when textured, decoded colours."""
        if self.points is None:
            raise ValueError("avatar has no semantic points; run the transfer step first")
        cloud = repose_semantic(self.points, self.models, pose)
        if not self.has_texture:
            return cloud
        colors = np.clip(self.point_colors(), 0.0, 1.0)
        return OrientedPointCloud(cloud.positions, cloud.normals, colors, cloud.labels)

    def point_colors(self):
        out = np.zeros((len(self.points), 3))
        for s in np.unique(self.points.texture_source):
            sel = self.points.texture_source == s
            out[sel] = self.decoders[s].decode(self.points.features[sel])
        return out

    def color_mesh(self, mesh: TriangleMesh, posed: OrientedPointCloud, k=8, mode="inverse"):
        colors = color_points(mesh.vertices, posed.positions, self.points.features, self.decoders,
                              self.points.texture_source, k, mode)
        return TriangleMesh(mesh.vertices, mesh.faces, np.clip(colors, 0.0, 1.0), mesh.face_labels)


def _template_sections(tpl: LabeledTemplateMesh, prefix):
    out = {prefix + "vertices": tpl.mesh.vertices, prefix + "faces": tpl.mesh.faces,
           prefix + "face_labels": tpl.mesh.face_labels, prefix + "vertex_labels": tpl.vertex_labels}
    if tpl.mesh.vertex_colors is not None:
        out[prefix + "vertex_colors"] = tpl.mesh.vertex_colors
    if tpl.vertex_weights is not None:
        out[prefix + "vertex_weights"] = tpl.vertex_weights
    return out


def _template_from(sections, prefix):
    mesh = TriangleMesh(sections[prefix + "vertices"], sections[prefix + "faces"],
                        sections.get(prefix + "vertex_colors"), sections[prefix + "face_labels"])
    return LabeledTemplateMesh(mesh, sections[prefix + "vertex_labels"], sections.get(prefix + "vertex_weights"))


def avatar_sections(avatar: Avatar) -> dict:
    meta = {"format": FORMAT, "models": len(avatar.models), "decoders": len(avatar.decoders),
            "points": avatar.points is not None,
            "features": avatar.points is not None and avatar.points.features is not None}
    out = {"avatar/meta": pack_json(meta)}
    for i, m in enumerate(avatar.models):
        out.update(m.to_sections(f"model{i}/"))
    for i, d in enumerate(avatar.decoders):
        out.update(d.to_sections(f"appearance{i}/"))
    p = avatar.points
    if p is not None:
        for i, tpl in enumerate(p.templates):
            out.update(_template_sections(tpl, f"template{i}/"))
        out.update({"points/source": p.source, "points/face_index": p.face_index,
                    "points/barycentric": p.barycentric, "points/normal_offset": p.normal_offset,
                    "points/labels": p.labels, "points/texture_source": p.texture_source})
        if p.features is not None:
            out["points/features"] = p.features
    return out


def avatar_from_sections(sections) -> Avatar:
    if "avatar/meta" not in sections:
        raise CheckpointError("not an avatar checkpoint")
    meta = unpack_json(sections["avatar/meta"])
    models = tuple(DeformationModel.from_sections(sections, f"model{i}/") for i in range(meta["models"]))
    decoders = tuple(AppearanceModel.from_sections(sections, f"appearance{i}/")
                     for i in range(meta["decoders"]))
    points = None
    if meta["points"]:
        templates = tuple(_template_from(sections, f"template{i}/") for i in range(meta["models"]))
        points = SemanticPointSet(templates, sections["points/source"], sections["points/face_index"],
                                  sections["points/barycentric"], sections["points/normal_offset"],
                                  sections["points/labels"], sections.get("points/features"),
                                  sections["points/texture_source"])
    return Avatar(models, points, decoders)


def save_avatar(avatar: Avatar, path):
    save_checkpoint(path, avatar_sections(avatar))


def load_avatar(path) -> Avatar:
    return avatar_from_sections(load_checkpoint(path))


def subject_sections(subject) -> dict:
    meta = {"format": "subject", "seed": subject.seed, "skeleton": subject.skeleton.to_json(),
            "template_pose": subject.template_pose.to_json(),
            "poses": [p.to_json() for p in subject.poses]}
    out = {"subject/meta": pack_json(meta)}
    out.update(_template_sections(subject.body, "body/"))
    out["scan/vertex_colors"] = subject.template_scan.vertex_colors
    for i, s in enumerate(subject.scans):
        out[f"scan/{i:04d}"] = s.vertices
    out["capsules"] = np.array([np.r_[a, b, r] for a, b, r in subject.capsules])
    return out


def save_subject(subject, path):
    save_checkpoint(path, subject_sections(subject))


def load_subject(path):
    from .synthetic import SyntheticSubject

    sections = load_checkpoint(path)
    if "subject/meta" not in sections:
        raise CheckpointError(f"{path}: not a subject file")
    meta = unpack_json(sections["subject/meta"])
    body = _template_from(sections, "body/")
    faces, flabels, colors = body.mesh.faces, body.mesh.face_labels, sections["scan/vertex_colors"]
    keys = sorted(k for k in sections if k.startswith("scan/") and k[5:].isdigit())
    scans = tuple(TriangleMesh(sections[k], faces, colors, flabels) for k in keys)
    caps = tuple((c[0:3], c[3:6], float(c[6])) for c in sections["capsules"])
    return SyntheticSubject(int(meta["seed"]), Skeleton.from_json(meta["skeleton"]),
                            PoseParams.from_json(meta["template_pose"]), body, scans[0],
                            tuple(PoseParams.from_json(p) for p in meta["poses"]), scans, caps)
