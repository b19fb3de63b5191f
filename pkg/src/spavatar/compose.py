"""Part-wise composition of two avatars.

``texture`` mode keeps the host's points and geometry and gives the chosen
parts the donor's neural texture, gathered by IDW in template space from the
donor's points of the same label. ``points`` mode swaps the points
themselves (with their features); each point keeps the deformation model of
the avatar it came from.
"""
from __future__ import annotations

import numpy as np

from .appearance import idw_weights
from .avatar import Avatar
from .pointcloud import KdIndex
from .semantic import SemanticPointSet, parse_parts


class EmptyPart(ValueError):
    pass


class IncompatibleAvatars(ValueError):
    pass


def _check(a: Avatar, b: Avatar, mode):
    for av in (a, b):
        if av.points is None:
            raise IncompatibleAvatars("both avatars need semantic points")
    if mode == "texture" and not (a.has_texture and b.has_texture):
        raise IncompatibleAvatars("texture composition needs textured avatars")
    if a.model.skeleton.bone_count != b.model.skeleton.bone_count:
        raise IncompatibleAvatars("avatars must share the skeleton topology")


def _concat(first, second, offset):
    return np.concatenate([first, second + offset])


def prune(avatar: Avatar) -> Avatar:
    """Drop models, templates and decoders no point refers to; indices are remapped."""
    p = avatar.points
    used_g = np.unique(p.source)
    remap_g = np.full(len(avatar.models), -1)
    remap_g[used_g] = np.arange(len(used_g))
    feats = p.features
    tex = p.texture_source
    decoders = avatar.decoders
    if decoders:
        used_t = np.unique(tex)
        remap_t = np.full(len(decoders), -1)
        remap_t[used_t] = np.arange(len(used_t))
        tex = remap_t[tex]
        decoders = tuple(decoders[i] for i in used_t)
    points = SemanticPointSet(tuple(p.templates[i] for i in used_g), remap_g[p.source], p.face_index,
                              p.barycentric, p.normal_offset, p.labels, feats, tex)
    return Avatar(tuple(avatar.models[i] for i in used_g), points, decoders)


def compose(a: Avatar, b: Avatar, parts, mode="texture", k=8) -> Avatar:
    """New avatar: ``a`` with the labels in ``parts`` taken from ``b``."""
    parts = parse_parts(parts) if not isinstance(parts, frozenset) else parts
    if mode not in ("texture", "points"):
        raise ValueError(f"mode must be 'texture' or 'points', got {mode!r}")
    _check(a, b, mode)
    pa, pb = a.points, b.points
    for label in parts:
        if not np.any(pb.labels == label):
            raise EmptyPart(f"donor has no points labelled {label.name.lower()}")
    if not parts:
        return a
    wanted = np.array(sorted(int(x) for x in parts))
    if mode == "texture":
        feats = pa.features.copy()
        tex = pa.texture_source.copy()
        host_pos = pa.positions()
        donor_pos = pb.positions()
        for label in wanted:
            dst = np.flatnonzero(pa.labels == label)
            if dst.size == 0:
                continue
            src = np.flatnonzero(pb.labels == label)
            kk = min(k, src.size)
            d, idx = KdIndex(donor_pos[src]).query(host_pos[dst], kk)
            w = idw_weights(d)
            donor = src[idx]
            # one decoder per host point: the donor's decoder of its nearest neighbour
            owner = pb.texture_source[donor[:, 0]]
            w = w * (pb.texture_source[donor] == owner[:, None])
            w /= w.sum(axis=1, keepdims=True)
            feats[dst] = np.einsum("nk,nkd->nd", w, pb.features[donor])
            tex[dst] = owner + len(a.decoders)
        points = SemanticPointSet(pa.templates, pa.source, pa.face_index, pa.barycentric,
                                  pa.normal_offset, pa.labels, feats, tex)
        return prune(Avatar(a.models, points, a.decoders + b.decoders))
    keep = ~np.isin(pa.labels, wanted)
    take = np.isin(pb.labels, wanted)
    ka, kb = pa.subset(np.flatnonzero(keep)), pb.subset(np.flatnonzero(take))
    feats = None
    if pa.features is not None and pb.features is not None:
        feats = np.concatenate([ka.features, kb.features])
    points = SemanticPointSet(
        pa.templates + pb.templates, _concat(ka.source, kb.source, len(pa.templates)),
        np.concatenate([ka.face_index, kb.face_index]), np.concatenate([ka.barycentric, kb.barycentric]),
        np.concatenate([ka.normal_offset, kb.normal_offset]), np.concatenate([ka.labels, kb.labels]),
        feats, _concat(ka.texture_source, kb.texture_source, len(a.decoders)))
    return prune(Avatar(a.models + b.models, points, a.decoders + b.decoders))
