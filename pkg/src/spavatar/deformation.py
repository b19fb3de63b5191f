"""Pose-dependent offsets (DeltaNet), skinning weight field (LBSNet) and the
template -> canonical -> pose map for oriented points."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.checkpoint import pack_json, unpack_json
from .nn.mlp import Mlp, MlpSpec, init_mlp, mlp_from_arrays, positional_encoding, tree_softmax
from .pointcloud import OrientedPointCloud
from .skeleton import DimensionMismatch, PoseParams, Skeleton, forward_kinematics


@dataclass(frozen=True)
class Architecture:
    """Network sizes. Defaults follow the full-scale setup."""

    delta_depth: int = 8
    delta_width: int = 512
    delta_skip: tuple = (4,)
    lbs_depth: int = 5
    lbs_width: int = 128
    encoder_depth: int = 2
    encoder_width: int = 64
    code_dim: int = 16
    pe_levels: int = 4
    softmax_scale: float = 20.0
    softmax_mode: str = "flat"      # "flat" or "tree"
    lbs_input: str = "template"     # "template" (x) or "canonical" (x + delta)
    expression_dim: int = 10
    delta_init_scale: float = 1e-4
    lbs_init_scale: float = 0.05     # small logits so the scaled softmax starts near uniform

    def to_dict(self):
        d = dict(self.__dict__)
        d["delta_skip"] = list(self.delta_skip)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "delta_skip" in d:
            d["delta_skip"] = tuple(d["delta_skip"])
        return cls(**d)


@dataclass(eq=False)
class DeformationModel:
    skeleton: Skeleton
    template_pose: PoseParams
    arch: Architecture
    encoder: Mlp
    deltanet: Mlp
    lbsnet: Mlp

    def __post_init__(self):
        if self.lbsnet.spec.out_dim != self.skeleton.bone_count:
            raise DimensionMismatch("LBSNet output must equal the bone count")
        if self.deltanet.spec.out_dim != 6:
            raise DimensionMismatch("DeltaNet output must be 6 (offset + Euler angles)")

    def delta_params(self):
        return self.encoder.params + self.deltanet.params

    def lbs_params(self):
        return list(self.lbsnet.params)

    def parameters(self):
        return self.delta_params() + self.lbs_params()

    def to_sections(self, prefix="model/"):
        meta = {"arch": self.arch.to_dict(), "skeleton": self.skeleton.to_json(),
                "template_pose": self.template_pose.to_json()}
        out = {prefix + "meta": pack_json(meta)}
        for name, net in (("encoder", self.encoder), ("deltanet", self.deltanet), ("lbsnet", self.lbsnet)):
            for i, a in enumerate(net.arrays()):
                out[f"{prefix}{name}/{i:02d}"] = a
        return out

    @classmethod
    def from_sections(cls, sections, prefix="model/"):
        meta = unpack_json(sections[prefix + "meta"])
        arch = Architecture.from_dict(meta["arch"])
        skel = Skeleton.from_json(meta["skeleton"])
        specs = network_specs(arch, skel.bone_count)
        nets = []
        for name, spec in zip(("encoder", "deltanet", "lbsnet"), specs):
            keys = sorted(k for k in sections if k.startswith(f"{prefix}{name}/"))
            nets.append(mlp_from_arrays(spec, [sections[k] for k in keys]))
        return cls(skel, PoseParams.from_json(meta["template_pose"]), arch, *nets)


def network_specs(arch: Architecture, n_bones: int):
    pe_dim = 3 + 6 * arch.pe_levels
    enc_in = 3 * (n_bones - 1) + arch.expression_dim
    encoder = MlpSpec(enc_in, arch.code_dim, arch.encoder_depth, arch.encoder_width)
    deltanet = MlpSpec(pe_dim + arch.code_dim, 6, arch.delta_depth, arch.delta_width,
                       skip_layers=tuple(s for s in arch.delta_skip if 0 < s < arch.delta_depth),
                       last_layer_scale=arch.delta_init_scale)
    lbsnet = MlpSpec(pe_dim, n_bones, arch.lbs_depth, arch.lbs_width,
                     last_layer_scale=arch.lbs_init_scale)
    return encoder, deltanet, lbsnet


def init_deformation_model(skeleton: Skeleton, template_pose: PoseParams,
                           arch: Architecture | None = None, seed=0) -> DeformationModel:
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    specs = network_specs(arch, skeleton.bone_count)
    return DeformationModel(skeleton, template_pose, arch, *(init_mlp(s, rng) for s in specs))


def pose_code(model: DeformationModel, pose: PoseParams) -> Tensor:
    """16-d code of the non-root joint angles and expression; shape ``(1, code_dim)``."""
    skel = model.skeleton
    if pose.body_pose.shape != (skel.bone_count, 3):
        raise DimensionMismatch(f"pose has {len(pose.body_pose)} bones, expected {skel.bone_count}")
    if pose.expression.shape != (model.arch.expression_dim,):
        raise DimensionMismatch(f"expression dim {pose.expression.shape[0]}, "
                                f"expected {model.arch.expression_dim}")
    keep = [i for i in range(skel.bone_count) if i != skel.root]
    vec = np.concatenate([pose.body_pose[keep].ravel(), pose.expression])[None, :]
    return model.encoder(vec)


def _positions(points):
    if isinstance(points, OrientedPointCloud):
        return points.positions
    return points


def delta_forward(model: DeformationModel, points, pose: PoseParams):
    """Per-point offset and Euler angles, each a ``(n, 3)`` tensor."""
    x = ag.as_tensor(_positions(points))
    code = pose_code(model, pose)
    feats = ag.concat([positional_encoding(x, model.arch.pe_levels),
                       ag.broadcast_to(code, (x.shape[0], code.shape[1]))], axis=1)
    out = model.deltanet(feats)
    return out[:, 0:3], out[:, 3:6]


def euler_rotation_tensor(theta: Tensor) -> Tensor:
    """Differentiable counterpart of :func:`skeleton.euler_to_rotation`; ``(n, 3, 3)``."""
    a, b, g = theta[:, 0], theta[:, 1], theta[:, 2]
    ca, cb, cg = ag.cos(a), ag.cos(b), ag.cos(g)
    sa, sb, sg = ag.sin(a), ag.sin(b), ag.sin(g)
    rows = [
        cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa,
        sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa,
        -sb, cb * sa, cb * ca,
    ]
    return ag.stack(rows, axis=1).reshape(-1, 3, 3)


def _matvec(m, v):
    return ag.matmul(m, ag.reshape(v, (-1, 3, 1))).reshape(-1, 3)


def _unit(v):
    return v / ag.norm(v, axis=1, keepdims=True)


def apply_delta(positions, normals, delta, theta):
    """``x_c = x + delta`` and ``n_c = R(theta) n``."""
    x = ag.as_tensor(positions)
    n = ag.as_tensor(normals)
    return x + delta, _matvec(euler_rotation_tensor(ag.as_tensor(theta)), n)


def lbs_weights(model: DeformationModel, points) -> Tensor:
    x = ag.as_tensor(_positions(points))
    logits = model.lbsnet(positional_encoding(x, model.arch.pe_levels))
    if model.arch.softmax_mode == "tree":
        return tree_softmax(logits, model.skeleton.parents, model.arch.softmax_scale)
    return ag.softmax(logits, axis=-1, scale=model.arch.softmax_scale)


def lbs_tensor(x, n, weights, relative):
    """Differentiable blend of per-bone ``(B, 4, 4)`` relative transforms."""
    n_bones = relative.shape[0]
    blended = ag.as_tensor(weights) @ Tensor(relative[:, :3, :].reshape(n_bones, 12))
    blended = blended.reshape(-1, 3, 4)
    lin = blended[:, :, 0:3]
    x_d = _matvec(lin, x) + blended[:, :, 3]
    n_d = _unit(_matvec(lin, n))
    return x_d, n_d


@dataclass
class DeformedBatch:
    x_c: Tensor
    n_c: Tensor
    x_d: Tensor
    n_d: Tensor
    weights: Tensor
    delta: Tensor
    theta: Tensor

    def posed_cloud(self, colors=None, labels=None):
        return OrientedPointCloud(self.x_d.data, _renorm(self.n_d.data), colors, labels)

    def canonical_cloud(self):
        return OrientedPointCloud(self.x_c.data, _renorm(self.n_c.data))


def _renorm(n):
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def deform(model: DeformationModel, points, pose: PoseParams, normals=None,
           weights=None, zero_delta=False) -> DeformedBatch:
    """Template points -> canonical (DeltaNet) -> pose space (LBSNet + LBS).

    ``weights`` injects fixed skinning weights in place of LBSNet and
    ``zero_delta`` bypasses DeltaNet; both exist for oracle comparisons.
    """
    if isinstance(points, OrientedPointCloud):
        positions, normals = points.positions, points.normals
    else:
        positions = points
    x = ag.as_tensor(positions)
    n = ag.as_tensor(normals)
    if zero_delta:
        delta = Tensor(np.zeros(x.shape))
        theta = Tensor(np.zeros(x.shape))
        x_c, n_c = x, n
    else:
        delta, theta = delta_forward(model, x, pose)
        x_c, n_c = apply_delta(x, n, delta, theta)
    if weights is None:
        w = lbs_weights(model, x_c if model.arch.lbs_input == "canonical" else x)
    else:
        w = ag.as_tensor(weights)
    bt = forward_kinematics(model.skeleton, pose, model.template_pose)
    x_d, n_d = lbs_tensor(x_c, n_c, w, bt.relative())
    return DeformedBatch(x_c, n_c, x_d, n_d, w, delta, theta)
