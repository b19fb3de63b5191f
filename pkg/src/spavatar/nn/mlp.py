"""Coordinate MLPs, positional encoding and the colour autoencoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatch, Tensor

ACTIVATIONS = {
    "softplus": ag.softplus,
    "relu": ag.relu,
    "tanh": ag.tanh,
    "none": lambda t: t,
}
OUTPUT_ACTIVATIONS = {
    "none": lambda t: t,
    "sigmoid": ag.sigmoid,
}


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    depth: int
    width: int
    skip_layers: tuple = ()
    activation: str = "softplus"
    output_activation: str = "none"
    last_layer_scale: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if any(s <= 0 or s >= self.depth for s in self.skip_layers):
            raise ValueError("skip layer indices must lie in [1, depth)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    def layer_dims(self):
        dims = []
        for layer in range(self.depth):
            fan_in = self.in_dim if layer == 0 else self.width
            if layer in self.skip_layers:
                fan_in += self.in_dim
            fan_out = self.out_dim if layer == self.depth - 1 else self.width
            dims.append((fan_in, fan_out))
        return dims

    def to_dict(self):
        return {
            "in_dim": self.in_dim, "out_dim": self.out_dim, "depth": self.depth,
            "width": self.width, "skip_layers": list(self.skip_layers),
            "activation": self.activation, "output_activation": self.output_activation,
            "last_layer_scale": self.last_layer_scale,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["skip_layers"] = tuple(d.get("skip_layers", ()))
        return cls(**d)


@dataclass
class Mlp:
    spec: MlpSpec
    params: list = field(default_factory=list)  # [W0, b0, W1, b1, ...]

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x)

    def arrays(self):
        return [p.data for p in self.params]


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform weights, zero biases; the last layer is scaled."""
    params = []
    for layer, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if layer == spec.depth - 1:
            w *= spec.last_layer_scale
        params.append(Tensor(w, requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(spec, params)


def mlp_from_arrays(spec: MlpSpec, arrays) -> Mlp:
    dims = spec.layer_dims()
    if len(arrays) != 2 * len(dims):
        raise ShapeMismatch(f"expected {2 * len(dims)} arrays, got {len(arrays)}")
    for layer, (fan_in, fan_out) in enumerate(dims):
        if arrays[2 * layer].shape != (fan_in, fan_out) or arrays[2 * layer + 1].shape != (fan_out,):
            raise ShapeMismatch(f"layer {layer} parameter shapes do not match spec")
    return Mlp(spec, [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays])


def mlp_forward(spec: MlpSpec, params, x):
    x = ag.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeMismatch(f"input shape {x.shape} does not match in_dim={spec.in_dim}")
    if len(params) != 2 * spec.depth:
        raise ShapeMismatch("parameter count does not match spec depth")
    act = ACTIVATIONS[spec.activation]
    h = x
    for layer in range(spec.depth):
        if layer in spec.skip_layers:
            h = ag.concat([h, x], axis=1)
        h = h @ params[2 * layer] + params[2 * layer + 1]
        if layer < spec.depth - 1:
            h = act(h)
    return OUTPUT_ACTIVATIONS[spec.output_activation](h)


def positional_encoding(x, levels: int):
    """``[x, sin(2^l pi x), cos(2^l pi x)]`` for ``l < levels``.

    Accepts an array of shape ``(..., 3)`` or a :class:`Tensor` of shape
    ``(n, 3)``; returns the same kind. Output width is ``3 + 6 * levels``.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if isinstance(x, Tensor):
        parts = [x]
        for level in range(levels):
            scaled = x * (2.0 ** level * np.pi)
            parts.append(ag.sin(scaled))
            parts.append(ag.cos(scaled))
        return ag.concat(parts, axis=-1)
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for level in range(levels):
        scaled = x * (2.0 ** level * np.pi)
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def scaled_softmax(logits, scale: float = 20.0):
    """Softmax of ``scale * logits`` over the last axis."""
    if isinstance(logits, Tensor):
        return ag.softmax(logits, axis=-1, scale=scale)
    z = scale * np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def tree_softmax(logits: Tensor, parents, scale: float = 20.0) -> Tensor:
    """Kinematic-tree softmax over bone logits.

    Probability mass enters at the root. At each bone the incoming mass is
    split between keeping it and passing it to each child, by a softmax over
    the logits of the bone and its children. Rows sum to one.
    """
    n_bones = len(parents)
    children = [[] for _ in range(n_bones)]
    root = None
    for b, p in enumerate(parents):
        if p is None or p < 0:
            root = b
        else:
            children[p].append(b)
    incoming = [None] * n_bones
    kept = [None] * n_bones
    incoming[root] = None  # mass 1
    order = [root]
    for b in order:
        order.extend(children[b])
        group = [b] + children[b]
        if len(group) == 1:
            kept[b] = incoming[b]
            continue
        split = ag.softmax(logits[:, group], axis=-1, scale=scale)
        mass = incoming[b]
        for slot, member in enumerate(group):
            share = split[:, slot:slot + 1]
            share = share if mass is None else share * mass
            if member == b:
                kept[b] = share
            else:
                incoming[member] = share
    columns = [k if k is not None else Tensor(np.ones((logits.shape[0], 1))) for k in kept]
    return ag.concat(columns, axis=1)


@dataclass(frozen=True)
class AutoencoderSpec:
    latent_dim: int = 16
    encoder_depth: int = 3
    encoder_width: int = 64
    decoder_depth: int = 8
    decoder_width: int = 256

    def encoder(self):
        return MlpSpec(3, self.latent_dim, self.encoder_depth, self.encoder_width)

    def decoder(self):
        return MlpSpec(self.latent_dim, 3, self.decoder_depth, self.decoder_width,
                       output_activation="sigmoid")


def init_autoencoder(spec: AutoencoderSpec, rng):
    return init_mlp(spec.encoder(), rng), init_mlp(spec.decoder(), rng)


def autoencoder_forward(encoder: Mlp, decoder: Mlp, color):
    """Decode the encoding of ``color`` (``(n, 3)`` or a single RGB triple)."""
    single = isinstance(color, (list, tuple)) or (not isinstance(color, Tensor) and np.ndim(color) == 1)
    x = ag.as_tensor(np.atleast_2d(color) if not isinstance(color, Tensor) else color)
    out = decoder(encoder(x))
    if single:
        return out.data[0]
    return out
