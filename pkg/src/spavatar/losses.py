"""Training objectives on deformed oriented points.

Every loss takes the prediction as a :class:`Tensor` (gradients flow to it)
and the scan side as plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .emd import SizeMismatch, emd_assignment
from .nn import autograd as ag
from .nn.autograd import Tensor
from .pointcloud import EmptyCloud

TERMS = ("chamfer", "emd", "normal", "reg", "color")


class MissingRegistration(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    chamfer: float = 5000.0
    emd: float = 5000.0
    normal: float = 1.0
    reg: float = 100.0
    color: float = 10.0
    use_chamfer: bool = True
    use_emd: bool = True
    use_normal: bool = True
    use_reg: bool = True
    use_color: bool = True

    def __post_init__(self):
        for t in TERMS:
            if getattr(self, t) < 0:
                raise ValueError(f"loss weight {t} must be nonnegative")

    def enabled(self, term):
        return getattr(self, f"use_{term}")

    def weight(self, term):
        return getattr(self, term) if self.enabled(term) else 0.0

    def without(self, term):
        d = dict(self.__dict__)
        d[f"use_{term}"] = False
        return LossWeights(**d)


@dataclass(frozen=True)
class MatchResult:
    assignment: np.ndarray
    cost: float


def _points(x):
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return data.reshape(-1, 3)


def chamfer(x_d, x_p) -> Tensor:
    """Two-sided mean squared nearest-neighbour distance.

    Gradient flows to ``x_d`` only; ``x_p`` is data.
    """
    x_d = ag.as_tensor(x_d)
    pred, target = _points(x_d), _points(x_p)
    if len(pred) == 0 or len(target) == 0:
        raise EmptyCloud("chamfer needs two non-empty clouds")
    _, nn_p = cKDTree(target).query(pred)
    _, nn_d = cKDTree(pred).query(target)
    diff_d = pred - target[nn_p]
    diff_p = pred[nn_d] - target
    value = (diff_d ** 2).sum(1).mean() + (diff_p ** 2).sum(1).mean()

    def vjp(g):
        grad = 2.0 * diff_d / len(pred)
        np.add.at(grad, nn_d, 2.0 * diff_p / len(target))
        return (g * grad.reshape(x_d.shape),)

    return ag._make(np.asarray(value), (x_d,), vjp)


def emd_match(x_d, x_p, **kw) -> MatchResult:
    pred, target = _points(x_d), _points(x_p)
    if len(pred) != len(target):
        raise SizeMismatch(f"EMD needs equal cardinality, got {len(pred)} vs {len(target)}")
    assignment, cost = emd_assignment(pred, target, **kw)
    return MatchResult(assignment, cost)


def emd_loss(match: MatchResult, x_d, x_p) -> Tensor:
    """Mean distance under a frozen bijection."""
    target = _points(x_p)[match.assignment]
    return ag.mean(ag.norm(ag.as_tensor(x_d) - target, axis=1))


def normal_loss(n_d, match: MatchResult, n_p) -> Tensor:
    """Mean ``1 - cos`` between deformed normals and their matched scan normals."""
    n_d = ag.as_tensor(n_d)
    target = _points(n_p)[match.assignment]
    dots = ag.tsum(n_d * target, axis=1)
    cos = dots / (ag.norm(n_d, axis=1) * np.linalg.norm(target, axis=1))
    return ag.mean(1.0 - cos)


def reg_terms(weights_xx, w_star, offsets) -> Tensor:
    """Mean squared skinning-weight deviation plus mean squared offset norm.

    ``offsets`` is the per-point network output (offset and angles, or any
    subset); pass a tuple to combine several ``(n, k)`` tensors.
    """
    w = ag.as_tensor(weights_xx)
    ref = np.asarray(w_star, dtype=np.float64)
    if w.shape != ref.shape:
        raise SizeMismatch(f"weights {w.shape} vs reference {ref.shape}")
    diff = w - ref
    term = ag.mean(ag.tsum(diff * diff, axis=1))
    if not isinstance(offsets, (tuple, list)):
        offsets = (offsets,)
    sq = None
    for o in offsets:
        o = ag.as_tensor(o)
        s = ag.tsum(o * o, axis=1)
        sq = s if sq is None else sq + s
    return term + ag.mean(sq)


def reg_loss(model, registered_vertices, w_star, offsets) -> Tensor:
    from .deformation import lbs_weights

    if registered_vertices is None or w_star is None:
        raise MissingRegistration("regularization needs registered template vertices and weights")
    return reg_terms(lbs_weights(model, registered_vertices), w_star, offsets)


def color_loss(decoded, colors) -> Tensor:
    diff = ag.as_tensor(decoded) - np.asarray(colors, dtype=np.float64)
    return ag.mean(ag.tsum(diff * diff, axis=1))


def total_loss(terms: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the enabled terms; disabled or missing terms add 0."""
    total = Tensor(0.0)
    for name, value in terms.items():
        if name not in TERMS:
            raise KeyError(f"unknown loss term {name!r}")
        lam = weights.weight(name)
        if lam == 0.0 or value is None:
            continue
        total = total + lam * ag.as_tensor(value)
    return total


def weighted_terms(terms: dict, weights: LossWeights) -> dict:
    return {k: (weights.weight(k) * float(np.asarray(ag.as_tensor(v).data)) if v is not None else 0.0)
            for k, v in terms.items()}
