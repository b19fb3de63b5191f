"""Training configuration and its JSON form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .deformation import Architecture
from .losses import LossWeights
from .nn.mlp import AutoencoderSpec


class ConfigError(ValueError):
    pass


def desk_architecture():
    """Narrower DeltaNet so a full single-core run fits a desk budget."""
    return Architecture(delta_width=128)


def desk_autoencoder():
    return AutoencoderSpec(decoder_width=128)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    samples: int = 4096                 # points per scan and per template sample
    epochs_geometry: int = 100
    epochs_appearance: int = 20
    lr_delta: float = 5e-4
    lr_lbs: float = 1e-4
    lr_feature: float = 1e-3
    loss: LossWeights = field(default_factory=LossWeights)
    arch: Architecture = field(default_factory=desk_architecture)
    autoencoder: AutoencoderSpec = field(default_factory=desk_autoencoder)
    idw_k: int = 8
    idw_mode: str = "inverse"
    psr_resolution: int = 128
    psr_sigma: float = 2.0
    reg_vertices: int = 2048            # registered template vertices per iteration
    lbs_warmup_iters: int = 300         # LBSNet fitted to the reference weights before training
    lbs_warmup_lr: float = 1e-3
    emd_k: int = 32                     # candidate neighbours for the sparse auction
    emd_rel_tol: float = 0.01
    holdout: int = 0                    # trailing poses kept out of training
    checkpoint_every: int = 0           # epochs; 0 disables periodic checkpoints
    semantic_points: int = 10000
    align_iters: int = 60
    align_lr: float = 0.02
    align_tolerance: float = 2.5e-4      # above the 10k-point sampling floor of about 1.4e-4
    ae_epochs: int = 150
    ae_lr: float = 1e-3
    feature_init: str = "encoder"       # "encoder" or "random"

    def __post_init__(self):
        for name in ("samples", "idw_k", "reg_vertices", "emd_k", "semantic_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs_geometry", "epochs_appearance", "holdout", "checkpoint_every", "lbs_warmup_iters",
                     "align_iters", "ae_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("lr_delta", "lr_lbs", "lr_feature", "align_lr", "ae_lr", "lbs_warmup_lr", "psr_sigma", "emd_rel_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.feature_init not in ("encoder", "random"):
            raise ConfigError("feature_init must be 'encoder' or 'random'")
        if self.idw_mode not in ("inverse", "distance"):
            raise ConfigError("idw_mode must be 'inverse' or 'distance'")

    @classmethod
    def paper_scale(cls, **kw):
        """Full-size sampling, networks and grid."""
        return cls(samples=51200, arch=Architecture(), autoencoder=AutoencoderSpec(),
                   psr_resolution=512, **kw)

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, base=None):
        base = base or cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "loss" in kw:
                kw["loss"] = LossWeights(**{**asdict(base.loss), **kw["loss"]})
            if "arch" in kw:
                kw["arch"] = Architecture.from_dict({**base.arch.to_dict(), **kw["arch"]})
            if "autoencoder" in kw:
                kw["autoencoder"] = AutoencoderSpec(**{**asdict(base.autoencoder), **kw["autoencoder"]})
            return replace(base, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path, base=None):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data, base)
