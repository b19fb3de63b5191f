"""Training loops: geometry, semantic transfer, and appearance."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import init_features, pretrain_autoencoder, train_features
from .avatar import Avatar, save_avatar
from .config import TrainConfig
from .deformation import DeformationModel, deform, init_deformation_model, lbs_weights
from .evaluate import cloud_metrics
from .losses import TERMS, chamfer, emd_loss, emd_match, normal_loss, reg_terms, total_loss, weighted_terms
from .nn import autograd as ag
from .nn.optim import AdamState, adam_step
from .pointcloud import sample_surface
from .semantic import align_to_template_scan, repose_semantic, sample_semantic

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GeometryLog:
    rows: list = field(default_factory=list)          # per-epoch summary
    initial_chamfer: float = float("nan")             # untrained model, first training pose
    warmup: list = field(default_factory=list)        # weight error per warm-up step
    chamfer: list = field(default_factory=list)       # raw chamfer per iteration
    best_chamfer: list = field(default_factory=list)

    def write_csv(self, path):
        write_rows(path, self.rows)


def write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def training_poses(subject, config: TrainConfig):
    n = len(subject.poses) - config.holdout
    if n < 1:
        raise ValueError("holdout leaves no training poses")
    return list(range(n))


def geometry_terms(model: DeformationModel, template_cloud, scan_cloud, pose, config: TrainConfig,
                   registered=None, w_star=None):
    """Loss terms for one template/scan sample pair; disabled terms are ``None``."""
    lw = config.loss
    batch = deform(model, template_cloud, pose)
    terms = dict.fromkeys(TERMS[:4])
    if lw.use_chamfer:
        terms["chamfer"] = chamfer(batch.x_d, scan_cloud.positions)
    if lw.use_emd or lw.use_normal:
        match = emd_match(batch.x_d.data, scan_cloud.positions, k=config.emd_k, rel_tol=config.emd_rel_tol)
        if lw.use_emd:
            terms["emd"] = emd_loss(match, batch.x_d, scan_cloud.positions)
        if lw.use_normal:
            terms["normal"] = normal_loss(batch.n_d, match, scan_cloud.normals)
    if lw.use_reg:
        terms["reg"] = reg_terms(lbs_weights(model, registered), w_star, (batch.delta, batch.theta))
    return terms, batch


def warm_start_lbs(model: DeformationModel, vertices, w_star, iters, lr, batch, rng):
    """Fit LBSNet to reference weights at registered vertices; returns the loss history.

    Cross-entropy rather than squared error: its gradient does not vanish
    where the scaled softmax saturates on the wrong bone.
    """
    params = model.lbs_params()
    state = AdamState.for_params(params, lr=lr)
    history = []
    for _ in range(iters):
        sel = rng.choice(len(vertices), min(batch, len(vertices)), replace=False)
        w = lbs_weights(model, vertices[sel])
        loss = -ag.mean(ag.tsum(ag.log(w + 1e-12) * w_star[sel], axis=1))
        history.append(loss.item())
        adam_step(state, params, ag.grad(loss, params))
    return history


def train_geometry(subject, config: TrainConfig | None = None, poses=None, log_csv=None,
                   checkpoint_dir=None, model: DeformationModel | None = None):
    """Fit DeltaNet and LBSNet so deformed template samples match each posed scan.

    Every epoch visits the training poses in a seeded order. Each iteration
    draws fresh equal-size samples from the template scan and the posed scan.
    """
    config = config or TrainConfig()
    poses = training_poses(subject, config) if poses is None else list(poses)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_deformation_model(subject.skeleton, subject.template_pose, config.arch, config.seed)
    dp, lp = model.delta_params(), model.lbs_params()
    params = dp + lp
    state = AdamState.for_params(params, lr=[config.lr_delta] * len(dp) + [config.lr_lbs] * len(lp))
    body_v = subject.body.mesh.vertices
    w_star = subject.gt_weights
    history = GeometryLog()
    t0 = time.perf_counter()
    first = subject.poses[poses[0]]
    probe = deform(model, sample_surface(subject.template_scan, config.samples, rng), first)
    probe_scan = sample_surface(subject.scans[poses[0]], config.samples, rng)
    history.initial_chamfer = chamfer(probe.x_d.data, probe_scan.positions).item()
    best = history.initial_chamfer
    # the warm start uses the same reference weights as the reg term, so it follows that switch
    if config.lbs_warmup_iters and config.loss.use_reg:
        history.warmup = warm_start_lbs(model, body_v, w_star, config.lbs_warmup_iters,
                                        config.lbs_warmup_lr, config.reg_vertices, rng)
    for epoch in range(config.epochs_geometry):
        sums = dict.fromkeys(TERMS[:4], 0.0)
        sums["total"] = 0.0
        raw = 0.0
        order = rng.permutation(poses)
        for i in order:
            tpl = sample_surface(subject.template_scan, config.samples, rng)
            scan = sample_surface(subject.scans[i], config.samples, rng)
            sel = rng.choice(len(body_v), min(config.reg_vertices, len(body_v)), replace=False)
            terms, batch = geometry_terms(model, tpl, scan, subject.poses[i], config, body_v[sel], w_star[sel])
            total = total_loss(terms, config.loss)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, pose {i}: "
                                       f"{ {k: (None if v is None else v.item()) for k, v in terms.items()} }")
            grads = ag.grad(total, params)
            adam_step(state, params, grads)
            c = terms["chamfer"].item() if terms["chamfer"] is not None else chamfer(batch.x_d.data, scan.positions).item()
            best = min(best, c)
            history.chamfer.append(c)
            history.best_chamfer.append(best)
            raw += c
            for k, v in weighted_terms({k: v for k, v in terms.items() if v is not None}, config.loss).items():
                sums[k] += v
            sums["total"] += value
        row = {"epoch": epoch}
        row.update({k: v / len(order) for k, v in sums.items()})
        row["chamfer_raw"] = raw / len(order)
        row["wall_time"] = time.perf_counter() - t0
        history.rows.append(row)
        log.info("geometry epoch %d total %.4g chamfer %.3g", epoch, row["total"], row["chamfer_raw"])
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_avatar(Avatar((model,)), Path(checkpoint_dir) / f"geometry_epoch{epoch + 1:04d}.spav")
    if log_csv:
        history.write_csv(log_csv)
    return model, history


def transfer(subject, model: DeformationModel, config: TrainConfig | None = None):
    """Sample labelled points on the body and align them to the template scan."""
    config = config or TrainConfig()
    points = sample_semantic(subject.body, config.semantic_points, config.seed)
    result = align_to_template_scan(points, subject.template_scan, iters=config.align_iters,
                                    lr=config.align_lr, seed=config.seed,
                                    tolerance=config.align_tolerance,
                                    emd_kw={"k": config.emd_k, "rel_tol": config.emd_rel_tol})
    return Avatar((model,), result.points), result


def posed_semantic_positions(avatar: Avatar, poses):
    return [repose_semantic(avatar.points, avatar.models, p).positions for p in poses]


def fit_appearance(subject, avatar: Avatar, config: TrainConfig | None = None, poses=None):
    """Pretrain the colour autoencoder, then the per-point features (geometry frozen)."""
    config = config or TrainConfig()
    poses = training_poses(subject, config) if poses is None else list(poses)
    scans = [subject.scans[i] for i in poses]
    colors = np.concatenate([s.vertex_colors for s in scans])
    ae, ae_log = pretrain_autoencoder(colors, epochs=config.ae_epochs, lr=config.ae_lr,
                                      seed=config.seed, spec=config.autoencoder)
    posed = posed_semantic_positions(avatar, [subject.poses[i] for i in poses])
    feats0 = init_features(ae, posed[0], scans[0], mode=config.feature_init, seed=config.seed)
    feats, f_log = train_features(ae, posed, scans, feats0, epochs=config.epochs_appearance,
                                  lr=config.lr_feature, samples=config.samples, k=config.idw_k,
                                  seed=config.seed, mode=config.idw_mode)
    textured = Avatar(avatar.models, avatar.points.with_features(feats), (ae,))
    return textured, {"autoencoder": ae_log, "features": f_log}


def fit_avatar(subject, config: TrainConfig | None = None, appearance=True, out_dir=None):
    """Geometry, transfer and (optionally) appearance in one call."""
    config = config or TrainConfig()
    out = Path(out_dir) if out_dir else None
    model, g_log = train_geometry(subject, config, log_csv=out / "train_geom.csv" if out else None)
    avatar, align = transfer(subject, model, config)
    logs = {"geometry": g_log, "align": align}
    if appearance:
        avatar, a_logs = fit_appearance(subject, avatar, config)
        logs.update(a_logs)
    if out:
        save_avatar(avatar, out / "avatar.spav")
    return avatar, logs


def deformed_metrics(model: DeformationModel, subject, poses, samples, seed=0):
    """Mean :func:`cloud_metrics` of deformed template samples over ``poses``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in poses:
        batch = deform(model, sample_surface(subject.template_scan, samples, rng), subject.poses[i])
        out.append(cloud_metrics(batch.x_d.data, batch.n_d.data, subject.scans[i], seed=seed + i))
    return {k: float(np.mean([m[k] for m in out])) for k in out[0]}


def ablation(subject, config: TrainConfig | None = None, terms=TERMS[:4], eval_poses=None, eval_seed=0):
    """Train with the full loss and with each term in ``terms`` disabled; same seed throughout.

    Returns ``{"full": metrics, term: metrics, ...}`` where metrics are the
    CD (mm), NC and nearest-neighbour-distance variance (mm²) of deformed
    template samples, averaged over ``eval_poses`` (default: the training
    poses). Every run is scored on the same samples, drawn with ``eval_seed``.
    """
    config = config or TrainConfig()
    poses = training_poses(subject, config) if eval_poses is None else list(eval_poses)
    results = {}
    for name in ("full",) + tuple(terms):
        cfg = config if name == "full" else config.with_(loss=config.loss.without(name))
        model, _ = train_geometry(subject, cfg)
        results[name] = deformed_metrics(model, subject, poses, config.samples, eval_seed)
        log.info("ablation %s: %s", name, results[name])
    return results
