"""Training loop, distributional evaluation, heatmap export."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .datagen import (
    anchor_budget,
    DemonstrationRecord,
    EvalReport,
    SceneObservation,
    ball_occlusion,
    derive_observation,
    downsample,
    ground_truth_cross_pose,
    planar_occlusion,
)
from .errors import NonFiniteLossError
from .geometry import ACTION, ANCHOR, PointCloud, RigidTransform, rotation_angle
from .latent import gumbel_softmax_sample, normalize
from .nets import CrossPoseModel, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    grad_clip: float = 1e-3
    temperature: float = 0.5
    prior_weight: float = 1.0
    steps: int = 5000
    batch_size: int = 8
    seed: int = 0
    mode: str = "spatial_z_learned_prior"
    hidden: int = 64
    k: int = 16
    radius: float = 0.5
    z_dim: int = 16
    points_per_object: int = 64
    occlusion_prob: float = 0.5
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grad_clip <= 0 or self.temperature <= 0:
            raise ValueError("rates and temperature must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.mode not in CrossPoseModel.MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)


@dataclass
class SuccessCriterion:
    tol_R: float = 15.0  # degrees
    tol_t: float = 0.1  # scene units

    def __post_init__(self):
        if self.tol_R <= 0 or self.tol_t <= 0:
            raise ValueError("tolerances must be positive")


def _prepare_sample(record: DemonstrationRecord, config: TrainConfig, rng: np.random.Generator):
    """One training example: augmented demonstration Y, derived observation X, ground truth."""
    cloud = record.cloud
    if rng.random() < config.occlusion_prob:
        occlude = planar_occlusion if rng.random() < 0.5 else ball_occlusion
        action = PointCloud(cloud.action_points, np.full(cloud.action_mask.sum(), ACTION))
        occluded = occlude(action, rng, min_points=config.points_per_object)
        points = np.concatenate([occluded.points, cloud.anchor_points])
        segment = np.concatenate([occluded.segment, np.full(cloud.anchor_mask.sum(), ANCHOR)])
        cloud = PointCloud(points, segment)
    cloud = downsample(
        cloud, config.points_per_object, rng,
        anchor_n=anchor_budget(config.points_per_object, record.num_sites),
    )
    record = dataclasses.replace(record, cloud=cloud)
    obs = derive_observation(record, rng)
    T_gt = ground_truth_cross_pose(obs, record.mode_id)
    return record, obs, T_gt


def _stack_batch(samples):
    """Stack per-sample (record, obs, T_gt) triples into batched tensors.

    Downsampling fixes per-segment counts, so all samples share shapes, with
    action points first in every cloud.
    """
    y_points = torch.stack([torch.as_tensor(r.cloud.points, dtype=torch.float32) for r, _, _ in samples])
    y_segment = torch.stack([torch.as_tensor(r.cloud.segment) for r, _, _ in samples])
    x_action = torch.stack(
        [torch.as_tensor(o.cloud.action_points, dtype=torch.float32) for _, o, _ in samples]
    )
    x_anchor = torch.stack(
        [torch.as_tensor(o.cloud.anchor_points, dtype=torch.float32) for _, o, _ in samples]
    )
    x_points = torch.stack([torch.as_tensor(o.cloud.points, dtype=torch.float32) for _, o, _ in samples])
    x_segment = torch.stack([torch.as_tensor(o.cloud.segment) for _, o, _ in samples])
    gt_rot = torch.stack([torch.as_tensor(t.rotation, dtype=torch.float32) for _, _, t in samples])
    gt_trans = torch.stack([torch.as_tensor(t.translation, dtype=torch.float32) for _, _, t in samples])
    return {
        "y_points": y_points,
        "y_segment": y_segment,
        "x_action": x_action,
        "x_anchor": x_anchor,
        "x_points": x_points,
        "x_segment": x_segment,
        "T_gt": (gt_rot, gt_trans),
        "action_mask": samples[0][0].cloud.action_mask,
        "anchor_mask": samples[0][0].cloud.anchor_mask,
    }


def _training_loss(model: CrossPoseModel, batch: dict, config: TrainConfig):
    """Batch-mean loss components as torch scalars."""
    x_action, x_anchor = batch["x_action"], batch["x_anchor"]
    b = x_action.shape[0]
    zero = torch.zeros(())

    if model.spatial:
        logits = model.encoder(batch["y_points"], batch["y_segment"])
        q_a = logits[:, batch["action_mask"]]
        q_b = logits[:, batch["anchor_mask"]]
        w_a = gumbel_softmax_sample(q_a, config.temperature, hard=True)
        w_b = gumbel_softmax_sample(q_b, config.temperature, hard=True)
        p_a = (w_a.unsqueeze(-2) @ x_action).squeeze(-2)
        p_b = (w_b.unsqueeze(-2) @ x_anchor).squeeze(-2)
        out = model.decoder(x_action, x_anchor, p_a, p_b)
        if model.prior is not None:
            pl_a, pl_b = model.prior(x_action, x_anchor)
            prior_jsd = L.prior_loss((q_a, q_b), (pl_a, pl_b)) / b
        else:
            prior_jsd = zero
    elif model.continuous:
        mu_q, logvar_q = model.encoder(batch["y_points"], batch["y_segment"])
        z = mu_q + torch.exp(0.5 * logvar_q) * torch.randn(mu_q.shape)
        out = model.decoder(x_action, x_anchor, z_vector=z)
        if model.prior is not None:
            mu_p, logvar_p = model.prior(batch["x_points"], batch["x_segment"])
            prior_jsd = L.kl_gaussian(mu_q.detach(), logvar_q.detach(), mu_p, logvar_p) / b
        else:
            prior_jsd = (
                L.kl_gaussian(mu_q, logvar_q, torch.zeros_like(mu_q), torch.zeros_like(logvar_q)) / b
            )
    else:  # no_latent
        out = model.decoder(x_action, x_anchor)
        prior_jsd = zero

    T_pred = (out["rotation"], out["translation"])
    displacement = L.displacement_loss(T_pred, batch["T_gt"], x_action)
    direct = L.direct_correspondence_loss(out["correspondences"], batch["T_gt"], x_action)
    consistency = L.consistency_loss(out["correspondences"], T_pred, x_action)
    return displacement, direct, consistency, prior_jsd


def train(
    config: TrainConfig,
    dataset: list[DemonstrationRecord],
    metrics_path=None,
    checkpoint_path=None,
    log_every: int = 50,
) -> tuple[CrossPoseModel, list[L.LossReport]]:
    """Optimize a model on demonstration records; deterministic for a fixed seed."""
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA]))

    model = CrossPoseModel(config.mode, config.hidden, config.k, config.radius, config.z_dim)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = None
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.steps)

    reports: list[L.LossReport] = []
    metrics_file = None
    if metrics_path is not None:
        metrics_file = open(metrics_path, "w")
        metrics_file.write(L.LossReport.CSV_HEADER + "\n")
    try:
        for step in range(config.steps):
            picks = rng.integers(0, len(dataset), size=config.batch_size)
            samples = [_prepare_sample(dataset[int(i)], config, rng) for i in picks]
            batch = _stack_batch(samples)
            components = _training_loss(model, batch, config)
            total, report = L.total_objective(*components, prior_weight=config.prior_weight)
            if not math.isfinite(report.total):
                _dump_bad_batch(samples, metrics_path)
                raise NonFiniteLossError(f"non-finite loss at step {step}: {report}")
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if scheduler is not None:
                scheduler.step()
            reports.append(report)
            if metrics_file is not None:
                metrics_file.write(report.csv_row(step) + "\n")
                if step % log_every == 0:
                    metrics_file.flush()
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, config.to_dict())
    return model, reports


def _dump_bad_batch(samples, metrics_path):
    out = Path(metrics_path).with_suffix(".bad_batch.npz") if metrics_path else Path("bad_batch.npz")
    arrays = {}
    for j, (record, obs, _) in enumerate(samples):
        arrays[f"sample{j}_Y"] = record.cloud.points
        arrays[f"sample{j}_X"] = obs.cloud.points
    np.savez(out, **arrays)


@torch.no_grad()
def predict_cross_poses(
    model: CrossPoseModel,
    X: PointCloud,
    n_samples: int,
    rng: np.random.Generator,
) -> list[RigidTransform]:
    """Draw latents from the prior and decode one transform per draw (batched)."""
    x_action = torch.as_tensor(X.action_points, dtype=torch.float32).unsqueeze(0)
    x_anchor = torch.as_tensor(X.anchor_points, dtype=torch.float32).unsqueeze(0)
    na, nb = x_action.shape[1], x_anchor.shape[1]

    if model.spatial:
        if model.prior is not None:
            logits_a, logits_b = model.prior(x_action, x_anchor)
            probs_a = normalize(logits_a.squeeze(0)).numpy().astype(np.float64)
            probs_b = normalize(logits_b.squeeze(0)).numpy().astype(np.float64)
            probs_a /= probs_a.sum()
            probs_b /= probs_b.sum()
        else:
            probs_a = np.full(na, 1.0 / na)
            probs_b = np.full(nb, 1.0 / nb)
        idx_a = rng.choice(na, size=n_samples, p=probs_a)
        idx_b = rng.choice(nb, size=n_samples, p=probs_b)
        p_a = x_action[0, idx_a]
        p_b = x_anchor[0, idx_b]
        out = model.decoder(
            x_action.expand(n_samples, -1, -1), x_anchor.expand(n_samples, -1, -1), p_a, p_b
        )
    elif model.continuous:
        if model.prior is not None:
            x_points = torch.as_tensor(X.points, dtype=torch.float32).unsqueeze(0)
            x_segment = torch.as_tensor(X.segment).unsqueeze(0)
            mu, logvar = model.prior(x_points, x_segment)
            eps = torch.as_tensor(
                rng.standard_normal((n_samples, mu.shape[-1])), dtype=torch.float32
            )
            z = mu + torch.exp(0.5 * logvar) * eps
        else:
            z = torch.as_tensor(
                rng.standard_normal((n_samples, model.decoder.latent_dim)), dtype=torch.float32
            )
        out = model.decoder(
            x_action.expand(n_samples, -1, -1), x_anchor.expand(n_samples, -1, -1), z_vector=z
        )
    else:
        single = model.decoder(x_action, x_anchor)
        T = RigidTransform(single["rotation"][0].numpy(), single["translation"][0].numpy())
        return [T] * n_samples

    return [
        RigidTransform(out["rotation"][i].numpy(), out["translation"][i].numpy())
        for i in range(n_samples)
    ]


def placement_errors(T_pred: RigidTransform, obs: SceneObservation) -> tuple[int, float, float]:
    """(closest mode, rotation error in degrees, translation error) vs the closest valid mode.

    Closest = smallest action-centroid translation error, rotation geodesic
    as tie-break.
    """
    centroid = obs.cloud.action_points.mean(axis=0)
    pred_c = T_pred.apply(centroid)
    best = None
    for i in range(obs.source.num_sites):
        T_i = ground_truth_cross_pose(obs, i)
        eps_t = float(np.linalg.norm(pred_c - T_i.apply(centroid)))
        eps_r = math.degrees(rotation_angle(T_pred.rotation, T_i.rotation))
        key = (eps_t, eps_r)
        if best is None or key < best[0]:
            best = (key, i)
    (eps_t, eps_r), mode = best
    return mode, eps_r, eps_t


def evaluate(
    model: CrossPoseModel,
    dataset: list[DemonstrationRecord],
    samples_per_scene: int,
    criterion: SuccessCriterion,
    seed: int = 0,
    points_per_object: int = 64,
) -> EvalReport:
    """Distributional evaluation: sample latents per scene, score against the closest mode."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE]))
    n_modes = max(rec.num_sites for rec in dataset)
    mode_counts = np.zeros(n_modes)
    successes = []
    best_of = []
    all_eps_r = []
    all_eps_t = []
    for record in dataset:
        cloud = downsample(
            record.cloud, points_per_object, rng,
            anchor_n=anchor_budget(points_per_object, record.num_sites),
        )
        obs = derive_observation(dataclasses.replace(record, cloud=cloud), rng)
        preds = predict_cross_poses(model, obs.cloud, samples_per_scene, rng)
        scene_success = False
        for T_pred in preds:
            mode, eps_r, eps_t = placement_errors(T_pred, obs)
            mode_counts[mode] += 1
            ok = eps_r <= criterion.tol_R and eps_t <= criterion.tol_t
            successes.append(ok)
            scene_success = scene_success or ok
            all_eps_r.append(eps_r)
            all_eps_t.append(eps_t)
        best_of.append(scene_success)
    freq = mode_counts / mode_counts.sum()
    return EvalReport(
        success_rate=float(np.mean(successes)),
        eps_R=float(np.mean(all_eps_r)),
        eps_t=float(np.mean(all_eps_t)),
        mode_frequencies=freq.tolist(),
        best_of_success_rate=float(np.mean(best_of)),
        samples=len(successes),
    )


@torch.no_grad()
def export_prior_heatmap(model: CrossPoseModel, scene: PointCloud, path):
    """Write 'x y z prob' lines, one per scene point, from the prior distribution."""
    if not model.spatial:
        raise ValueError("heatmap export requires a spatial-latent model")
    x_action = torch.as_tensor(scene.action_points, dtype=torch.float32).unsqueeze(0)
    x_anchor = torch.as_tensor(scene.anchor_points, dtype=torch.float32).unsqueeze(0)
    if model.prior is not None:
        logits_a, logits_b = model.prior(x_action, x_anchor)
        probs_a = normalize(logits_a.squeeze(0)).numpy()
        probs_b = normalize(logits_b.squeeze(0)).numpy()
    else:
        probs_a = np.full(x_action.shape[1], 1.0 / x_action.shape[1])
        probs_b = np.full(x_anchor.shape[1], 1.0 / x_anchor.shape[1])
    probs = np.empty(len(scene))
    probs[scene.action_mask] = probs_a
    probs[scene.anchor_mask] = probs_b
    with open(path, "w") as f:
        for p, v in zip(scene.points, probs):
            f.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {v:.8g}\n")
