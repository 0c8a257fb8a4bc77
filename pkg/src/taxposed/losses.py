"""Reconstruction losses, Jensen-Shannon prior matching and the total objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import LengthMismatchError, SegmentMismatchError
from .geometry import RigidTransform
from .latent import CategoricalPointDistribution, normalize

DISPLACEMENT_WEIGHT = 1.0
DIRECT_CORRESPONDENCE_WEIGHT = 0.1
CONSISTENCY_WEIGHT = 1.0
PRIOR_WEIGHT = 1.0

LOG_FLOOR = 1e-12


@dataclass
class LossReport:
    displacement: float
    direct_corr: float
    consistency: float
    prior_jsd: float
    total: float

    CSV_HEADER = "step,displacement,direct_corr,consistency,prior_jsd,total"

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{self.displacement:.10g},{self.direct_corr:.10g},"
            f"{self.consistency:.10g},{self.prior_jsd:.10g},{self.total:.10g}"
        )


def _rotation_translation(T, dtype, like: torch.Tensor):
    if isinstance(T, RigidTransform):
        return (
            torch.as_tensor(T.rotation, dtype=dtype, device=like.device),
            torch.as_tensor(T.translation, dtype=dtype, device=like.device),
        )
    rot, t = T
    return torch.as_tensor(rot, dtype=dtype), torch.as_tensor(t, dtype=dtype)


def _transform_points(T, points: torch.Tensor) -> torch.Tensor:
    rot, t = _rotation_translation(T, points.dtype, points)
    return points @ rot.transpose(-2, -1) + t.unsqueeze(-2)


def displacement_loss(T_pred, T_gt, action_points) -> torch.Tensor:
    """Mean L2 distance between the predicted and ground-truth placements of the action points."""
    pts = torch.as_tensor(action_points) if not isinstance(action_points, torch.Tensor) else action_points
    diff = _transform_points(T_pred, pts) - _transform_points(T_gt, pts)
    return diff.norm(dim=-1).mean()


def direct_correspondence_loss(correspondences, T_gt, action_points) -> torch.Tensor:
    """Mean L2 distance between predicted correspondences and the ground-truth placement."""
    pts = torch.as_tensor(action_points) if not isinstance(action_points, torch.Tensor) else action_points
    corr = torch.as_tensor(correspondences) if not isinstance(correspondences, torch.Tensor) else correspondences
    return (corr - _transform_points(T_gt, pts)).norm(dim=-1).mean()


def consistency_loss(correspondences, T_pred, action_points) -> torch.Tensor:
    """Mean L2 disagreement between the fitted transform and its own correspondences."""
    pts = torch.as_tensor(action_points) if not isinstance(action_points, torch.Tensor) else action_points
    corr = torch.as_tensor(correspondences) if not isinstance(correspondences, torch.Tensor) else correspondences
    return (corr - _transform_points(T_pred, pts)).norm(dim=-1).mean()


def _kl(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    # Flooring inside the logs biases each term by at most ~1e-10.
    return (q * (torch.log(q.clamp_min(LOG_FLOOR)) - torch.log(p.clamp_min(LOG_FLOOR)))).sum()

def jsd(q, p) -> torch.Tensor:
    """Jensen-Shannon divergence between two probability vectors (natural log, in [0, ln 2])."""
    q = torch.as_tensor(q) if not isinstance(q, torch.Tensor) else q
    p = torch.as_tensor(p) if not isinstance(p, torch.Tensor) else p
    if q.shape != p.shape:
        raise LengthMismatchError(f"distribution shapes differ: {tuple(q.shape)} vs {tuple(p.shape)}")
    m = 0.5 * (q + p)
    return 0.5 * _kl(q, m) + 0.5 * _kl(p, m)


def prior_loss(q_dists, p_dists) -> torch.Tensor:
    """Sum of per-object JSDs between encoder and prior distributions.

    Gradients are blocked on the encoder side: only the prior is trained by
    this loss.
    """
    losses = []
    for q_dist, p_dist in zip(q_dists, p_dists, strict=True):
        q_logits = q_dist.logits if isinstance(q_dist, CategoricalPointDistribution) else q_dist
        p_logits = p_dist.logits if isinstance(p_dist, CategoricalPointDistribution) else p_dist
        if q_logits.shape != p_logits.shape:
            raise SegmentMismatchError(
                f"point counts differ: {tuple(q_logits.shape)} vs {tuple(p_logits.shape)}"
            )
        losses.append(jsd(normalize(q_logits.detach()), normalize(p_logits)))
    return sum(losses)


def kl_gaussian(mu_q, logvar_q, mu_p, logvar_p) -> torch.Tensor:
    """KL between diagonal Gaussians; used by the continuous-latent ablations."""
    var_q, var_p = torch.exp(logvar_q), torch.exp(logvar_p)
    return 0.5 * (logvar_p - logvar_q + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0).sum()


def total_objective(
    displacement: torch.Tensor,
    direct_corr: torch.Tensor,
    consistency: torch.Tensor,
    prior_jsd: torch.Tensor,
    prior_weight: float = PRIOR_WEIGHT,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the loss components; returns the scalar to backprop and a report."""
    total = (
        DISPLACEMENT_WEIGHT * displacement
        + DIRECT_CORRESPONDENCE_WEIGHT * direct_corr
        + CONSISTENCY_WEIGHT * consistency
        + prior_weight * prior_jsd
    )
    def _f(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    report = LossReport(
        displacement=_f(displacement),
        direct_corr=_f(direct_corr),
        consistency=_f(consistency),
        prior_jsd=_f(prior_jsd),
        total=_f(total),
    )
    return total, report
