"""Spatially-grounded discrete latent: per-point categorical distributions and sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import SegmentMismatchError
from .geometry import ACTION, ANCHOR, PointCloud

EPS = 1e-20


@dataclass
class CategoricalPointDistribution:
    """Unnormalized per-point logits over one object's points."""

    logits: torch.Tensor
    object_id: int

    def __post_init__(self):
        if not isinstance(self.logits, torch.Tensor):
            self.logits = torch.as_tensor(self.logits)
        self.logits = self.logits.reshape(-1)
        if self.object_id not in (ACTION, ANCHOR):
            raise ValueError("object_id must be ACTION or ANCHOR")
        if not torch.isfinite(self.logits).all():
            raise ValueError("logits contain NaN/Inf")

    def probs(self) -> torch.Tensor:
        return normalize(self.logits)


@dataclass
class LatentSelection:
    """One sampled latent point per object, as convex weights over the points."""

    weights_A: torch.Tensor
    weights_B: torch.Tensor
    point_A: torch.Tensor
    point_B: torch.Tensor
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def normalize(logits: torch.Tensor) -> torch.Tensor:
    """Softmax with max-subtraction; stable for logits up to +-1e4."""
    logits = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(logits)
    return e / e.sum(dim=-1, keepdim=True)


def gumbel_noise(shape, rng: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=rng, dtype=dtype)
    return -torch.log(-torch.log(u + EPS) + EPS)


def gumbel_softmax_sample(
    logits: torch.Tensor,
    temperature: float,
    rng: torch.Generator | None = None,
    hard: bool = False,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Differentiable categorical sample: softmax((logits + g) / temperature).

    With hard=True the forward value is one-hot at the argmax while gradients
    flow through the soft weights (straight-through estimator). A fixed noise
    tensor may be passed in place of fresh Gumbel draws.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = gumbel_noise(logits.shape, rng=rng, dtype=logits.dtype)
    y = normalize((logits + noise) / temperature)
    if hard:
        index = y.argmax(dim=-1, keepdim=True)
        y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
        y = y_hard - y.detach() + y
    return y


def categorical_sample(probs: torch.Tensor, rng: torch.Generator | None = None) -> int:
    """Plain (non-relaxed) draw from a probability vector; used at inference."""
    return int(torch.multinomial(probs, 1, generator=rng).item())


def select_latent(
    dist_A: CategoricalPointDistribution,
    dist_B: CategoricalPointDistribution,
    cloud: PointCloud,
    temperature: float,
    rng: torch.Generator | None = None,
    hard: bool = True,
) -> LatentSelection:
    """Sample one latent point per object, independently, via Gumbel-Softmax."""
    action_pts = torch.as_tensor(cloud.action_points, dtype=dist_A.logits.dtype)
    anchor_pts = torch.as_tensor(cloud.anchor_points, dtype=dist_B.logits.dtype)
    if dist_A.logits.shape[0] != action_pts.shape[0]:
        raise SegmentMismatchError(
            f"action distribution has {dist_A.logits.shape[0]} entries for {action_pts.shape[0]} points"
        )
    if dist_B.logits.shape[0] != anchor_pts.shape[0]:
        raise SegmentMismatchError(
            f"anchor distribution has {dist_B.logits.shape[0]} entries for {anchor_pts.shape[0]} points"
        )
    w_a = gumbel_softmax_sample(dist_A.logits, temperature, rng=rng, hard=hard)
    w_b = gumbel_softmax_sample(dist_B.logits, temperature, rng=rng, hard=hard)
    return LatentSelection(
        weights_A=w_a,
        weights_B=w_b,
        point_A=w_a @ action_pts,
        point_B=w_b @ anchor_pts,
        temperature=temperature,
    )


def center_on_latent(P: PointCloud, selection: LatentSelection) -> tuple[PointCloud, PointCloud]:
    """Split P into its action and anchor clouds, each translated onto its latent point."""
    p_a = selection.point_A.detach().cpu().numpy().astype(P.points.dtype)
    p_b = selection.point_B.detach().cpu().numpy().astype(P.points.dtype)
    action = PointCloud(P.action_points - p_a, np.full(P.action_mask.sum(), ACTION))
    anchor = PointCloud(P.anchor_points - p_b, np.full(P.anchor_mask.sum(), ANCHOR))
    return action, anchor
