"""Trainable components: demonstration encoder, learned prior, cross-pose decoder.

Network forwards are batched: points are (B, N, 3) tensors. The module-level
helpers (encode_demo, prior_logits, decode_cross_pose) wrap single scenes.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateConfigurationError, EmptySegmentError, VersionMismatchError
from .geometry import ACTION, ANCHOR, PointCloud, RigidTransform
from .latent import CategoricalPointDistribution, LatentSelection

CHECKPOINT_VERSION = "taxposed-ckpt-v1"

_NEG_BIG = -1e30
_NORM_EPS = 1e-12


def _norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # sqrt with a floor so the gradient is finite when a point coincides
    # with the latent point (hard one-hot sampling).
    return torch.sqrt((x * x).sum(dim=dim) + _NORM_EPS)


def knn_graph(pos: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """kNN indices and the corresponding edge lengths: ((B, N, k), (B, N, k))."""
    d = torch.cdist(pos, pos)
    k = min(k, pos.shape[1])
    near = d.topk(k, dim=-1, largest=False)
    return near.indices, near.values


def gather_neighbors(h: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """h: (B, N, D), idx: (B, N, k) -> (B, N, k, D)."""
    b, n, d = h.shape
    flat = h.reshape(b * n, d)
    offset = torch.arange(b, device=h.device).view(b, 1, 1) * n
    return flat[(idx + offset).reshape(-1)].reshape(b, n, idx.shape[-1], d)


class EdgeConv(nn.Module):
    """Max over neighbors j of relu(W_d (h_j - h_i) + W_c h_i + w_e d_ij + bias).

    Edge features are the neighbor/center feature difference plus the edge
    length d_ij. Nothing here depends on absolute coordinates, so stacked
    layers are invariant to rigid motions of the input positions. The
    per-edge linear is factored so the expensive projection happens once per
    point and is then gathered per edge.
    """

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.diff = nn.Linear(in_dim, out_dim, bias=False)
        self.center = nn.Linear(in_dim, out_dim)
        self.edge = nn.Linear(1, out_dim, bias=False)

    def forward(self, h, idx, dist):
        projected = self.diff(h)  # (B, N, D)
        neighbors = gather_neighbors(projected, idx)  # (B, N, k, D)
        base = (self.center(h) - projected).unsqueeze(2)
        edge = self.edge(dist.unsqueeze(-1))  # (B, N, k, D)
        return F.relu(neighbors + base + edge).max(dim=2).values


class ObjectEncoder(nn.Module):
    """Stack of edge-feature graph layers over a kNN graph built from coordinates.

    Coordinates define the neighborhood graph and its edge lengths; the
    per-point features carry everything else. With rigid-invariant per-point
    features the whole stack is rigid-invariant, which is what lets a
    decoder trained at a handful of poses generalize over SE(3).
    """

    def __init__(self, in_dim, hidden=64, k=16, depth=3):
        super().__init__()
        self.k = k
        dims = [in_dim] + [hidden] * depth
        self.layers = nn.ModuleList(EdgeConv(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, pos, feats):
        idx, dist = knn_graph(pos, self.k)
        h = feats
        for layer in self.layers:
            h = layer(h, idx, dist)
        return h


def pca_frame(points: torch.Tensor, weights: torch.Tensor | None = None):
    """Rotation-canonical coordinates for each object in a batch.

    Returns (canon, axes): `canon` are the centered points expressed in the
    principal-axis frame of the point distribution and `axes` is the
    (B, 3, 3) matrix whose columns are those axes (world vector = canon
    vector @ axes^T). Axis signs are fixed by the third moment of the
    projections, so for an asymmetric shape the frame is a deterministic
    function of the shape rather than of the pose it was observed in. With
    `weights` (B, N) the moments are weighted, which builds the frame from a
    local region instead of the whole cloud. The frame itself is detached:
    it canonicalizes the input instead of participating in the gradient.
    """
    if weights is None:
        w = points.new_full(points.shape[:2], 1.0 / points.shape[1])
    else:
        w = weights / weights.sum(dim=1, keepdim=True).clamp_min(1e-12)
    w = w.detach().unsqueeze(-1)
    centered = points - (w * points).sum(dim=1, keepdim=True)
    with torch.no_grad():
        cov = (w * centered).transpose(-1, -2) @ centered
        axes = torch.linalg.eigh(cov).eigenvectors.flip(-1)  # descending variance
        skew = (w * (centered @ axes) ** 3).sum(dim=1)
        axes = axes * torch.where(skew < 0, -1.0, 1.0).unsqueeze(1)
    return centered @ axes, axes


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention from queries to a context set."""

    def __init__(self, dim):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.scale = dim**-0.5

    def forward(self, h_query, h_context, bias=None):
        scores = (self.q(h_query) @ self.k(h_context).transpose(-2, -1)) * self.scale
        if bias is not None:
            scores = scores + bias.unsqueeze(1)
        attn = F.softmax(scores, dim=-1)
        return attn @ self.v(h_context), scores


class DemoEncoder(nn.Module):
    """Maps a mean-centered demonstration cloud to one logit per point.

    One level of radius-limited neighborhood grouping with shared pointwise
    transforms and max aggregation, followed by a per-point head.
    """

    def __init__(self, hidden=64, k=16, radius=0.5):
        super().__init__()
        self.k = k
        self.radius = radius
        # Grouped edge transform relu(W_r (p_j - p_i) + W_f f_j + bias), factored
        # into per-point projections that are gathered per edge.
        self.rel_lin = nn.Linear(3, hidden, bias=False)
        self.feat_lin = nn.Linear(5, hidden)  # xyz + segment one-hot
        self.pointwise = nn.Sequential(
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU()
        )
        self.head = nn.Linear(hidden, 1)

    def forward(self, points: torch.Tensor, segment: torch.Tensor) -> torch.Tensor:
        centered = points - points.mean(dim=1, keepdim=True)
        onehot = F.one_hot(segment.long(), 2).to(centered.dtype)
        feats = torch.cat([centered, onehot], dim=-1)

        dist = torch.cdist(centered, centered)
        k = min(self.k, points.shape[1])
        near = dist.topk(k, dim=-1, largest=False)

        proj = self.rel_lin(centered)
        edge = gather_neighbors(proj + self.feat_lin(feats), near.indices)
        edge = F.relu(edge - proj.unsqueeze(2))
        in_radius = near.values <= self.radius  # self edge always qualifies
        edge = edge.masked_fill(~in_radius.unsqueeze(-1), _NEG_BIG)
        h = edge.max(dim=2).values

        return self.head(self.pointwise(h)).squeeze(-1)


class LearnedPrior(nn.Module):
    """Per-object graph encoders + cross-object attention -> per-point logits over X."""

    def __init__(self, hidden=64, k=16):
        super().__init__()
        self.enc_action = ObjectEncoder(4, hidden, k)
        self.enc_anchor = ObjectEncoder(1, hidden, k)
        self.attn_action = CrossAttention(hidden)
        self.attn_anchor = CrossAttention(hidden)
        self.head_action = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.head_anchor = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, action_pts: torch.Tensor, anchor_pts: torch.Tensor):
        a = action_pts - action_pts.mean(dim=1, keepdim=True)
        b = anchor_pts - anchor_pts.mean(dim=1, keepdim=True)
        # The action side gets principal-axis coordinates plus distance to
        # centroid: pose-invariant but globally informative. The anchor side
        # gets no seed at all — its per-point features are built purely from
        # neighborhood edge lengths, so every placement-capable region scores
        # the same way no matter how much other structure the anchor has.
        canon_a, _ = pca_frame(action_pts)
        h_a = self.enc_action(a, torch.cat([canon_a, _norm(a).unsqueeze(-1)], dim=-1))
        h_b = self.enc_anchor(b, b.new_zeros(*b.shape[:2], 1))
        ctx_a, _ = self.attn_action(h_a, h_b)
        ctx_b, _ = self.attn_anchor(h_b, h_a)
        logits_a = self.head_action(torch.cat([h_a, ctx_a], dim=-1)).squeeze(-1)
        logits_b = self.head_anchor(torch.cat([h_b, ctx_b], dim=-1)).squeeze(-1)
        return logits_a, logits_b


class CrossPoseDecoder(nn.Module):
    """Latent-conditioned soft-correspondence decoder closing over a weighted rigid fit.

    latent_mode selects the per-point conditioning: "spatial" feeds the
    distance-to-latent-point feature, "none" feeds zeros, "continuous" feeds a
    broadcast latent vector of width latent_dim.
    """

    def __init__(self, hidden=64, k=16, latent_mode="spatial", latent_dim=16):
        super().__init__()
        if latent_mode not in ("spatial", "none", "continuous"):
            raise ValueError(f"unknown latent_mode {latent_mode!r}")
        self.latent_mode = latent_mode
        self.latent_dim = latent_dim
        extra = latent_dim if latent_mode == "continuous" else 1
        self.enc_action = ObjectEncoder(extra + 3, hidden, k)
        self.enc_anchor = ObjectEncoder(extra + 3, hidden, k)
        self.attn = CrossAttention(hidden)
        # Joint head: correspondence residual (3) + raw weight (1) per action point.
        self.head = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU(), nn.Linear(hidden, 4))

    def forward(
        self,
        action_pts: torch.Tensor,
        anchor_pts: torch.Tensor,
        p_a: torch.Tensor | None = None,
        p_b: torch.Tensor | None = None,
        z_vector: torch.Tensor | None = None,
    ):
        if p_a is None:
            p_a = action_pts.mean(dim=1)
        if p_b is None:
            p_b = anchor_pts.mean(dim=1)

        a = action_pts - p_a.unsqueeze(1)
        b = anchor_pts - p_b.unsqueeze(1)
        if self.latent_mode == "spatial":
            extra_a = _norm(a).unsqueeze(-1)
            extra_b = _norm(b).unsqueeze(-1)
        elif self.latent_mode == "none":
            extra_a = torch.zeros(*a.shape[:2], 1, dtype=a.dtype)
            extra_b = torch.zeros(*b.shape[:2], 1, dtype=b.dtype)
        else:
            if z_vector is None:
                raise ValueError("continuous latent mode requires z_vector")
            extra_a = z_vector.unsqueeze(1).expand(-1, a.shape[1], -1)
            extra_b = z_vector.unsqueeze(1).expand(-1, b.shape[1], -1)

        # Pose-canonical per-point coordinates alongside the latent feature:
        # the embeddings (and hence the correspondence map) depend on the
        # shapes, not on the poses they were observed in; the rigid fit below
        # recovers the pose from the anchor points themselves. The anchor
        # frame is built from a Gaussian neighborhood of the latent point
        # (bandwidth = the action's spatial extent) so it describes the
        # selected placement region and is unaffected by how much other
        # structure the anchor carries elsewhere.
        canon_a, _ = pca_frame(action_pts)
        var_a = (action_pts - action_pts.mean(dim=1, keepdim=True)).pow(2).sum(-1).mean(1, keepdim=True)
        w_b = torch.exp(-(b * b).sum(-1) / (2.0 * var_a))
        canon_b, axes_b = pca_frame(anchor_pts, w_b)
        h_a = self.enc_action(a, torch.cat([canon_a, extra_a], dim=-1))
        h_b = self.enc_anchor(b, torch.cat([canon_b, extra_b], dim=-1))
        # Window the correspondence attention to the latent's neighborhood.
        # Anchor regions that could host a placement look alike point-by-
        # point, so without the window every far look-alike bleeds attention
        # mass, and the leak grows with how much other structure the anchor
        # has. The additive log-Gaussian bias suppresses far points by their
        # distance, independent of how many there are.
        ctx, scores = self.attn(h_a, h_b, bias=torch.log(w_b.clamp_min(1e-30)))
        corr_weights = F.softmax(scores, dim=-1)  # convex rows over anchor points
        virtual = corr_weights @ b

        out = self.head(torch.cat([h_a, ctx], dim=-1))
        # The residual is predicted in the anchor's canonical frame and
        # rotated out, so it moves with the anchor like the virtual points do.
        residual = out[..., :3] @ axes_b.transpose(-1, -2)
        weights = F.softplus(out[..., 3]) + 1e-6

        targets = virtual + residual  # latent-centered anchor frame
        rot, t_c = weighted_rigid_fit_torch(a, targets, weights)

        # Back out of the latent-centered frames: T_world = Trans(p_B) o T_c o Trans(-p_A)
        translation = t_c + p_b - (rot @ p_a.unsqueeze(-1)).squeeze(-1)
        correspondences = targets + p_b.unsqueeze(1)  # world frame
        return {
            "rotation": rot,
            "translation": translation,
            "correspondences": correspondences,
            "weights": weights,
            "corr_logits": scores,
        }


def weighted_rigid_fit_torch(source: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor):
    """Differentiable batched weighted Kabsch; returns ((B,3,3) rotation, (B,3) translation)."""
    w = weights / weights.sum(dim=-1, keepdim=True)
    src_centroid = (w.unsqueeze(-1) * source).sum(dim=-2)
    tgt_centroid = (w.unsqueeze(-1) * targets).sum(dim=-2)
    src_c = source - src_centroid.unsqueeze(-2)
    tgt_c = targets - tgt_centroid.unsqueeze(-2)
    cov = (src_c * w.unsqueeze(-1)).transpose(-2, -1) @ tgt_c
    u, s, vt = torch.linalg.svd(cov)
    s_det = s.detach()
    if bool((s_det[..., 1] < 1e-9 * s_det[..., 0].clamp_min(1e-30)).any()):
        raise DegenerateConfigurationError("weighted source points are collinear or coincident")
    d = torch.sign(torch.det(vt.transpose(-2, -1) @ u.transpose(-2, -1)))
    diag = torch.ones(*d.shape, 3, dtype=source.dtype, device=source.device)
    diag[..., 2] = d
    rot = (vt.transpose(-2, -1) * diag.unsqueeze(-2)) @ u.transpose(-2, -1)
    translation = tgt_centroid - (rot @ src_centroid.unsqueeze(-1)).squeeze(-1)
    return rot, translation


class ContinuousDemoEncoder(nn.Module):
    """Pooled Gaussian posterior over a fixed-width latent vector (ablation)."""

    def __init__(self, hidden=64, z_dim=16):
        super().__init__()
        self.point_mlp = nn.Sequential(nn.Linear(5, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())
        self.head = nn.Linear(hidden, 2 * z_dim)
        self.z_dim = z_dim

    def forward(self, points: torch.Tensor, segment: torch.Tensor):
        centered = points - points.mean(dim=1, keepdim=True)
        onehot = F.one_hot(segment.long(), 2).to(centered.dtype)
        h = self.point_mlp(torch.cat([centered, onehot], dim=-1)).max(dim=1).values
        out = self.head(h)
        return out[..., : self.z_dim], out[..., self.z_dim :]


def _check_segments(cloud: PointCloud):
    if not cloud.action_mask.any():
        raise EmptySegmentError("cloud has no action points")
    if not cloud.anchor_mask.any():
        raise EmptySegmentError("cloud has no anchor points")


def _to_tensor(arr: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def encode_demo(enc: DemoEncoder, Y: PointCloud, dtype=torch.float32):
    """Per-object categorical logits from a demonstration cloud (mean-centered inside)."""
    _check_segments(Y)
    points = _to_tensor(Y.points, dtype).unsqueeze(0)
    segment = torch.as_tensor(Y.segment).unsqueeze(0)
    logits = enc(points, segment).squeeze(0)
    return (
        CategoricalPointDistribution(logits[Y.action_mask], ACTION),
        CategoricalPointDistribution(logits[Y.anchor_mask], ANCHOR),
    )


def prior_logits(prior: LearnedPrior, X: PointCloud, dtype=torch.float32):
    """Per-object categorical logits over an observed scene."""
    _check_segments(X)
    logits_a, logits_b = prior(
        _to_tensor(X.action_points, dtype).unsqueeze(0),
        _to_tensor(X.anchor_points, dtype).unsqueeze(0),
    )
    return (
        CategoricalPointDistribution(logits_a.squeeze(0), ACTION),
        CategoricalPointDistribution(logits_b.squeeze(0), ANCHOR),
    )


def decode_cross_pose(dec: CrossPoseDecoder, X: PointCloud, z: LatentSelection | None, dtype=torch.float32):
    """Decode a cross-pose from an observation and a latent selection.

    The latent points are re-materialized against X's points from the
    selection weights, so a selection sampled on corresponding points of
    another cloud (the demonstration) conditions the decode on X.
    """
    _check_segments(X)
    action = _to_tensor(X.action_points, dtype).unsqueeze(0)
    anchor = _to_tensor(X.anchor_points, dtype).unsqueeze(0)
    p_a = p_b = None
    if z is not None:
        w_a = z.weights_A.to(dtype)
        w_b = z.weights_B.to(dtype)
        if w_a.shape[0] != action.shape[1] or w_b.shape[0] != anchor.shape[1]:
            raise DegenerateConfigurationError(
                "latent selection weights do not match the cloud's segment sizes"
            )
        p_a = (w_a @ action.squeeze(0)).unsqueeze(0)
        p_b = (w_b @ anchor.squeeze(0)).unsqueeze(0)
    out = dec(action, anchor, p_a, p_b)
    T = RigidTransform(
        out["rotation"].squeeze(0).detach().numpy(), out["translation"].squeeze(0).detach().numpy()
    )
    return (
        T,
        out["correspondences"].squeeze(0).detach().numpy(),
        out["weights"].squeeze(0).detach().numpy(),
    )


class CrossPoseModel(nn.Module):
    """Container wiring encoder, prior and decoder for one ablation mode."""

    MODES = (
        "spatial_z_learned_prior",
        "spatial_z_uniform_prior",
        "continuous_z_learned_prior",
        "continuous_z_normal_prior",
        "no_latent",
    )

    def __init__(self, mode="spatial_z_learned_prior", hidden=64, k=16, radius=0.5, z_dim=16):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.hparams = {"mode": mode, "hidden": hidden, "k": k, "radius": radius, "z_dim": z_dim}
        self.spatial = mode.startswith("spatial")
        self.continuous = mode.startswith("continuous")

        if self.spatial:
            self.encoder = DemoEncoder(hidden, k, radius)
            self.prior = LearnedPrior(hidden, k) if mode == "spatial_z_learned_prior" else None
            self.decoder = CrossPoseDecoder(hidden, k, latent_mode="spatial")
        elif self.continuous:
            self.encoder = ContinuousDemoEncoder(hidden, z_dim)
            self.prior = (
                ContinuousDemoEncoder(hidden, z_dim) if mode == "continuous_z_learned_prior" else None
            )
            self.decoder = CrossPoseDecoder(hidden, k, latent_mode="continuous", latent_dim=z_dim)
        else:
            self.encoder = None
            self.prior = None
            self.decoder = CrossPoseDecoder(hidden, k, latent_mode="none")


def save_checkpoint(path, model: CrossPoseModel, config: dict | None = None):
    """Versioned container: JSON header + raw little-endian arrays."""
    state = model.state_dict()
    arrays = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arrays.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "hparams": model.hparams,
            "config": config or {},
            "arrays": arrays,
        }
    ).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[CrossPoseModel, dict]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"unsupported checkpoint version {header.get('version')!r}")
        model = CrossPoseModel(**header["hparams"])
        state = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"]).newbyteorder("<")
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype).reshape(spec["shape"])
            state[spec["name"]] = torch.as_tensor(arr.astype(arr.dtype.newbyteorder("=")))
        model.load_state_dict(state)
    return model, header["config"]
