"""Rigid-body math, point-cloud containers, invariant featurization and rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfigurationError
from .kernels import distance_field

ACTION = 0
ANCHOR = 1

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) element: proper rotation plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(rotation), 1.0, atol=_ORTHO_TOL):
            raise ValueError("rotation is not proper (det != +1)")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(t) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.asarray(t, dtype=np.float64))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return points @ self.rotation.T + self.translation


@dataclass
class PointCloud:
    """Ordered 3D points with a per-point action/anchor label and optional features."""

    points: np.ndarray
    segment: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError("points must be a nonempty N x 3 array")
        if not np.isfinite(self.points).all():
            raise ValueError("points contain NaN/Inf")
        self.segment = np.asarray(self.segment, dtype=np.int64).reshape(-1)
        if self.segment.shape[0] != self.points.shape[0]:
            raise ValueError("segment length must match point count")
        if not np.isin(self.segment, (ACTION, ANCHOR)).all():
            raise ValueError("segment labels must be ACTION or ANCHOR")
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.shape[0] != self.points.shape[0]:
                raise ValueError("features length must match point count")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def action_mask(self) -> np.ndarray:
        return self.segment == ACTION

    @property
    def anchor_mask(self) -> np.ndarray:
        return self.segment == ANCHOR

    @property
    def action_points(self) -> np.ndarray:
        return self.points[self.action_mask]

    @property
    def anchor_points(self) -> np.ndarray:
        return self.points[self.anchor_mask]

    def subset(self, index: np.ndarray) -> "PointCloud":
        feats = None if self.features is None else self.features[index]
        return PointCloud(self.points[index], self.segment[index], feats)


@dataclass(frozen=True)
class InvariantFeatureField:
    """Per-point nonnegative distances to a latent point."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values).reshape(-1)
        object.__setattr__(self, "values", values)
        if (values < 0).any():
            raise ValueError("feature values must be nonnegative")


def apply_transform(T: RigidTransform, P: PointCloud) -> PointCloud:
    """Rigidly move every point of P; labels and features are carried over."""
    moved = T.apply(P.points).astype(P.points.dtype, copy=False)
    return replace(P, points=moved)


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Transform equal to applying T2 first, then T1."""
    return RigidTransform(T1.rotation @ T2.rotation, T1.rotation @ T2.translation + T1.translation)


def invert(T: RigidTransform) -> RigidTransform:
    return RigidTransform(T.rotation.T, -T.rotation.T @ T.translation)


def rotation_angle(R1: np.ndarray, R2: np.ndarray | None = None) -> float:
    """Geodesic angle of R1 (or of the relative rotation R1ᵀ·R2), in radians."""
    R = np.asarray(R1, dtype=np.float64)
    if R2 is not None:
        R = R.T @ np.asarray(R2, dtype=np.float64)
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def invariant_feature(P: PointCloud, latent_point: np.ndarray) -> InvariantFeatureField:
    """Distance from each point to the latent point; unchanged under rigid maps of both."""
    return InvariantFeatureField(distance_field(P.points, np.asarray(latent_point)))


def weighted_rigid_fit(source: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform minimizing sum_i w_i * ||T source_i - target_i||^2.

    Weighted Kabsch: weighted-centroid subtraction, weighted cross-covariance,
    SVD with a sign flip on the smallest singular vector to keep det = +1.
    """
    source = np.asarray(source, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if (weights < 0).any():
        raise ValueError("weights must be nonnegative")
    wsum = weights.sum()
    if wsum <= 0:
        raise DegenerateConfigurationError("all weights are zero")
    w = weights / wsum

    src_centroid = w @ source
    tgt_centroid = w @ targets
    src_c = source - src_centroid
    tgt_c = targets - tgt_centroid

    cov = (src_c * w[:, None]).T @ tgt_c
    u, s, vt = np.linalg.svd(cov)

    # Rank < 2 means the weighted source span is a line or a point; the
    # rotation about that axis is unconstrained.
    scale = max(float(s[0]), 1e-30)
    if s[1] / scale < 1e-9:
        raise DegenerateConfigurationError(
            "weighted source points are collinear or coincident; rigid fit is not unique"
        )

    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, tgt_centroid - rot @ src_centroid)


def random_se3(
    rotation_mode: str = "uniform",
    translation_bounds=((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
    rng: np.random.Generator | None = None,
) -> RigidTransform:
    """Random rigid transform.

    rotation_mode: "uniform" (Haar over SO(3)), "z" (yaw only) or "identity".
    translation_bounds: per-axis (low, high) pairs.
    """
    rng = np.random.default_rng() if rng is None else rng
    if rotation_mode == "uniform":
        rot = Rotation.random(random_state=rng).as_matrix()
    elif rotation_mode == "z":
        rot = Rotation.from_euler("z", rng.uniform(0.0, 2.0 * np.pi)).as_matrix()
    elif rotation_mode == "identity":
        rot = np.eye(3)
    else:
        raise ValueError(f"unknown rotation_mode {rotation_mode!r}")
    bounds = np.asarray(translation_bounds, dtype=np.float64).reshape(3, 2)
    if not np.isfinite(bounds).all():
        raise ValueError("translation bounds must be finite")
    t = rng.uniform(bounds[:, 0], bounds[:, 1])
    return RigidTransform(rot, t)


def aabb_overlap(cloud1: PointCloud, cloud2: PointCloud, margin: float = 0.0) -> bool:
    """True iff the margin-inflated axis-aligned bounding boxes intersect (closed intervals)."""
    lo1, hi1 = cloud1.points.min(axis=0) - margin, cloud1.points.max(axis=0) + margin
    lo2, hi2 = cloud2.points.min(axis=0) - margin, cloud2.points.max(axis=0) + margin
    return bool((lo1 <= hi2).all() and (lo2 <= hi1).all())
