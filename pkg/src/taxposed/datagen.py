"""Procedural multimodal placement benchmark: scenes, demonstrations, augmentations, IO."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientPointsError,
    OcclusionFailureError,
    PlacementFailureError,
    VersionMismatchError,
)
from .geometry import (
    ACTION,
    ANCHOR,
    PointCloud,
    RigidTransform,
    aabb_overlap,
    apply_transform,
    compose,
    invert,
    random_se3,
)
from .kernels import farthest_point_indices

DATASET_VERSION = "taxposed-ds-v1"

DEFAULT_POINTS = 128
PLACEMENT_MARGIN = 0.05
SITE_BOUNDS = ((-1.2, 1.2), (-1.2, 1.2), (0.0, 0.0))
OBSERVATION_BOUNDS = ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))

# Canonical pose of the action shape relative to a site's frame: nested just
# above the site so placement targets lie near the anchor surface.
CANONICAL_ATTACH = RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.1]))


def _quantize(T: RigidTransform) -> RigidTransform:
    """Round a transform to float32 so in-memory records match their serialized form."""
    return RigidTransform(
        T.rotation.astype(np.float32).astype(np.float64),
        T.translation.astype(np.float32).astype(np.float64),
    )


def _tripod_shape(rng: np.random.Generator, n_points: int, arm_lengths, width: float) -> np.ndarray:
    """Point scaffold of three axis-aligned arms with distinct lengths (no self-symmetry)."""
    arms = np.asarray(arm_lengths, dtype=np.float64)
    arms = arms * rng.uniform(0.9, 1.1, size=3) * rng.uniform(0.9, 1.1)
    counts = np.full(3, n_points // 3)
    counts[: n_points - counts.sum()] += 1
    pts = []
    for axis in range(3):
        box_hi = np.full(3, width)
        box_hi[axis] = arms[axis]
        pts.append(rng.uniform(0.0, 1.0, size=(counts[axis], 3)) * box_hi)
    points = np.concatenate(pts)
    return points - points.mean(axis=0)


def make_action_shape(rng: np.random.Generator, n_points: int = DEFAULT_POINTS) -> PointCloud:
    """Canonical action object: asymmetric tri-arm scaffold, ~0.2-20% jittered proportions."""
    pts = _tripod_shape(rng, n_points, arm_lengths=(0.5, 0.3, 0.18), width=0.06)
    return PointCloud(pts.astype(np.float32), np.full(n_points, ACTION))


def make_site_shape(rng: np.random.Generator, n_points: int = DEFAULT_POINTS) -> PointCloud:
    """Canonical placement site: a differently-proportioned tri-arm scaffold."""
    pts = _tripod_shape(rng, n_points, arm_lengths=(0.45, 0.28, 0.6), width=0.09)
    return PointCloud(pts.astype(np.float32), np.full(n_points, ANCHOR))


@dataclass
class DemonstrationRecord:
    """One demonstration: action placed at one of K sites, plus every valid placement."""

    cloud: PointCloud
    mode_id: int
    site_transforms: list[RigidTransform]
    seed: int
    site_point_count: int = DEFAULT_POINTS

    def __post_init__(self):
        if not 0 <= self.mode_id < len(self.site_transforms):
            raise ValueError("mode_id out of range")
        if not self.cloud.action_mask.any():
            raise ValueError("record has no action points")

    @property
    def num_sites(self) -> int:
        return len(self.site_transforms)


@dataclass
class SceneObservation:
    """A demonstration re-posed by independent random rigid transforms per object."""

    cloud: PointCloud
    T_applied_A: RigidTransform
    T_applied_B: RigidTransform
    source: DemonstrationRecord


@dataclass
class EvalReport:
    success_rate: float
    eps_R: float
    eps_t: float
    mode_frequencies: list[float]
    best_of_success_rate: float = 0.0
    samples: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def _place_sites(K: int, site_shape: PointCloud, rng: np.random.Generator, margin: float):
    poses: list[RigidTransform] = []
    clouds: list[PointCloud] = []
    for _ in range(K):
        for attempt in range(100):
            pose = random_se3("z", SITE_BOUNDS, rng)
            cand = apply_transform(pose, site_shape)
            if all(not aabb_overlap(cand, c, margin) for c in clouds):
                poses.append(pose)
                clouds.append(cand)
                break
        else:
            raise PlacementFailureError(f"could not place site {len(poses)} after 100 attempts")
    return poses, clouds


def make_demonstration(K: int, rng: np.random.Generator, seed: int = -1) -> DemonstrationRecord:
    """K non-overlapping sites on the plane; the action placed at one, chosen uniformly."""
    if K < 1:
        raise ValueError("K must be >= 1")
    site_shape = make_site_shape(rng)
    action_shape = make_action_shape(rng)
    for _ in range(100):
        poses, site_clouds = _place_sites(K, site_shape, rng, PLACEMENT_MARGIN)
        mode = int(rng.integers(K))
        site_transforms = [_quantize(compose(p, CANONICAL_ATTACH)) for p in poses]
        action = apply_transform(site_transforms[mode], action_shape)
        others = [c for i, c in enumerate(site_clouds) if i != mode]
        if any(aabb_overlap(action, c, PLACEMENT_MARGIN) for c in others):
            continue
        points = np.concatenate([action.points] + [c.points for c in site_clouds]).astype(np.float32)
        segment = np.concatenate(
            [np.full(len(action), ACTION)] + [np.full(len(c), ANCHOR) for c in site_clouds]
        )
        return DemonstrationRecord(
            cloud=PointCloud(points, segment),
            mode_id=mode,
            site_transforms=site_transforms,
            seed=seed,
            site_point_count=len(site_shape),
        )
    raise PlacementFailureError("could not build a collision-free demonstration")


def add_distractor(
    record: DemonstrationRecord,
    rng: np.random.Generator,
    valid: bool = True,
    margin: float = PLACEMENT_MARGIN,
) -> DemonstrationRecord:
    """Append a re-posed copy of site 0's points to the anchor segment.

    With valid=True (default) the copy is a real placement site and its
    transform is appended to site_transforms; otherwise it is a decoy and the
    valid-placement set is unchanged.
    """
    n = record.site_point_count
    site0 = PointCloud(record.cloud.anchor_points[:n], np.full(n, ANCHOR))
    pose0 = compose(record.site_transforms[0], invert(CANONICAL_ATTACH))
    anchor_cloud = PointCloud(record.cloud.anchor_points, np.full(len(record.cloud.anchor_points), ANCHOR))
    action_cloud = PointCloud(record.cloud.action_points, np.full(len(record.cloud.action_points), ACTION))

    for _ in range(100):
        pose = random_se3("z", SITE_BOUNDS, rng)
        move = compose(pose, invert(pose0))
        cand = apply_transform(move, site0)
        if aabb_overlap(cand, anchor_cloud, margin) or aabb_overlap(cand, action_cloud, margin):
            continue
        points = np.concatenate([record.cloud.points, cand.points]).astype(np.float32)
        segment = np.concatenate([record.cloud.segment, cand.segment])
        transforms = list(record.site_transforms)
        if valid:
            transforms.append(_quantize(compose(pose, CANONICAL_ATTACH)))
        return DemonstrationRecord(
            cloud=PointCloud(points, segment),
            mode_id=record.mode_id,
            site_transforms=transforms,
            seed=record.seed,
            site_point_count=record.site_point_count,
        )
    raise PlacementFailureError("could not place distractor after 100 attempts")


def derive_observation(record: DemonstrationRecord, rng: np.random.Generator) -> SceneObservation:
    """Apply independent uniform SE(3) transforms to the action and anchor segments."""
    T_a = random_se3("uniform", OBSERVATION_BOUNDS, rng)
    T_b = random_se3("uniform", OBSERVATION_BOUNDS, rng)
    points = record.cloud.points.copy()
    points[record.cloud.action_mask] = T_a.apply(record.cloud.action_points).astype(points.dtype)
    points[record.cloud.anchor_mask] = T_b.apply(record.cloud.anchor_points).astype(points.dtype)
    return SceneObservation(
        cloud=PointCloud(points, record.cloud.segment.copy()),
        T_applied_A=T_a,
        T_applied_B=T_b,
        source=record,
    )


def ground_truth_cross_pose(obs: SceneObservation, mode: int) -> RigidTransform:
    """Transform moving X's action points onto mode `mode`'s placement, in X's anchor frame."""
    rec = obs.source
    site_m = rec.site_transforms[rec.mode_id]
    site_i = rec.site_transforms[mode]
    return compose(obs.T_applied_B, compose(site_i, compose(invert(site_m), invert(obs.T_applied_A))))


def planar_occlusion(
    P: PointCloud,
    rng: np.random.Generator,
    min_points: int = 16,
    offset_range: tuple[float, float] = (0.25, 0.75),
) -> PointCloud:
    """Remove all points on one side of a plane between a random point and the centroid."""
    centroid = P.points.mean(axis=0)
    for _ in range(100):
        p = P.points[rng.integers(len(P))]
        normal = np.asarray(p, dtype=np.float64) - centroid
        norm = np.linalg.norm(normal)
        if norm < 1e-9:
            continue
        normal /= norm
        anchor_pt = centroid + rng.uniform(*offset_range) * (p - centroid)
        keep = (P.points - anchor_pt) @ normal <= 0
        if keep.sum() >= min_points:
            return P.subset(keep)
    raise OcclusionFailureError(f"planar occlusion could not keep {min_points} points")


def ball_occlusion(
    P: PointCloud,
    rng: np.random.Generator,
    radius: float = 0.15,
    min_points: int = 16,
) -> PointCloud:
    """Remove all points within `radius` of a randomly chosen cloud point."""
    for _ in range(100):
        center = P.points[rng.integers(len(P))]
        keep = np.linalg.norm(P.points - center, axis=1) > radius
        if keep.sum() >= min_points:
            return P.subset(keep)
    raise OcclusionFailureError(f"ball occlusion could not keep {min_points} points")


def downsample(
    P: PointCloud,
    n: int,
    rng: np.random.Generator,
    method: str | None = None,
    anchor_n: int | None = None,
) -> PointCloud:
    """Downsample the action segment to n points and the anchor to anchor_n.

    anchor_n defaults to n. method: "random", "farthest", or None to pick
    uniformly between the two.
    """
    if method is None:
        method = "random" if rng.random() < 0.5 else "farthest"
    if method not in ("random", "farthest"):
        raise ValueError(f"unknown method {method!r}")
    budgets = {ACTION: n, ANCHOR: n if anchor_n is None else anchor_n}
    picks = []
    for seg in (ACTION, ANCHOR):
        (idx,) = np.nonzero(P.segment == seg)
        if idx.size == 0:
            continue
        budget = budgets[seg]
        if idx.size < budget:
            raise InsufficientPointsError(f"segment {seg} has {idx.size} < {budget} points")
        if method == "random":
            picks.append(rng.choice(idx, size=budget, replace=False))
        else:
            start = int(rng.integers(idx.size))
            picks.append(idx[farthest_point_indices(P.points[idx], budget, start)])
    return P.subset(np.concatenate(picks))


def anchor_budget(points_per_object: int, num_sites: int) -> int:
    """Anchor downsampling budget that keeps per-site density independent of
    the site count, normalized so a two-site anchor matches the action budget."""
    return round(points_per_object * num_sites / 2)


def generate_dataset(
    n_records: int, sites: int, seed: int, distractors: int = 0
) -> list[DemonstrationRecord]:
    """Deterministic dataset: each record draws from its own (seed, index) stream."""
    records = []
    for i in range(n_records):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        rec = make_demonstration(sites, rng, seed=i)
        for _ in range(distractors):
            rec = add_distractor(rec, rng, valid=True)
        records.append(rec)
    return records


def write_dataset(records: list[DemonstrationRecord], path, config: dict | None = None):
    """Directory layout: manifest.json + records/{idx}.bin (little-endian float32 arrays).

    See SCHEMA.md at the repository root for the exact field order.
    """
    path = Path(path)
    (path / "records").mkdir(parents=True, exist_ok=True)
    index = []
    for i, rec in enumerate(records):
        fname = f"records/{i}.bin"
        action = rec.cloud.action_points.astype("<f4")
        anchor = rec.cloud.anchor_points.astype("<f4")
        transforms = np.stack([t.as_matrix() for t in rec.site_transforms]).astype("<f4")
        with open(path / fname, "wb") as f:
            f.write(action.tobytes())
            f.write(anchor.tobytes())
            f.write(transforms.tobytes())
        index.append(
            {
                "index": i,
                "file": fname,
                "mode_id": rec.mode_id,
                "seed": rec.seed,
                "num_action": int(action.shape[0]),
                "num_anchor": int(anchor.shape[0]),
                "num_sites": rec.num_sites,
                "site_point_count": rec.site_point_count,
            }
        )
    manifest = {"version": DATASET_VERSION, "config": config or {}, "records": index}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_dataset(path) -> list[DemonstrationRecord]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise VersionMismatchError(f"unsupported dataset version {manifest.get('version')!r}")
    records = []
    for entry in manifest["records"]:
        raw = (path / entry["file"]).read_bytes()
        na, nb, ns = entry["num_action"], entry["num_anchor"], entry["num_sites"]
        offset = 0
        action = np.frombuffer(raw, "<f4", na * 3, offset).reshape(na, 3)
        offset += na * 3 * 4
        anchor = np.frombuffer(raw, "<f4", nb * 3, offset).reshape(nb, 3)
        offset += nb * 3 * 4
        mats = np.frombuffer(raw, "<f4", ns * 16, offset).reshape(ns, 4, 4)
        points = np.concatenate([action, anchor]).astype(np.float32)
        segment = np.concatenate([np.full(na, ACTION), np.full(nb, ANCHOR)])
        records.append(
            DemonstrationRecord(
                cloud=PointCloud(points, segment),
                mode_id=entry["mode_id"],
                site_transforms=[RigidTransform.from_matrix(m) for m in mats],
                seed=entry["seed"],
                site_point_count=entry["site_point_count"],
            )
        )
    return records
