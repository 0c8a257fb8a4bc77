"""Pure-numpy implementations of the hot kernels."""

import numpy as np


def distance_field(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to center, in the points' dtype."""
    points = np.asarray(points)
    center = np.asarray(center, dtype=points.dtype).reshape(3)
    diff = points - center
    return np.sqrt((diff * diff).sum(axis=1))


def farthest_point_indices(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; deterministic given the start index."""
    points = np.asarray(points, dtype=np.float64)
    num = points.shape[0]
    if not 1 <= n <= num:
        raise ValueError(f"cannot sample {n} of {num} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start_index
    dist = ((points - points[start_index]) ** 2).sum(axis=1)
    for i in range(1, n):
        idx = int(np.argmax(dist))
        chosen[i] = idx
        d = ((points - points[idx]) ** 2).sum(axis=1)
        np.minimum(dist, d, out=dist)
    return chosen
