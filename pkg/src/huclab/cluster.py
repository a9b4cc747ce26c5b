"""Mean normalization, seeded k-means, knee-point model selection, and the
diverse-utterance sampling machinery built on pseudo-speaker centroids.

All centroid/label assignments use squared Euclidean distance with argmin
ties broken toward the lowest index, so every operation here is a pure
deterministic function of its inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NoKneeError(ValueError):
    """The inertia curve is (numerically) a straight line; no knee exists."""


@dataclass
class Codebook:
    centroids: np.ndarray          # (k, F)
    inertia_history: list[float]
    seed: int
    metric: str = "euclidean"      # fixed

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


@dataclass
class SamplingPlan:
    m: int
    n: int
    selected_centroid_ids: set[int]
    selected_utterance_ids: set[str]


@dataclass
class PseudoLabels:
    utterance_id: str
    labels: np.ndarray  # (T,), int in [0, k)


def utterance_mean(c: np.ndarray) -> np.ndarray:
    """Arithmetic mean over rows (the utterance-level mean vector)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] < 1:
        raise ValueError("cannot take the mean of an empty matrix")
    return c.mean(axis=0)


def mean_normalize(c: np.ndarray) -> np.ndarray:
    """Subtract the utterance-level mean from every row."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] < 1:
        raise ValueError("cannot normalize an empty matrix")
    return c - c.mean(axis=0, keepdims=True)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, np.newaxis, :] - centroids[np.newaxis, :, :]
    return np.einsum("nkf,nkf->nk", diff, diff)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: next centroid drawn with probability ~ D(x)^2.

    When every remaining point coincides with a chosen centroid (all
    D(x)^2 = 0) the lowest-index unchosen points fill the remaining slots.
    """
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            for i in range(n):
                if i not in chosen:
                    chosen.append(i)
                    if len(chosen) == k:
                        break
            break
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, max_iters: int = 100, seed: int = 0) -> Codebook:
    """Lloyd iterations from a seeded k-means++ start.

    Stops at the assignment fixpoint or after ``max_iters``.  A cluster
    left empty by an update is reseeded to the point currently farthest
    from its assigned centroid (ties toward the lowest point index), which
    keeps the recorded inertia sequence non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")

    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(points, k, rng)
    inertia_history: list[float] = []
    assignment = None
    for _ in range(max_iters):
        d2 = _squared_distances(points, centroids)
        new_assignment = d2.argmin(axis=1)
        inertia_history.append(float(d2[np.arange(len(points)), new_assignment].sum()))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        assigned_d2 = d2[np.arange(len(points)), assignment].copy()
        for j in range(k):
            members = points[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                worst = int(assigned_d2.argmax())
                centroids[j] = points[worst]
                assigned_d2[worst] = -np.inf  # one reseed per point per iteration
    return Codebook(centroids=centroids, inertia_history=inertia_history, seed=seed)


def knee_point(inertia_curve: list[tuple[int, float]]) -> int:
    """Knee of a (k, inertia) curve: the k whose normalized point falls
    farthest below the chord from the first to the last point.

    Requires >= 3 points with strictly increasing k and non-increasing
    inertia.  Ties pick the smallest k; a numerically straight curve
    (max distance <= 1e-9) has no knee.
    """
    if len(inertia_curve) < 3:
        raise ValueError("need at least 3 curve points")
    ks = np.array([float(k) for k, _ in inertia_curve])
    ys = np.array([float(v) for _, v in inertia_curve])
    if not np.all(np.diff(ks) > 0):
        raise ValueError("k values must be strictly increasing")
    if np.any(np.diff(ys) > 0):
        raise ValueError("inertia must be non-increasing")

    x_norm = (ks - ks[0]) / (ks[-1] - ks[0])
    y_span = ys[0] - ys[-1]
    if y_span <= 0:
        raise NoKneeError("no knee: inertia curve is flat")
    y_norm = (ys - ys[-1]) / y_span
    chord = 1.0 - x_norm  # from (0, 1) to (1, 0)
    below = chord - y_norm
    best = int(np.argmax(below))
    if below[best] <= 1e-9:
        raise NoKneeError("no knee: curve is a straight line")
    return int(ks[best])


def _centroid_matrix(codebook) -> np.ndarray:
    cents = codebook.centroids if isinstance(codebook, Codebook) else np.asarray(codebook)
    return np.asarray(cents, dtype=np.float64)


def _pairwise(cents: np.ndarray) -> np.ndarray:
    diff = cents[:, np.newaxis, :] - cents[np.newaxis, :, :]
    return np.sqrt(np.einsum("ijf,ijf->ij", diff, diff))


def select_farthest(codebook, n: int) -> set[int]:
    """Greedy max-min subset: seed with the most distant pair (lexicographic
    first among ties), then repeatedly add the centroid with the largest
    minimum distance to the chosen set (ties toward the lowest index)."""
    cents = _centroid_matrix(codebook)
    k = len(cents)
    if n > k:
        raise ValueError(f"cannot select {n} of {k} centroids")
    if n == k:
        return set(range(k))
    if n == 1:
        return {0}
    dist = _pairwise(cents)
    upper = np.triu(dist, 1)
    i, j = np.unravel_index(int(upper.argmax()), upper.shape)
    selected = [int(i), int(j)]
    while len(selected) < n:
        min_dist = dist[:, selected].min(axis=1)
        min_dist[selected] = -np.inf
        selected.append(int(min_dist.argmax()))
    return set(selected)


def select_nearest(codebook, n: int) -> set[int]:
    """Mirror of select_farthest: seed with the closest pair, then add the
    centroid minimizing its maximum distance to the chosen set."""
    cents = _centroid_matrix(codebook)
    k = len(cents)
    if n > k:
        raise ValueError(f"cannot select {n} of {k} centroids")
    if n == k:
        return set(range(k))
    if n == 1:
        return {0}
    dist = _pairwise(cents)
    masked = dist + np.where(np.tri(k, dtype=bool), np.inf, 0.0)  # keep strict upper triangle
    i, j = np.unravel_index(int(masked.argmin()), masked.shape)
    selected = [int(i), int(j)]
    while len(selected) < n:
        max_dist = dist[:, selected].max(axis=1)
        max_dist[selected] = np.inf
        selected.append(int(max_dist.argmin()))
    return set(selected)


def sample_utterances(
    means: dict[str, np.ndarray], codebook, selected_ids: set[int]
) -> set[str]:
    """Keep the utterances whose mean maps to a selected centroid."""
    cents = _centroid_matrix(codebook)
    if len(cents) == 0:
        raise ValueError("codebook is empty")
    kept = set()
    for utt_id, mean in means.items():
        d2 = ((cents - np.asarray(mean, dtype=np.float64)) ** 2).sum(axis=1)
        if int(d2.argmin()) in selected_ids:
            kept.add(utt_id)
    return kept


def assign_labels(c_hat: np.ndarray, codebook) -> np.ndarray:
    """Per-frame nearest-centroid labels (ties toward the lowest index)."""
    cents = _centroid_matrix(codebook)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if c_hat.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if c_hat.shape[1] != cents.shape[1]:
        raise ValueError(
            f"feature dim {c_hat.shape[1]} does not match codebook dim {cents.shape[1]}"
        )
    return _squared_distances(c_hat, cents).argmin(axis=1).astype(np.int64)
