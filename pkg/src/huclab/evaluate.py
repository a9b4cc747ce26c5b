"""Measurement: DTW angular distance, ABX scoring, cluster purity, linear
probes, unit edit distance under signal perturbations, and bootstrap
confidence intervals.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .cluster import assign_labels, mean_normalize
from .corpus import SignalSequence, TripletSet
from .util import derive_seed, worker_count

_COSINE_EPS = 1e-12  # guards zero-norm frames (their similarity is treated as 0)


# --- DTW + ABX ----------------------------------------------------------------


def _angular_cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum without optimization keeps the reduction order fixed, so the
    # matrix is a bitwise transpose under argument swap; cosines within one
    # rounding step of 1 snap to 1 so identical frames are at distance 0.
    norm_a = np.sqrt(np.einsum("if,if->i", a, a))
    norm_b = np.sqrt(np.einsum("if,if->i", b, b))
    denom = np.maximum(np.outer(norm_a, norm_b), _COSINE_EPS)
    cosine = np.clip(np.einsum("if,jf->ij", a, b) / denom, -1.0, 1.0)
    cosine[cosine > 1.0 - 1e-14] = 1.0
    return np.arccos(cosine) / np.pi


def dtw_angular(seq_a: np.ndarray, seq_b: np.ndarray) -> float:
    """Average angular frame distance along the optimal DTW path.

    Frame distance is arccos(cosine similarity)/pi in [0, 1]; steps are
    {(1,0), (0,1), (1,1)}; the minimal-total-cost path is found by dynamic
    programming (ties prefer diagonal, then vertical) and the total is
    divided by the number of cells on that path.
    """
    seq_a = np.atleast_2d(np.asarray(seq_a, dtype=np.float64))
    seq_b = np.atleast_2d(np.asarray(seq_b, dtype=np.float64))
    if seq_a.shape[0] == 0 or seq_b.shape[0] == 0:
        raise ValueError("both sequences must be non-empty")
    if seq_a.shape[1] != seq_b.shape[1]:
        raise ValueError("feature dimensions differ")

    cost = _angular_cost_matrix(seq_a, seq_b)
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    steps = np.zeros((n, m), dtype=np.int64)  # path length in cells
    acc[0, 0] = cost[0, 0]
    steps[0, 0] = 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, best_len = np.inf, 0
            if i > 0 and j > 0 and acc[i - 1, j - 1] < best:
                best, best_len = acc[i - 1, j - 1], steps[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best, best_len = acc[i - 1, j], steps[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best, best_len = acc[i, j - 1], steps[i, j - 1]
            acc[i, j] = best + cost[i, j]
            steps[i, j] = best_len + 1
    return float(acc[n - 1, m - 1] / steps[n - 1, m - 1])


@dataclass
class AbxReport:
    mode: str
    triplet_count: int
    error_rate: float
    per_item: list[float] = field(default_factory=list)


def abx_score(triplets: TripletSet, features: dict[str, np.ndarray]) -> AbxReport:
    """Score triplets: error 1 when d(A, X) > d(B, X), 0.5 on ties, else 0."""
    if not triplets.items:
        raise ValueError("empty triplet set")

    def segment(ref):
        mat = features[ref.utterance_id]
        seg = mat[ref.frame_start : ref.frame_start + ref.frame_len]
        if seg.shape[0] < 1:
            raise ValueError(f"segment of {ref.utterance_id} resolves to zero frames")
        return seg

    def score(item):
        d_ax = dtw_angular(segment(item.a), segment(item.x))
        d_bx = dtw_angular(segment(item.b), segment(item.x))
        if d_ax > d_bx:
            return 1.0
        return 0.5 if d_ax == d_bx else 0.0

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_item = list(pool.map(score, triplets.items))
    else:
        per_item = [score(item) for item in triplets.items]
    return AbxReport(
        mode=triplets.mode,
        triplet_count=len(per_item),
        error_rate=float(np.mean(per_item)),
        per_item=per_item,
    )


# --- purity and probes ----------------------------------------------------------


def cluster_purity(cluster_ids, speaker_ids) -> float:
    """Size-weighted dominant-speaker fraction across clusters."""
    cluster_ids = np.asarray(cluster_ids)
    speaker_ids = np.asarray(speaker_ids)
    if len(cluster_ids) != len(speaker_ids):
        raise ValueError("cluster and speaker id lists must have equal length")
    if len(cluster_ids) == 0:
        raise ValueError("empty input")
    dominant = 0
    for c in np.unique(cluster_ids):
        members = speaker_ids[cluster_ids == c]
        _, counts = np.unique(members, return_counts=True)
        dominant += int(counts.max())
    return dominant / len(cluster_ids)


@dataclass(frozen=True)
class ProbeConfig:
    seed: int = 0
    max_iters: int = 200
    learning_rate: float = 1.0
    tol: float = 1e-7


def linear_probe(x: np.ndarray, y: np.ndarray, cfg: ProbeConfig) -> float:
    """Held-out accuracy of a multinomial logistic probe.

    Seeded 80/20 split; features standardized on the training split;
    full-batch gradient descent until the gradient's max-abs entry falls
    below ``tol`` or ``max_iters`` is reached.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    n = len(y)
    order = np.random.default_rng(cfg.seed).permutation(n)
    n_test = min(max(1, round(0.2 * n)), n - 1)
    test_idx, train_idx = order[:n_test], order[n_test:]

    mu = x[train_idx].mean(axis=0)
    sd = np.maximum(x[train_idx].std(axis=0), 1e-12)
    x_train = (x[train_idx] - mu) / sd
    x_test = (x[test_idx] - mu) / sd
    y_train = y_idx[train_idx]

    k = len(classes)
    w = np.zeros((k, x.shape[1]))
    b = np.zeros(k)
    onehot = np.zeros((len(train_idx), k))
    onehot[np.arange(len(train_idx)), y_train] = 1.0
    for _ in range(cfg.max_iters):
        scores = x_train @ w.T + b
        scores -= scores.max(axis=1, keepdims=True)
        exp = np.exp(scores)
        probs = exp / exp.sum(axis=1, keepdims=True)
        diff = (probs - onehot) / len(train_idx)
        g_w = diff.T @ x_train
        g_b = diff.sum(axis=0)
        if max(np.abs(g_w).max(), np.abs(g_b).max()) < cfg.tol:
            break
        w -= cfg.learning_rate * g_w
        b -= cfg.learning_rate * g_b

    pred = (x_test @ w.T + b).argmax(axis=1)
    return float((pred == y_idx[test_idx]).mean())


# --- sequence metrics -------------------------------------------------------------


def dedup(seq) -> list[int]:
    """Collapse adjacent repeats: 12,12,34,34,52 -> 12,34,52."""
    out = []
    for v in seq:
        v = int(v)
        if not out or out[-1] != v:
            out.append(v)
    return out


def levenshtein(a, b) -> int:
    """Minimum insert/delete/substitute edits, unit costs."""
    a = list(a)
    b = list(b)
    prev = list(range(len(b) + 1))
    for i, sym_a in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, sym_b in enumerate(b, 1):
            cost = 0 if sym_a == sym_b else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


# --- unit edit distance under perturbation ------------------------------------------


@dataclass(frozen=True)
class SignalTransform:
    """Synthetic signal perturbation: identity, additive noise of a given
    std, per-frame dropout (zeroed sample blocks) or a gain factor."""

    kind: str = "feature_noise"
    param: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "feature_noise", "frame_dropout", "gain"):
            raise ValueError(f"unknown transform kind {self.kind!r}")

    def apply(self, samples: np.ndarray, frame_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "identity":
            return samples.copy()
        if self.kind == "feature_noise":
            return samples + rng.normal(0.0, self.param, size=samples.shape)
        if self.kind == "gain":
            return samples * self.param
        out = samples.copy()
        n_frames = len(samples) // frame_size
        drops = rng.random(n_frames) < self.param
        for t in np.nonzero(drops)[0]:
            out[t * frame_size : (t + 1) * frame_size] = 0.0
        return out


@dataclass
class UedReport:
    transform: str
    ued: float
    per_utterance: dict[str, float]


def ued(
    corpus: list[SignalSequence],
    params: enc.EncoderParams,
    codebook,
    transform: SignalTransform,
    seed: int,
) -> UedReport:
    """Mean normalized edit distance between de-duplicated unit sequences of
    clean and perturbed signals, scaled per 1000 reference units."""
    if not corpus:
        raise ValueError("empty corpus")
    frame_size = params.arch.total_stride
    per_utterance = {}
    for i, sig in enumerate(corpus):
        rng = np.random.default_rng(derive_seed(seed, "ued", i))
        perturbed = transform.apply(np.asarray(sig.samples, dtype=np.float64), frame_size, rng)
        _, c_clean = enc.encode(params, sig.samples)
        _, c_pert = enc.encode(params, perturbed)
        units_clean = dedup(assign_labels(mean_normalize(c_clean), codebook))
        units_pert = dedup(assign_labels(mean_normalize(c_pert), codebook))
        dist = levenshtein(units_clean, units_pert)
        per_utterance[sig.utterance_id] = 1000.0 * dist / len(units_clean)
    return UedReport(
        transform=transform.kind,
        ued=float(np.mean(list(per_utterance.values()))),
        per_utterance=per_utterance,
    )


# --- bootstrap ---------------------------------------------------------------------


@dataclass
class BootstrapResult:
    ci1: tuple[float, float]
    ci2: tuple[float, float]
    poi: float


def bootstrap_ci(pairs, resamples: int, seed: int) -> BootstrapResult:
    """Bootstrap CIs and probability of improvement for two paired systems.

    ``pairs`` holds one (model1_error, model2_error) row per utterance.
    Each resample draws ``len(pairs)`` utterances with replacement via
    ``rng.integers(0, n, size=n)`` (one call per resample, in order) and
    aggregates each model's error as the mean.  CIs are the empirical
    2.5/97.5 percentiles; POI is the fraction of resamples where model2's
    aggregate is strictly below model1's.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("pairs must be an (n, 2) array")
    n = pairs.shape[0]
    if n < 1:
        raise ValueError("need at least one utterance")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")

    rng = np.random.default_rng(seed)
    stats = np.empty((resamples, 2))
    for r in range(resamples):
        idx = rng.integers(0, n, size=n)
        stats[r] = pairs[idx].mean(axis=0)
    ci = np.percentile(stats, [2.5, 97.5], axis=0)
    poi = float((stats[:, 1] < stats[:, 0]).mean())
    return BootstrapResult(
        ci1=(float(ci[0, 0]), float(ci[1, 0])),
        ci2=(float(ci[0, 1]), float(ci[1, 1])),
        poi=poi,
    )
