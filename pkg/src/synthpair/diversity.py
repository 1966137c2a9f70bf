"""Semantic diversity of caption corpora: LM embeddings, k-means with elbow
selection, top-k concentration and cluster entropy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .capgen import tokenize
from .errors import DataError
from .vlm.lm import FrozenLM, embed_caption_ids


class ParameterError(ValueError):
    pass


class ReduceKError(ValueError):
    """More clusters were requested than there are distinct points."""

    def __init__(self, k: int, distinct: int):
        super().__init__(f"k={k} exceeds the {distinct} distinct points; use k <= {distinct}")
        self.k = k
        self.distinct = distinct


def embed_captions(captions: Sequence, lm: FrozenLM, batch_size: int = 64) -> np.ndarray:
    """Mean-pooled final hidden states, one float64 row per caption.

    Captions may be strings or token id lists.
    """
    if len(captions) == 0:
        raise DataError("cannot embed an empty caption corpus")
    ids = [tokenize(c) if isinstance(c, str) else list(c) for c in captions]
    return embed_caption_ids(lm, ids, batch_size).pooled().astype(np.float64)


# -- k-means -------------------------------------------------------------------

@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray
    sizes: np.ndarray
    wcss: float
    centroids: np.ndarray
    history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def concentration_top3(self) -> float:
        return concentration(self.sizes, min(3, self.k))

    @property
    def concentration_top5(self) -> float:
        return concentration(self.sizes, min(5, self.k))

    @property
    def entropy_bits(self) -> float:
        return entropy_bits(self.sizes)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "assignments": self.assignments.tolist(),
            "sizes": self.sizes.tolist(),
            "wcss": self.wcss,
            "concentration_top3": self.concentration_top3,
            "concentration_top5": self.concentration_top5,
            "entropy_bits": self.entropy_bits,
            "iterations": self.iterations,
        }


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d.sum()
        # all remaining mass on already-chosen points: pick any unchosen distinct row
        idx = int(rng.choice(len(x), p=d / total)) if total > 0 else int(np.argmax(d))
        centers.append(x[idx])
        d = np.minimum(d, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
           n_init: int = 1) -> ClusterReport:
    """Lloyd's algorithm from a k-means++ start.

    Stops when the largest centroid shift, relative to the data scale, drops
    below ``tol``. ``history`` holds the WCSS after every assignment step.
    With ``n_init > 1`` the lowest-WCSS of that many seeded restarts is kept.
    """
    if n_init < 1:
        raise ParameterError("n_init must be at least 1")
    if n_init > 1:
        runs = [kmeans(x, k, seed + i, max_iter, tol) for i in range(n_init)]
        return min(runs, key=lambda r: r.wcss)
    x = np.asarray(x, dtype=np.float64)
    if k <= 0:
        raise ParameterError("k must be positive")
    if x.ndim != 2 or len(x) == 0:
        raise DataError("need a non-empty 2-D embedding matrix")
    if not np.all(np.isfinite(x)):
        raise DataError("embeddings contain non-finite values")
    if len(x) < k:
        raise ParameterError(f"{len(x)} points cannot form {k} clusters")
    distinct = len(np.unique(x, axis=0))
    if k > distinct:
        raise ReduceKError(k, distinct)
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(x, k, rng)
    scale = max(float(np.sqrt(((x - x.mean(0)) ** 2).sum(1).mean())), 1e-12)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(0)
            else:
                # move an empty centroid onto the worst-served point
                cost = d[np.arange(len(x)), assign]
                new[j] = x[int(np.argmax(cost))]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift / scale < tol:
            break
    d = _sq_dists(x, centroids)
    assign = d.argmin(1)
    wcss = float(((x - centroids[assign]) ** 2).sum())
    history.append(wcss)
    sizes = np.bincount(assign, minlength=k)
    return ClusterReport(k, assign, sizes, wcss, centroids, history, it)


def wcss_curve(x: np.ndarray, k_max: int, seed: int = 0, n_init: int = 1) -> list[float]:
    return [kmeans(x, k, seed, n_init=n_init).wcss for k in range(1, k_max + 1)]


def elbow_select(wcss_by_k: Sequence[float]) -> int:
    """k (1-based) farthest from the chord joining the first and last points."""
    w = np.asarray(wcss_by_k, dtype=np.float64)
    if len(w) < 3:
        raise ParameterError("elbow selection needs at least three WCSS values")
    k = np.arange(1, len(w) + 1, dtype=np.float64)
    dk, dw = k[-1] - k[0], w[-1] - w[0]
    dist = np.abs(dk * (w - w[0]) - dw * (k - k[0])) / np.hypot(dk, dw)
    # tolerate rounding so exact ties resolve to the smallest k
    best = dist.max()
    return int(np.nonzero(dist >= best - 1e-12 * max(best, 1.0))[0][0]) + 1


# -- distribution metrics ------------------------------------------------------

def concentration(sizes: Sequence[int], top: int) -> float:
    """Percentage of members in the ``top`` largest clusters."""
    s = np.asarray(sizes, dtype=np.float64)
    if s.size == 0 or s.sum() <= 0:
        raise ParameterError("sizes must be non-empty with a positive total")
    if top <= 0 or top > s.size:
        raise ParameterError(f"top={top} outside 1..{s.size}")
    return float(100.0 * np.sort(s)[::-1][:top].sum() / s.sum())


def entropy_bits(sizes: Sequence[int]) -> float:
    s = np.asarray(sizes, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        raise ParameterError("sizes must have a positive total")
    p = s[s > 0] / total
    return float(-(p * np.log2(p)).sum()) + 0.0


# -- co-clustering -------------------------------------------------------------

@dataclass
class CoClusterReport:
    joint: ClusterReport
    names: list[str]
    per_corpus_sizes: list[np.ndarray]

    def normalized(self) -> list[np.ndarray]:
        return [s / s.sum() for s in self.per_corpus_sizes]

    def corpus_concentration(self, i: int, top: int = 5) -> float:
        return concentration(self.per_corpus_sizes[i], min(top, self.joint.k))

    def corpus_entropy(self, i: int) -> float:
        return entropy_bits(self.per_corpus_sizes[i])

    def to_json(self) -> dict:
        return {
            **self.joint.to_json(),
            "corpora": [
                {
                    "name": name,
                    "sizes": sizes.tolist(),
                    "normalized": (sizes / sizes.sum()).tolist(),
                    "concentration_top5": self.corpus_concentration(i),
                    "entropy_bits": self.corpus_entropy(i),
                }
                for i, (name, sizes) in enumerate(zip(self.names, self.per_corpus_sizes))
            ],
        }


def co_cluster(corpora: Sequence[np.ndarray], k: int | str = "auto", seed: int = 0, k_max: int = 30,
               names: Sequence[str] | None = None, n_init: int = 1) -> CoClusterReport:
    """Cluster the concatenated corpora, then count each corpus per cluster."""
    if not corpora:
        raise DataError("no corpora given")
    x = np.concatenate([np.asarray(c, dtype=np.float64) for c in corpora])
    if k == "auto":
        k = elbow_select(wcss_curve(x, min(k_max, len(x)), seed, n_init))
    joint = kmeans(x, int(k), seed, n_init=n_init)
    bounds = np.cumsum([0] + [len(c) for c in corpora])
    per = [np.bincount(joint.assignments[a:b], minlength=joint.k) for a, b in zip(bounds, bounds[1:])]
    names = list(names) if names else [f"corpus{i}" for i in range(len(corpora))]
    return CoClusterReport(joint, names, per)
