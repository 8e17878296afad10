"""Support-set selection in embedding space.

One-shot picks the most central sample (inverse mean cosine distance to all
others). For K > 1 a k-center-greedy pass seeded with that sample provides
the initial medoids, then k-medoids alternates assignment and medoid update.
Every tie goes to the lowest dataset index, so the whole stage is
deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embed import Embedding

MAX_ITER = 100
# cosine distances below this are float round-off of identical directions
_ZERO_FLOOR = 1e-12


class SelectionError(ValueError):
    pass


def cosine_distance(a: Embedding | np.ndarray, b: Embedding | np.ndarray) -> float:
    va = np.asarray(getattr(a, "vector", a), dtype=np.float64)
    vb = np.asarray(getattr(b, "vector", b), dtype=np.float64)
    if va.shape != vb.shape:
        raise SelectionError(f"dimension mismatch {va.shape} vs {vb.shape}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise SelectionError("cosine distance of a zero vector")
    d = 1.0 - float(np.dot(va, vb)) / (na * nb)
    d = min(max(d, 0.0), 2.0)
    return 0.0 if d < _ZERO_FLOOR else d


def _matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.asarray(embeddings, dtype=np.float64)
    return np.stack([np.asarray(e.vector, dtype=np.float64) for e in embeddings])


def distance_matrix(embeddings: Sequence[Embedding] | np.ndarray) -> np.ndarray:
    """Symmetric N x N cosine distances with an exact zero diagonal."""
    z = _matrix(embeddings)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise SelectionError("cosine distance of a zero vector")
    u = z / norms[:, None]
    d = 1.0 - u @ u.T
    d = 0.5 * (d + d.T)
    np.clip(d, 0.0, 2.0, out=d)
    d[d < _ZERO_FLOOR] = 0.0
    np.fill_diagonal(d, 0.0)
    return d


def similarity_scores(dist: np.ndarray) -> np.ndarray:
    """Inverse mean distance to the other samples; ``inf`` when that mean is 0."""
    n = dist.shape[0]
    if n < 2:
        raise SelectionError("similarity needs at least two samples")
    mean = dist.sum(axis=1) / (n - 1)
    with np.errstate(divide="ignore"):
        return np.where(mean > 0, 1.0 / np.where(mean > 0, mean, 1.0), np.inf)


def similarity_score(i: int, embeddings) -> float:
    return float(similarity_scores(distance_matrix(embeddings))[i])


def _argmax_low(values: np.ndarray) -> int:
    """First index attaining the maximum (inf-aware)."""
    return int(np.flatnonzero(values == values.max())[0])


def select_s1(embeddings: Sequence[Embedding]) -> str:
    """Id of the most central sample."""
    idx = _argmax_low(similarity_scores(distance_matrix(embeddings)))
    return embeddings[idx].sample_id


def k_center_greedy_idx(dist: np.ndarray, k: int, seed: int) -> list[int]:
    n = dist.shape[0]
    if not 1 <= k <= n:
        raise SelectionError(f"K={k} outside 1..{n}")
    chosen = [seed]
    nearest = dist[seed].copy()
    nearest[seed] = -np.inf
    for _ in range(k - 1):
        nxt = _argmax_low(nearest)
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist[nxt])
        nearest[chosen] = -np.inf
    return chosen


def k_center_greedy(embeddings: Sequence[Embedding], k: int, seed_id: str) -> list[str]:
    ids = [e.sample_id for e in embeddings]
    chosen = k_center_greedy_idx(distance_matrix(embeddings), k, ids.index(seed_id))
    return [ids[i] for i in chosen]


def assign(dist: np.ndarray, medoids: Sequence[int]) -> np.ndarray:
    """Slot of the nearest medoid for every sample; medoids own themselves.

    Ties go to the medoid with the lowest dataset index.
    """
    med = np.asarray(medoids)
    order = np.argsort(med, kind="stable")
    sub = dist[:, med[order]]
    slot = order[np.argmin(sub, axis=1)]
    slot[med] = np.arange(len(med))
    return slot


def clustering_cost(dist: np.ndarray, medoids: Sequence[int]) -> float:
    med = np.asarray(medoids)
    return float(dist[np.arange(dist.shape[0]), med[assign(dist, med)]].sum())


@dataclass
class SelectionResult:
    support_ids: list
    assignment: dict
    objective: float
    distances: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def records(self, ids: Sequence[str]) -> list[dict]:
        sup = set(self.support_ids)
        out = []
        for sid in ids:
            if sid in sup:
                out.append({"id": sid, "role": "support", "assigned_support_id": sid,
                            "distance": 0.0})
            else:
                out.append({"id": sid, "role": "query",
                            "assigned_support_id": self.assignment[sid],
                            "distance": float(self.distances.get(sid, 0.0))})
        return out

    def to_json(self, ids: Sequence[str] | None = None) -> str:
        if ids is None:
            ids = sorted(set(self.support_ids) | set(self.assignment))
        doc = {
            "support_ids": list(self.support_ids),
            "objective": float(self.objective),
            "records": self.records(ids),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        doc = json.loads(text)
        assignment = {}
        distances = {}
        for r in doc["records"]:
            if r["role"] == "query":
                assignment[r["id"]] = r["assigned_support_id"]
                distances[r["id"]] = r["distance"]
        return cls(list(doc["support_ids"]), assignment, doc["objective"], distances)


def _result(ids, dist, medoids, history) -> SelectionResult:
    slot = assign(dist, medoids)
    support_ids = [ids[m] for m in medoids]
    med_set = set(medoids)
    assignment = {}
    distances = {}
    for i, s in enumerate(slot):
        if i in med_set:
            continue
        assignment[ids[i]] = ids[medoids[s]]
        distances[ids[i]] = float(dist[i, medoids[s]])
    return SelectionResult(support_ids, assignment, clustering_cost(dist, medoids),
                           distances, history)


def k_medoids_idx(dist: np.ndarray, init: Sequence[int], max_iter: int = MAX_ITER):
    """Alternating k-medoids; returns (medoid indices, objective history).

    Within a cluster the medoid moves to the member with the smallest total
    distance to the rest of the cluster. The sitting medoid is kept when it
    is among the minimisers; otherwise the lowest-index minimiser wins.
    """
    med = list(init)
    if len(set(med)) != len(med):
        raise SelectionError("initial medoids must be distinct")
    history = [clustering_cost(dist, med)]
    for _ in range(max_iter):
        slot = assign(dist, med)
        new = list(med)
        for s in range(len(med)):
            members = np.flatnonzero(slot == s)
            cost = dist[np.ix_(members, members)].sum(axis=1)
            best = cost.min()
            current = med[s]
            if cost[np.searchsorted(members, current)] > best:
                new[s] = int(members[np.flatnonzero(cost == best)[0]])
        cost_new = clustering_cost(dist, new)
        if cost_new > history[-1] + 1e-12:
            raise AssertionError("k-medoids objective increased")
        history.append(cost_new)
        if new == med:
            break
        med = new
    return med, history


def k_medoids(embeddings: Sequence[Embedding], init: Sequence[str]) -> SelectionResult:
    ids = [e.sample_id for e in embeddings]
    dist = distance_matrix(embeddings)
    med, history = k_medoids_idx(dist, [ids.index(i) for i in init])
    return _result(ids, dist, med, history)


def select_support(embeddings: Sequence[Embedding], k: int) -> SelectionResult:
    """Full selection: central seed, greedy initialisation, k-medoids refinement."""
    n = len(embeddings)
    if not 1 <= k < n:
        raise SelectionError(f"need 1 <= K < N, got K={k}, N={n}")
    ids = [e.sample_id for e in embeddings]
    dist = distance_matrix(embeddings)
    seed = _argmax_low(similarity_scores(dist))
    if k == 1:
        return _result(ids, dist, [seed], [clustering_cost(dist, [seed])])
    init = k_center_greedy_idx(dist, k, seed)
    med, history = k_medoids_idx(dist, init)
    return _result(ids, dist, med, history)


def fixed_support(embeddings: Sequence[Embedding], support_ids: Sequence[str]) -> SelectionResult:
    """Selection result for a given support set, queries assigned by nearest support."""
    ids = [e.sample_id for e in embeddings]
    dist = distance_matrix(embeddings)
    med = [ids.index(s) for s in support_ids]
    return _result(ids, dist, med, [clustering_cost(dist, med)])
