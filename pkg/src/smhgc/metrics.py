"""K-means and the four clustering metrics (NMI, ARI, Hungarian ACC, macro F1)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from smhgc.errors import ContractError
from smhgc.numcore import Rng, as_matrix


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen centroid
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rest[rng.integers(rest.size)])
        else:
            nxt = int(rng.choice(n, 1, p=closest / total)[0])
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    trace = []
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(1)
        trace.append(float(d[np.arange(x.shape[0]), assign].sum()))
        new = centroids.copy()
        for j in range(centroids.shape[0]):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(0)
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    assign = d.argmin(1)
    inertia = float(d[np.arange(x.shape[0]), assign].sum())
    trace.append(inertia)
    return KMeansResult(assign, centroids, inertia, it, trace)


def kmeans(points, k: int, restarts: int = 10, rng: Rng | None = None, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding, Lloyd iterations, best of ``restarts`` by inertia."""
    x = as_matrix(points, "points")
    if k > x.shape[0]:
        raise ContractError(f"kmeans needs K <= N, got K={k}, N={x.shape[0]}")
    if k < 1 or restarts < 1:
        raise ContractError("kmeans needs K >= 1 and restarts >= 1")
    rng = rng if rng is not None else Rng(0)
    best = None
    for r in range(restarts):
        res = _lloyd(x, kmeans_plusplus(x, k, rng.spawn(r)), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# --------------------------------------------------------------------------
# metrics


def _check_pair(pred, truth):
    p, t = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if p.size != t.size:
        raise ContractError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    return p, t


def contingency(pred, truth) -> np.ndarray:
    p, t = _check_pair(pred, truth)
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    c = np.zeros((pi.max() + 1 if p.size else 0, ti.max() + 1 if t.size else 0))
    np.add.at(c, (pi, ti), 1)
    return c


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information normalized by the geometric mean of the two entropies."""
    c = contingency(pred, truth)
    n = c.sum()
    hp, ht = _entropy(c.sum(1)), _entropy(c.sum(0))
    if hp == 0 or ht == 0:
        return 1.0 if c.shape == (1, 1) else 0.0
    nz = c > 0
    outer = np.outer(c.sum(1), c.sum(0))
    mi = float((c[nz] / n * np.log(c[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / np.sqrt(hp * ht), 0.0, 1.0))


def ari(pred, truth) -> float:
    c = contingency(pred, truth)
    n = c.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(c).sum()
    a, b = comb2(c.sum(1)).sum(), comb2(c.sum(0)).sum()
    expected = a * b / comb2(n) if n > 1 else 0.0
    max_index = (a + b) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def match_clusters(pred, truth) -> dict:
    """Cluster id -> class id maximizing matched nodes (one-to-one).

    The contingency matrix is padded to square so clusters and classes of
    different counts are handled; clusters left without a class are omitted.
    Among maximum matchings the one with the largest summed per-class F1 wins,
    so F1 does not depend on how cluster ids happen to be numbered.
    """
    p, t = _check_pair(pred, truth)
    pu, tu = np.unique(p), np.unique(t)
    c = contingency(p, t)
    f1 = 2.0 * c / (c.sum(1)[:, None] + c.sum(0)[None, :])
    size = max(c.shape)
    padded = np.zeros((size, size))
    # integer counts dominate; the F1 term (< 1 in total) only breaks ties
    padded[: c.shape[0], : c.shape[1]] = c + f1 / (size + 1)
    rows, cols = linear_sum_assignment(-padded)
    return {pu[r].item(): tu[col].item() for r, col in zip(rows, cols) if r < pu.size and col < tu.size}


def acc_f1(pred, truth) -> tuple[float, float]:
    p, t = _check_pair(pred, truth)
    mapping = match_clusters(p, t)
    mapped = np.array([mapping.get(v.item(), None) for v in p], dtype=object)
    correct = np.array([m is not None and m == tv for m, tv in zip(mapped, t.tolist())])
    acc = float(correct.mean())
    f1s = []
    inverse = {cls: clu for clu, cls in mapping.items()}
    for cls in np.unique(t):
        n_true = int((t == cls).sum())
        clu = inverse.get(cls.item())
        if clu is None:
            f1s.append(0.0)
            continue
        n_pred = int((p == clu).sum())
        tp = int(((p == clu) & (t == cls)).sum())
        f1s.append(2.0 * tp / (n_pred + n_true))
    return acc, float(np.mean(f1s))


@dataclass
class ClusterReport:
    assignment: np.ndarray
    nmi: float | None = None
    ari: float | None = None
    acc: float | None = None
    f1: float | None = None
    seed: int | None = None
    restarts: int | None = None
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {"nmi": self.nmi, "ari": self.ari, "acc": self.acc, "f1": self.f1}

    def to_json(self, assignment_file: str | None = None) -> str:
        d = {**self.metrics(), "seed": self.seed, "restarts": self.restarts, "assignment_file": assignment_file}
        d.update(self.extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def evaluate(assignment, labels=None, seed: int | None = None, restarts: int | None = None) -> ClusterReport:
    a = np.asarray(assignment, dtype=np.int64)
    if labels is None:
        return ClusterReport(a, seed=seed, restarts=restarts)
    acc, f1 = acc_f1(a, labels)
    return ClusterReport(a, nmi(a, labels), ari(a, labels), acc, f1, seed, restarts)


def cluster_and_evaluate(points, k: int, labels=None, restarts: int = 10, seed: int = 0) -> ClusterReport:
    res = kmeans(points, k, restarts, Rng(seed))
    return evaluate(res.assignment, labels, seed, restarts)
