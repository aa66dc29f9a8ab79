"""Multi-view graph datasets: in-memory model, directory format, homophily
ratio and the edge-count-preserving homophily sweep generator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from smhgc.errors import ContractError, FeasibilityError, LoadError, MissingFileError, UndefinedRatioError
from smhgc.numcore import Rng, as_matrix

log = logging.getLogger(__name__)


@dataclass(eq=False)
class GraphView:
    """One view: a symmetric binary adjacency with unit diagonal, plus features."""

    adjacency: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.adjacency = as_matrix(self.adjacency, "adjacency")
        self.features = as_matrix(self.features, "features")
        a = self.adjacency
        n = a.shape[0]
        if a.shape != (n, n):
            raise ContractError(f"adjacency must be square, got {a.shape}")
        if self.features.shape[0] != n:
            raise ContractError(f"features have {self.features.shape[0]} rows but graph has {n} nodes")
        if not np.all((a == 0) | (a == 1)):
            raise ContractError("adjacency entries must be binary")
        if not np.array_equal(a, a.T):
            raise ContractError("adjacency must be symmetric")
        if not np.all(np.diag(a) == 1):
            raise ContractError("adjacency diagonal must be all ones (self-loops)")

    @classmethod
    def from_edges(cls, n_nodes: int, edges, features) -> "GraphView":
        a = np.zeros((n_nodes, n_nodes))
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            a[e[:, 0], e[:, 1]] = 1.0
            a[e[:, 1], e[:, 0]] = 1.0
        np.fill_diagonal(a, 1.0)
        return cls(a, features)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> np.ndarray:
        """Undirected off-diagonal edges as an (E, 2) array with u < v."""
        iu, ju = np.nonzero(np.triu(self.adjacency, 1))
        return np.stack([iu, ju], axis=1)

    @property
    def edge_count(self) -> int:
        return int(np.triu(self.adjacency, 1).sum())

    def __eq__(self, other):
        return (
            isinstance(other, GraphView)
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class MultiViewDataset:
    views: list[GraphView]
    labels: np.ndarray | None
    num_clusters: int

    def __post_init__(self):
        if not self.views:
            raise ContractError("dataset needs at least one view")
        n = self.views[0].n_nodes
        for i, v in enumerate(self.views):
            if v.n_nodes != n:
                raise ContractError(f"node count mismatch: view 0 has {n} nodes, view {i} has {v.n_nodes}")
        if self.num_clusters < 2:
            raise ContractError(f"num_clusters must be >= 2, got {self.num_clusters}")
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (n,):
                raise ContractError(f"labels must have length {n}, got shape {y.shape}")
            if y.size and (y.min() < 0 or y.max() >= self.num_clusters):
                raise ContractError(f"labels must lie in [0, {self.num_clusters})")
            self.labels = y.astype(np.int64)

    @property
    def n_nodes(self) -> int:
        return self.views[0].n_nodes

    @property
    def n_views(self) -> int:
        return len(self.views)

    def __eq__(self, other):
        if not isinstance(other, MultiViewDataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return (
            same_labels
            and self.num_clusters == other.num_clusters
            and len(self.views) == len(other.views)
            and all(a == b for a, b in zip(self.views, other.views))
        )


@dataclass(frozen=True)
class SynthSpec:
    target_hr: float
    seed: int = 0
    preserve_edge_count: bool = True

    def __post_init__(self):
        if not 0.0 <= self.target_hr <= 1.0:
            raise ContractError(f"target_hr must be in [0, 1], got {self.target_hr}")


# --------------------------------------------------------------------------
# directory format


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    return path


def _read_edges(path: Path, n_nodes: int) -> np.ndarray:
    edges = []
    with open(_require(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise LoadError(f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise LoadError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise LoadError(f"{path}:{lineno}: node id out of range [0, {n_nodes})")
            edges.append((u, v))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path) -> np.ndarray:
    rows = []
    with open(_require(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                raise LoadError(f"{path}:{lineno}: non-numeric feature value") from None
            if len(rows[-1]) != len(rows[0]):
                raise LoadError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def _read_labels(path: Path) -> np.ndarray:
    out = []
    with open(_require(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise LoadError(f"{path}:{lineno}: non-integer label {line!r}") from None
    return np.array(out, dtype=np.int64)


def load_dataset(path) -> MultiViewDataset:
    root = Path(path)
    meta_path = _require(root / "metadata.json")
    try:
        meta = json.loads(meta_path.read_text())
        n = int(meta["n_nodes"])
        k = int(meta["n_clusters"])
        view_specs = meta["views"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{meta_path}: invalid metadata ({exc})") from None
    if int(meta.get("n_views", len(view_specs))) != len(view_specs):
        raise LoadError(f"{meta_path}: n_views={meta['n_views']} but {len(view_specs)} views listed")

    views = []
    for i, spec in enumerate(view_specs):
        feat_path = root / spec["features"]
        x = _read_features(feat_path)
        if x.shape[0] != n:
            raise LoadError(f"{feat_path}: node count mismatch ({x.shape[0]} rows, metadata says {n})")
        edge_path = root / spec["edges"]
        e = _read_edges(edge_path, n)
        directed = {(int(u), int(v)) for u, v in e if u != v}
        if any((v, u) not in directed for u, v in directed):
            log.debug("%s: edge list is not symmetric; symmetrizing", edge_path)
        if e.size == 0 or not np.any(e[:, 0] == e[:, 1]):
            log.debug("%s: adding self-loops", edge_path)
        views.append(GraphView.from_edges(n, e, x))

    labels = None
    if meta.get("labels"):
        labels = _read_labels(root / meta["labels"])
        if labels.shape[0] != n:
            raise LoadError(f"{root / meta['labels']}: node count mismatch ({labels.shape[0]} labels, expected {n})")
    try:
        return MultiViewDataset(views, labels, k)
    except ContractError as exc:
        raise LoadError(f"{root}: {exc}") from None


def save_dataset(dataset: MultiViewDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    specs = []
    for i, view in enumerate(dataset.views, 1):
        spec = {"edges": f"view{i}.edges.tsv", "features": f"view{i}.features.csv"}
        with open(root / spec["edges"], "w") as fh:
            for u, v in view.edges():
                fh.write(f"{u}\t{v}\n")
        with open(root / spec["features"], "w") as fh:
            for row in view.features:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        specs.append(spec)
    labels_name = None
    if dataset.labels is not None:
        labels_name = "labels.csv"
        np.savetxt(root / labels_name, dataset.labels, fmt="%d")
    meta = {
        "n_nodes": dataset.n_nodes,
        "n_views": dataset.n_views,
        "n_clusters": dataset.num_clusters,
        "views": specs,
        "labels": labels_name,
    }
    (root / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


# --------------------------------------------------------------------------
# homophily


def homophily_ratio(edges: np.ndarray, labels) -> float:
    """Fraction of off-diagonal undirected edges joining same-label nodes."""
    a = as_matrix(edges, "edges")
    y = np.asarray(labels)
    if a.shape != (y.size, y.size):
        raise ContractError(f"edge matrix {a.shape} does not match {y.size} labels")
    if not np.array_equal(a != 0, (a != 0).T):
        raise ContractError("homophily_ratio needs a symmetric edge matrix")
    iu, ju = np.nonzero(np.triu(a != 0, 1))
    if iu.size == 0:
        raise UndefinedRatioError("homophily ratio undefined: no off-diagonal edges")
    return float(np.mean(y[iu] == y[ju]))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _pair_pools(labels: np.ndarray):
    iu, ju = np.triu_indices(labels.size, 1)
    iu = iu.astype(np.int32)
    ju = ju.astype(np.int32)
    same = labels[iu] == labels[ju]
    return (iu[same], ju[same]), (iu[~same], ju[~same])


def sample_edges(labels, n_edges: int, target_hr: float, rng: Rng) -> np.ndarray:
    """Draw ``n_edges`` undirected edges, ``round(target_hr * n_edges)`` of them
    between same-label pairs, uniformly without replacement within each pool."""
    y = np.asarray(labels)
    n_same = _round_half_up(target_hr * n_edges)
    n_cross = n_edges - n_same
    (si, sj), (ci, cj) = _pair_pools(y)
    if n_same > si.size or n_cross > ci.size:
        lo = max(0, n_edges - ci.size) / n_edges
        hi = min(n_edges, si.size) / n_edges
        raise FeasibilityError(
            f"target hr {target_hr:.4f} infeasible for {n_edges} edges: "
            f"{si.size} same-label and {ci.size} cross-label pairs available, achievable hr in [{lo:.4f}, {hi:.4f}]"
        )
    pick_s = np.sort(rng.choice(si.size, n_same, replace=False))
    pick_c = np.sort(rng.choice(ci.size, n_cross, replace=False))
    u = np.concatenate([si[pick_s], ci[pick_c]])
    v = np.concatenate([sj[pick_s], cj[pick_c]])
    return np.stack([u, v], axis=1).astype(np.int64)


def synthesize_view(source: GraphView, labels, spec: SynthSpec, rng: Rng | None = None) -> GraphView:
    """Redraw every edge of ``source`` at homophily ratio ``spec.target_hr``,
    keeping its undirected edge count and its features."""
    y = np.asarray(labels)
    if y.shape != (source.n_nodes,):
        raise ContractError(f"labels must have length {source.n_nodes}")
    rng = rng if rng is not None else Rng(spec.seed)
    edges = sample_edges(y, source.edge_count, spec.target_hr, rng)
    return GraphView.from_edges(source.n_nodes, edges, source.features.copy())


def hr_key(hr: float) -> int:
    """Integer stream key for a homophily value, so draws depend on (seed, hr)."""
    return _round_half_up(hr * 1_000_000)


def sweep_synthesize(source: MultiViewDataset, hr_grid: Sequence[float], seed: int) -> list[MultiViewDataset]:
    if source.labels is None:
        raise ContractError("sweep_synthesize needs labels")
    base = Rng(seed)
    out = []
    for hr in hr_grid:
        views = [
            synthesize_view(view, source.labels, SynthSpec(float(hr), seed), base.spawn(hr_key(hr), v))
            for v, view in enumerate(source.views)
        ]
        out.append(MultiViewDataset(views, source.labels.copy(), source.num_clusters))
    return out


def duplicate_single_view(view: GraphView, labels=None, num_clusters: int | None = None) -> MultiViewDataset:
    """Two-view dataset made of two copies of one view."""
    if num_clusters is None:
        num_clusters = int(np.max(labels)) + 1 if labels is not None else 2
    copy = GraphView(view.adjacency.copy(), view.features.copy())
    return MultiViewDataset([view, copy], labels, num_clusters)
