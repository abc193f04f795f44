"""Density clustering of reduced embeddings into candidate slices.

The clusterer follows the classic hierarchical density pipeline:

1. core distance of each point (distance to its min_samples-th neighbor,
   the point itself counted);
2. mutual reachability d(a,b) -> max(core(a), core(b), d(a,b));
3. minimum spanning tree of the mutual-reachability graph (Prim);
4. single-linkage hierarchy from the sorted MST edges;
5. condensed tree: branches below min_cluster_size dissolve into their
   parent as individual point exits at lambda = 1/distance;
6. excess-of-mass cluster extraction over cluster stabilities.

Points left outside every selected cluster are noise (label -1) and are
excluded from slices downstream. Parameter tuning sweeps a grid of
min_cluster_size values and keeps the configuration with the best
silhouette over non-noise points.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError

NOISE = -1


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray  # per-point int, -1 = noise
    params: dict
    silhouette: Optional[float]

    @property
    def n_clusters(self) -> int:
        return int(len(set(self.labels[self.labels >= 0].tolist())))

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def core_distances(dists: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest neighbor, self included."""
    n = dists.shape[0]
    k = min(max(min_samples, 1), n) - 1
    return np.sort(dists, axis=1)[:, k]


def mutual_reachability(dists: np.ndarray, core: np.ndarray) -> np.ndarray:
    return np.maximum(np.maximum(core[:, None], core[None, :]), dists)


def prim_mst(weights: np.ndarray) -> np.ndarray:
    """MST edges (u, v, w) of a dense weighted graph; deterministic tie-breaks."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best_w = np.full(n, np.inf)
    best_src = np.zeros(n, dtype=np.int64)
    in_tree[0] = True
    current = 0
    edges = np.zeros((n - 1, 3))
    for step in range(n - 1):
        row = weights[current]
        better = (~in_tree) & (row < best_w)
        best_w[better] = row[better]
        best_src[better] = current
        masked = np.where(in_tree, np.inf, best_w)
        nxt = int(np.argmin(masked))
        edges[step] = (best_src[nxt], nxt, masked[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def single_linkage(mst_edges: np.ndarray, n: int) -> np.ndarray:
    """Hierarchy rows (left, right, distance, size); merge i creates node n+i."""
    order = np.lexsort((mst_edges[:, 1], mst_edges[:, 0], mst_edges[:, 2]))
    edges = mst_edges[order]
    parent = np.arange(2 * n - 1, dtype=np.int64)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    rows = np.zeros((n - 1, 4))
    for step, (u, v, w) in enumerate(edges):
        ru, rv = find(int(u)), find(int(v))
        node = n + step
        parent[ru] = node
        parent[rv] = node
        size[node] = size[ru] + size[rv]
        rows[step] = (ru, rv, w, size[node])
    return rows


@dataclass(frozen=True)
class CondensedTree:
    # Parallel arrays: cluster `parent` loses `child` at `lam`; child is a
    # point id (< n) with size 1 or a cluster id (>= n).
    parents: np.ndarray
    children: np.ndarray
    lams: np.ndarray
    sizes: np.ndarray
    root: int
    n_points: int


def _lambda_of(distance: float, min_positive: float) -> float:
    # Zero-distance merges happen "last": give them twice the largest
    # finite density level instead of infinity.
    if distance > 0:
        return 1.0 / distance
    return 2.0 / min_positive if min_positive > 0 else 1.0


def condense_tree(hierarchy: np.ndarray, n: int, min_cluster_size: int) -> CondensedTree:
    root = 2 * n - 2
    positive = hierarchy[:, 2][hierarchy[:, 2] > 0]
    min_positive = float(positive.min()) if positive.size else 0.0

    def children_of(node: int) -> tuple[int, int, float]:
        row = hierarchy[node - n]
        return int(row[0]), int(row[1]), float(row[2])

    def subtree_size(node: int) -> int:
        return 1 if node < n else int(hierarchy[node - n][3])

    def leaves_of(node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                left, right, _ = children_of(cur)
                stack.extend((left, right))
        return out

    parents: list[int] = []
    children: list[int] = []
    lams: list[float] = []
    sizes: list[int] = []

    relabel = {root: 2 * n}  # condensed cluster ids start above hierarchy ids
    next_label = 2 * n + 1
    queue: deque[int] = deque([root])
    while queue:
        node = queue.popleft()
        if node < n:
            continue
        cluster = relabel[node]
        left, right, distance = children_of(node)
        lam = _lambda_of(distance, min_positive)
        n_left, n_right = subtree_size(left), subtree_size(right)

        big_left = n_left >= min_cluster_size
        big_right = n_right >= min_cluster_size
        if big_left and big_right:
            for child, count in ((left, n_left), (right, n_right)):
                relabel[child] = next_label
                next_label += 1
                parents.append(cluster)
                children.append(relabel[child])
                lams.append(lam)
                sizes.append(count)
                queue.append(child)
        elif big_left or big_right:
            big, small = (left, right) if big_left else (right, left)
            relabel[big] = cluster
            queue.append(big)
            for leaf in leaves_of(small):
                parents.append(cluster)
                children.append(leaf)
                lams.append(lam)
                sizes.append(1)
        else:
            for leaf in leaves_of(left) + leaves_of(right):
                parents.append(cluster)
                children.append(leaf)
                lams.append(lam)
                sizes.append(1)

    return CondensedTree(
        parents=np.asarray(parents, dtype=np.int64),
        children=np.asarray(children, dtype=np.int64),
        lams=np.asarray(lams),
        sizes=np.asarray(sizes, dtype=np.int64),
        root=2 * n,
        n_points=n,
    )


def cluster_stability(tree: CondensedTree) -> dict[int, float]:
    """Sum over members of (lambda at exit - lambda at cluster birth)."""
    births: dict[int, float] = {tree.root: 0.0}
    for child, lam in zip(tree.children, tree.lams):
        if child >= tree.root:
            births[int(child)] = float(lam)
    stability = {c: 0.0 for c in births}
    for parent, lam, size in zip(tree.parents, tree.lams, tree.sizes):
        stability[int(parent)] += (float(lam) - births[int(parent)]) * int(size)
    return stability


def extract_clusters_eom(tree: CondensedTree) -> list[int]:
    """Excess-of-mass selection: a cluster survives if it is at least as
    stable as its selected descendants combined. The root may be selected,
    which covers fully degenerate inputs (e.g. all points identical)."""
    stability = cluster_stability(tree)
    child_clusters: dict[int, list[int]] = {c: [] for c in stability}
    for parent, child in zip(tree.parents, tree.children):
        if child >= tree.root:
            child_clusters[int(parent)].append(int(child))

    selected = {c: True for c in stability}
    agg = dict(stability)
    for node in sorted(stability, reverse=True):
        kids = child_clusters[node]
        subtree = sum(agg[k] for k in kids)
        if kids and subtree > stability[node]:
            selected[node] = False
            agg[node] = subtree
        else:
            # Node wins: deselect everything beneath it.
            stack = list(kids)
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(child_clusters[k])
    return sorted(c for c, keep in selected.items() if keep)


def _labels_from_selection(tree: CondensedTree, chosen: Sequence[int]) -> np.ndarray:
    label_of_cluster = {c: i for i, c in enumerate(chosen)}
    parent_of: dict[int, int] = {}
    point_exit: dict[int, int] = {}
    for parent, child in zip(tree.parents, tree.children):
        if child >= tree.root:
            parent_of[int(child)] = int(parent)
        else:
            point_exit[int(child)] = int(parent)

    labels = np.full(tree.n_points, NOISE, dtype=np.int64)
    for point, cluster in point_exit.items():
        node: Optional[int] = cluster
        while node is not None:
            if node in label_of_cluster:
                labels[point] = label_of_cluster[node]
                break
            node = parent_of.get(node)
    return labels


GridSpec = Sequence[Union[int, tuple[int, int]]]


def hdbscan(points: np.ndarray, min_cluster_size: int,
            min_samples: Optional[int] = None) -> ClusterResult:
    """Label dense clusters; sparse points become noise (-1)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"expected (n, dims) points, got shape {points.shape}")
    if min_cluster_size < 2:
        raise ContractError(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    if min_samples is None:
        min_samples = min_cluster_size
    n = points.shape[0]
    params = {"min_cluster_size": min_cluster_size, "min_samples": min_samples}
    if n < min_cluster_size:
        return ClusterResult(np.full(n, NOISE, dtype=np.int64), params, None)

    dists = pairwise_distances(points)
    core = core_distances(dists, min_samples)
    mreach = mutual_reachability(dists, core)
    mst = prim_mst(mreach)
    hierarchy = single_linkage(mst, n)
    tree = condense_tree(hierarchy, n, min_cluster_size)
    chosen = extract_clusters_eom(tree)
    labels = _labels_from_selection(tree, chosen)

    sil = None
    if len(set(labels[labels >= 0].tolist())) >= 2:
        sil = silhouette(points, labels)
    return ClusterResult(labels=labels, params=params, silhouette=sil)


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean of (b - a) / max(a, b) over non-noise points."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    mask = labels >= 0
    pts, labs = points[mask], labels[mask]
    uniq = sorted(set(labs.tolist()))
    if len(uniq) < 2:
        raise ContractError("silhouette needs at least 2 non-noise clusters")
    dists = pairwise_distances(pts)
    scores = np.zeros(len(pts))
    for i in range(len(pts)):
        same = labs == labs[i]
        same[i] = False
        if not same.any():
            scores[i] = 0.0  # singleton cluster: no within-cluster side
            continue
        a = dists[i][same].mean()
        b = min(dists[i][labs == other].mean() for other in uniq if other != labs[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


NO_SLICES = "no slices found"


def tune_parameters(points: np.ndarray, grid: GridSpec) -> ClusterResult:
    """Sweep the grid, score each run by silhouette on non-noise points,
    and keep the best. Ties go to the smaller min_cluster_size; runs with
    fewer than two clusters score -inf. If every configuration degenerates
    the result carries zero clusters and params {'status': 'no slices found'}."""
    if not grid:
        raise ContractError("tuning grid must be nonempty")
    configs: list[tuple[int, int]] = []
    for entry in grid:
        if isinstance(entry, int):
            configs.append((entry, entry))
        else:
            configs.append((int(entry[0]), int(entry[1])))
    configs.sort()

    best: Optional[ClusterResult] = None
    best_score = -np.inf
    for mcs, ms in configs:
        result = hdbscan(points, mcs, ms)
        score = result.silhouette if result.n_clusters >= 2 else -np.inf
        if score is not None and score > best_score:
            best, best_score = result, score
    if best is None:
        n = np.asarray(points).shape[0]
        return ClusterResult(
            labels=np.full(n, NOISE, dtype=np.int64),
            params={"status": NO_SLICES},
            silhouette=None,
        )
    return best
