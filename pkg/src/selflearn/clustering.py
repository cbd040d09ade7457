"""Density-based clustering used to count unique questions.

Implements HDBSCAN with the "leaf" cluster selection method over embedding
vectors: pairwise Euclidean distances, core distances with k equal to the
minimum cluster size, mutual-reachability distances, a Kruskal minimum
spanning tree doubling as the single-linkage agglomeration, tree
condensation over multiway splits, and leaf selection where every leaf of
the condensed cluster tree becomes a cluster (a never-splitting root
counts only for a zero-diameter blob). Everything is deterministic:
equal-weight edges resolve to the lowest edge index, and cluster labels
are numbered by smallest member index.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StructureError
from .gateway import EmbeddingVector


@dataclass(frozen=True)
class ClusteringResult:
    """Per-point labels: -1 marks an outlier, other labels are 0..C-1."""

    labels: tuple[int, ...]
    n_clusters: int
    n_outliers: int

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "ClusteringResult":
        distinct = {label for label in labels if label >= 0}
        if distinct and distinct != set(range(len(distinct))):
            raise StructureError(f"cluster labels are not canonical: {sorted(distinct)}")
        return cls(
            labels=tuple(labels),
            n_clusters=len(distinct),
            n_outliers=sum(1 for label in labels if label == -1),
        )


@dataclass(frozen=True)
class CondensedEdge:
    """One condensed-tree row; children below n_points are original points."""

    parent: int
    child: int
    lam: float
    child_size: int


def count_unique(result: ClusteringResult) -> int:
    """Unique-question count: clusters plus outliers."""
    return result.n_clusters + result.n_outliers


def _points_matrix(points: Sequence[EmbeddingVector]) -> np.ndarray:
    if not points:
        raise ValueError("points must be non-empty")
    dims = {p.dimension for p in points}
    if len(dims) > 1:
        raise StructureError(f"embedding dimensions differ: {sorted(dims)}")
    return np.asarray([p.values for p in points], dtype=np.float64)


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, 0.0)
    # The fast quadratic expansion can leave roundoff residue on exact
    # duplicates; pin those pairs to distance zero, since zero-diameter
    # groups are semantically meaningful (they merge at infinite lambda).
    groups: dict[bytes, list[int]] = {}
    for index in range(x.shape[0]):
        groups.setdefault(x[index].tobytes(), []).append(index)
    for members in groups.values():
        if len(members) > 1:
            idx = np.asarray(members)
            dist[np.ix_(idx, idx)] = 0.0
    return dist


def mutual_reachability(x: np.ndarray, k: int) -> np.ndarray:
    """max(core_i, core_j, d_ij) with core = distance to the k-th nearest
    neighbor counting the point itself."""
    dist = _pairwise_euclidean(x)
    core = np.partition(dist, k - 1, axis=1)[:, k - 1]
    reach = np.maximum(dist, core[:, None])
    reach = np.maximum(reach, core[None, :])
    np.fill_diagonal(reach, 0.0)
    return reach


def _single_linkage(weights: np.ndarray) -> list[tuple[int, int, float, int]]:
    """Kruskal agglomeration into hierarchy rows (left, right, dist, size).

    Edges are processed in (weight, i, j) order, so equal-weight merges
    resolve by lexicographic edge index; this doubles as the minimum
    spanning tree construction (accepted edges form the MST). Internal
    nodes are numbered n .. 2n-2 in merge order.
    """
    n = weights.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    flat = weights[iu, ju]
    order = np.lexsort((ju, iu, flat))
    parent = list(range(2 * n - 1))

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    node_size = [1] * n + [0] * (n - 1)
    rows: list[tuple[int, int, float, int]] = []
    next_node = n
    for idx in order:
        left = find(int(iu[idx]))
        right = find(int(ju[idx]))
        if left == right:
            continue
        size = node_size[left] + node_size[right]
        rows.append((left, right, float(flat[idx]), size))
        parent[left] = next_node
        parent[right] = next_node
        node_size[next_node] = size
        next_node += 1
        if next_node == 2 * n - 1:
            break
    return rows


def _condense(
    n: int, hierarchy: list[tuple[int, int, float, int]], min_cluster_size: int
) -> list[CondensedEdge]:
    """Walk the hierarchy top-down, absorbing undersized splits.

    Merges at the same distance within one component are coalesced into a
    single multiway split (the components-per-threshold view), so the
    result does not depend on the order tied merges happened to be
    processed and is invariant under permutation of the input points.
    At each split, children reaching min_cluster_size survive: two or
    more of them start new child clusters, exactly one continues the
    current cluster, and points of undersized children fall out at that
    level's lambda (1/distance, infinite at distance zero). The root
    cluster has id n.
    """

    def node_size(node: int) -> int:
        return 1 if node < n else hierarchy[node - n][3]

    def node_dist(node: int) -> float:
        return hierarchy[node - n][2]

    def leaf_points(node: int) -> list[int]:
        points: list[int] = []
        stack = [node]
        while stack:
            item = stack.pop()
            if item < n:
                points.append(item)
            else:
                left, right, _, _ = hierarchy[item - n]
                stack.extend((left, right))
        return points

    def multiway_children(node: int) -> list[int]:
        """Children after contracting equal-distance internal runs."""
        level = node_dist(node)
        children: list[int] = []
        stack = [node]
        while stack:
            item = stack.pop()
            left, right, dist, _ = hierarchy[item - n]
            for child in (right, left):
                if child >= n and node_dist(child) == level:
                    stack.append(child)
                else:
                    children.append(child)
        return children

    root = 2 * n - 2
    rows: list[CondensedEdge] = []
    next_cluster = n + 1
    # (hierarchy node, cluster label the walk is currently inside)
    queue: deque[tuple[int, int]] = deque([(root, n)])
    while queue:
        node, label = queue.popleft()
        dist = node_dist(node)
        lam = math.inf if dist <= 0.0 else 1.0 / dist
        children = multiway_children(node)
        big = {c for c in children if node_size(c) >= min_cluster_size}
        for child in children:
            if child in big and len(big) >= 2:
                rows.append(CondensedEdge(label, next_cluster, lam, node_size(child)))
                queue.append((child, next_cluster))
                next_cluster += 1
            elif child in big:  # exactly one survivor: cluster continues
                queue.append((child, label))
            else:
                for point in sorted(leaf_points(child)):
                    rows.append(CondensedEdge(label, point, lam, 1))
    return rows


def _leaf_labels(n: int, rows: list[CondensedEdge]) -> list[int]:
    cluster_children = {row.child for row in rows if row.child >= n}
    cluster_parents = {row.parent for row in rows if row.child >= n}
    leaves = ({n} | cluster_children) - cluster_parents

    if not cluster_children:
        # The tree never split. The root counts as a single cluster only
        # for a zero-diameter blob (every point at infinite lambda);
        # otherwise the points dispersed gradually and all are outliers.
        if all(math.isinf(row.lam) for row in rows):
            return [0] * n
        return [-1] * n

    assigned: dict[int, int] = {}
    for row in rows:
        if row.child < n:
            assigned[row.child] = row.parent

    labels = [-1] * n
    for point, cluster in assigned.items():
        if cluster in leaves:
            labels[point] = cluster

    # Canonical numbering: clusters ordered by their smallest member index.
    order: dict[int, int] = {}
    for point in range(n):
        cluster = labels[point]
        if cluster >= 0 and cluster not in order:
            order[cluster] = len(order)
    return [order[label] if label >= 0 else -1 for label in labels]


def hdbscan_leaf(
    points: Sequence[EmbeddingVector],
    min_cluster_size: int = 5,
    *,
    debug_dump: str | Path | None = None,
) -> ClusteringResult:
    """Cluster points, labeling each with a leaf cluster id or -1 (outlier).

    Fewer points than min_cluster_size yields all outliers. When the
    condensed tree never splits, the root itself is the single leaf.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    x = _points_matrix(points)
    n = x.shape[0]
    if n < min_cluster_size:
        return ClusteringResult.from_labels([-1] * n)
    reach = mutual_reachability(x, min_cluster_size)
    hierarchy = _single_linkage(reach)
    rows = _condense(n, hierarchy, min_cluster_size)
    if debug_dump is not None:
        dump_condensed_tree(rows, debug_dump)
    return ClusteringResult.from_labels(_leaf_labels(n, rows))


def dump_condensed_tree(rows: Sequence[CondensedEdge], path: str | Path) -> None:
    """Write condensed-tree edges as JSONL for inspection."""
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(
                json.dumps(
                    {
                        "parent": row.parent,
                        "child": row.child,
                        "lambda": row.lam if math.isfinite(row.lam) else "inf",
                        "child_size": row.child_size,
                    }
                )
            )
            handle.write("\n")
