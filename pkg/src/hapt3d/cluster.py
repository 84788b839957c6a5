"""Inference-time post-processing: HDBSCAN over predicted embeddings for
both instance levels, plus semantic-consistency splitting for the fine
(trunk/fruit) level.

The HDBSCAN pipeline is the exact O(M^2) reference path: core distances,
mutual reachability, a lazily evaluated Prim MST (O(M) memory), a
single-linkage hierarchy, the condensed tree at ``min_cluster_size``, and
excess-of-mass cluster selection. All tie-breaks are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import LabeledCloud, THING_CLASSES
from .nn import NetworkOutput

_CHUNK = 512
_MIN_DISTANCE = 1e-12  # floor before inverting distances into lambda values


@dataclass
class ClusterParams:
    min_cluster_size: int = 20
    min_samples: int = 10
    selection: str = "eom"  # excess-of-mass is the only implemented rule

    def validate(self) -> "ClusterParams":
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.selection != "eom":
            raise ValueError("only excess-of-mass selection is implemented")
        return self


def tree_level_params() -> ClusterParams:
    return ClusterParams(min_cluster_size=100, min_samples=10)


def instance_level_params() -> ClusterParams:
    return ClusterParams(min_cluster_size=20, min_samples=10)


@dataclass
class InstancePrediction:
    semantic: np.ndarray  # N predicted class labels
    tree_label: np.ndarray  # N ints, -1 = no tree
    instance_label: np.ndarray  # N ints, -1 = noise / stuff

    def validate(self) -> "InstancePrediction":
        stuff = ~np.isin(self.semantic, THING_CLASSES)
        if np.any(self.tree_label[stuff] >= 0) or np.any(self.instance_label[stuff] >= 0):
            raise ValueError("stuff-class point carries an instance label")
        for inst in np.unique(self.instance_label[self.instance_label >= 0]):
            if len(np.unique(self.semantic[self.instance_label == inst])) > 1:
                raise ValueError(f"instance {inst} mixes semantic classes")
        return self


# -- HDBSCAN ------------------------------------------------------------------


def _core_distances(points: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance of each point to its min_samples-th nearest other point."""
    m = len(points)
    k = min(min_samples, m - 1)
    sq = (points**2).sum(axis=1)
    core = np.empty(m)
    for lo in range(0, m, _CHUNK):
        hi = min(lo + _CHUNK, m)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * points[lo:hi] @ points.T
        np.maximum(d2, 0.0, out=d2)
        # row includes the self distance 0, so the k-th other point sits at
        # sorted index k
        core[lo:hi] = np.sqrt(np.partition(d2, k, axis=1)[:, k])
    return core


def _mst_prim(points: np.ndarray, core: np.ndarray):
    """MST edges of the complete mutual-reachability graph, O(M) memory."""
    m = len(points)
    sq = (points**2).sum(axis=1)
    best = np.full(m, np.inf)
    parent = np.zeros(m, dtype=np.intp)
    in_tree = np.zeros(m, dtype=bool)
    edges = np.empty((m - 1, 3))
    current = 0
    for step in range(m - 1):
        in_tree[current] = True
        d2 = sq + sq[current] - 2.0 * points @ points[current]
        np.maximum(d2, 0.0, out=d2)
        reach = np.maximum(np.maximum(np.sqrt(d2), core), core[current])
        closer = (reach < best) & ~in_tree
        best[closer] = reach[closer]
        parent[closer] = current
        masked = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(masked))
        edges[step] = (parent[nxt], nxt, best[nxt])
        current = nxt
    return edges


def _single_linkage(edges: np.ndarray, m: int):
    """Hierarchy of merge events by ascending edge weight. Edges with
    exactly equal weight merge simultaneously into one n-ary node, so the
    result does not depend on which valid MST the tie-ridden mutual
    reachability graph produced."""
    order = np.argsort(edges[:, 2], kind="stable")
    weights = edges[order, 2]
    children = {}  # node -> list of child nodes
    height = {}
    size = {i: 1 for i in range(m)}
    uf = list(range(m))
    rep = list(range(m))  # root -> dendrogram node of its component

    def find(a):
        root = a
        while uf[root] != root:
            root = uf[root]
        while uf[a] != root:
            uf[a], a = root, uf[a]
        return root

    next_node = m
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and weights[j] == weights[i]:
            j += 1
        acc = {}  # current root -> dendrogram nodes being merged at this weight
        for e in order[i:j]:
            a, b = int(edges[e, 0]), int(edges[e, 1])
            ra, rb = find(a), find(b)
            if ra == rb:
                continue
            la = acc.pop(ra, None) or [rep[ra]]
            lb = acc.pop(rb, None) or [rep[rb]]
            uf[ra] = rb
            acc[rb] = la + lb
        for root, olds in acc.items():
            node = next_node
            next_node += 1
            children[node] = olds
            height[node] = weights[i]
            size[node] = sum(size[c] for c in olds)
            rep[root] = node
        i = j
    root_node = rep[find(0)]
    return children, height, size, root_node


def _leaves_under(node, children, m):
    out = []
    stack = [node]
    while stack:
        n = stack.pop()
        if n < m:
            out.append(n)
        else:
            stack.extend(children[n])
    return out


def _condense(children, height, size, root_node, m, min_cluster_size):
    """Condensed tree: rows (parent_cluster, child, lambda, child_size,
    child_is_cluster). At each merge height, children smaller than
    min_cluster_size fall out of the parent as points; the cluster truly
    splits only when at least two children are large enough."""
    rows = []
    relabel = {root_node: 0}
    next_cluster = 1
    stack = [root_node]
    while stack:
        node = stack.pop()
        cluster = relabel[node]
        lam = 1.0 / max(height[node], _MIN_DISTANCE)
        big = [c for c in children[node] if size[c] >= min_cluster_size]
        small = [c for c in children[node] if size[c] < min_cluster_size]
        if len(big) >= 2:
            for child in big:
                relabel[child] = next_cluster
                rows.append((cluster, next_cluster, lam, int(size[child]), True))
                next_cluster += 1
                stack.append(child)
            for child in small:
                for p in _leaves_under(child, children, m):
                    rows.append((cluster, p, lam, 1, False))
        elif len(big) == 1:
            for child in small:
                for p in _leaves_under(child, children, m):
                    rows.append((cluster, p, lam, 1, False))
            relabel[big[0]] = cluster
            stack.append(big[0])
        else:
            for p in _leaves_under(node, children, m):
                rows.append((cluster, p, lam, 1, False))
    return rows, next_cluster


def _select_eom(rows, n_clusters):
    """Excess-of-mass selection; the root cluster is never selected."""
    birth = np.zeros(n_clusters)
    stability = np.zeros(n_clusters)
    children = [[] for _ in range(n_clusters)]
    for parent, child, lam, sz, is_cluster in rows:
        if is_cluster:
            birth[child] = lam
            children[parent].append(child)
    for parent, child, lam, sz, is_cluster in rows:
        stability[parent] += (lam - birth[parent]) * sz

    selected = np.zeros(n_clusters, dtype=bool)
    subtree = np.zeros(n_clusters)
    for c in range(n_clusters - 1, 0, -1):
        child_sum = sum(subtree[ch] for ch in children[c])
        if not children[c] or stability[c] >= child_sum:
            selected[c] = True
            subtree[c] = stability[c]
            # deselect descendants, the parent absorbs them
            stack = list(children[c])
            while stack:
                d = stack.pop()
                selected[d] = False
                stack.extend(children[d])
        else:
            subtree[c] = child_sum
    return selected


def _renumber(labels: np.ndarray) -> np.ndarray:
    """0..n-1 by descending cluster size; ties by smallest member index."""
    out = np.full(len(labels), -1, dtype=np.int64)
    uniq = np.unique(labels[labels >= 0])
    stats = []
    for lab in uniq:
        members = np.flatnonzero(labels == lab)
        stats.append((-len(members), members[0], lab))
    for new, (_, _, lab) in enumerate(sorted(stats)):
        out[labels == lab] = new
    return out


def hdbscan(points, params: ClusterParams) -> np.ndarray:
    """Cluster labels in {-1, 0, 1, ...}; -1 is noise. Labels are numbered
    by descending cluster size with smallest-member-index tie-break."""
    params.validate()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    if m < params.min_cluster_size or m < 2:
        return np.full(m, -1, dtype=np.int64)

    core = _core_distances(points, params.min_samples)
    edges = _mst_prim(points, core)
    children, height, size, root_node = _single_linkage(edges, m)
    rows, n_clusters = _condense(children, height, size, root_node, m,
                                 params.min_cluster_size)
    selected = _select_eom(rows, n_clusters)

    # a point gets the selected ancestor (if any) of the cluster it fell from
    parent_of = np.zeros(n_clusters, dtype=np.intp)
    for parent, child, lam, sz, is_cluster in rows:
        if is_cluster:
            parent_of[child] = parent
    sel_anc = np.full(n_clusters, -1, dtype=np.intp)
    for c in range(1, n_clusters):
        sel_anc[c] = c if selected[c] else sel_anc[parent_of[c]]

    labels = np.full(m, -1, dtype=np.int64)
    for parent, child, lam, sz, is_cluster in rows:
        if not is_cluster and sel_anc[parent] >= 0:
            labels[child] = sel_anc[parent]
    return _renumber(labels)


# -- panoptic extraction ---------------------------------------------------------


def _point_embeddings(output: NetworkOutput, cloud: LabeledCloud, offsets: np.ndarray):
    return cloud.positions + offsets[output.point_to_voxel]


def predicted_semantics(output: NetworkOutput, cloud: LabeledCloud) -> np.ndarray:
    return output.semantic_labels()[output.point_to_voxel]


def extract_tree_instances(output: NetworkOutput, cloud: LabeledCloud,
                           params: ClusterParams) -> np.ndarray:
    """Per-point tree labels: cluster tree-offset embeddings of the points
    predicted as trunk or apple. No semantic splitting; a tree instance
    legitimately spans both classes."""
    sem = predicted_semantics(output, cloud)
    thing = np.isin(sem, THING_CLASSES)
    labels = np.full(len(cloud), -1, dtype=np.int64)
    if np.any(thing):
        e = _point_embeddings(output, cloud, output.tree_offsets.data)
        labels[thing] = hdbscan(e[thing], params)
    return labels


def extract_fine_instances(output: NetworkOutput, cloud: LabeledCloud,
                           params: ClusterParams) -> np.ndarray:
    """Per-point trunk/fruit labels: cluster instance-offset embeddings of
    predicted thing points, then split every cluster by predicted class;
    parts below min_cluster_size become noise."""
    sem = predicted_semantics(output, cloud)
    thing = np.isin(sem, THING_CLASSES)
    labels = np.full(len(cloud), -1, dtype=np.int64)
    if not np.any(thing):
        return labels
    e = _point_embeddings(output, cloud, output.instance_offsets.data)
    raw = hdbscan(e[thing], params)

    thing_idx = np.flatnonzero(thing)
    thing_sem = sem[thing]
    split = np.full(len(raw), -1, dtype=np.int64)
    nxt = 0
    for lab in np.unique(raw[raw >= 0]):
        in_cluster = raw == lab
        for cls in np.unique(thing_sem[in_cluster]):
            part = in_cluster & (thing_sem == cls)
            if part.sum() >= params.min_cluster_size:
                split[part] = nxt
                nxt += 1
    labels[thing_idx] = _renumber(split)
    return labels


def predict_instances(output: NetworkOutput, cloud: LabeledCloud,
                      tree_params: ClusterParams | None = None,
                      instance_params: ClusterParams | None = None) -> InstancePrediction:
    """Full post-processing: semantic argmax plus both clusterings."""
    tree_params = tree_params or tree_level_params()
    instance_params = instance_params or instance_level_params()
    return InstancePrediction(
        semantic=predicted_semantics(output, cloud),
        tree_label=extract_tree_instances(output, cloud, tree_params),
        instance_label=extract_fine_instances(output, cloud, instance_params),
    ).validate()
