"""Print sequencing: Reeb graph over the guidance field, labels, classifier.

Connected iso-contour regions of g (restricted to the solid) become graph
nodes; regions on consecutive levels are connected when they touch or their
centroids are within twice the layer height. Greedy longest-chain
decomposition assigns partition labels, a topological sort yields the print
order, and a small ReLU network learns the label field so the sequence value
T(x) = g(x) + order_index(x) can be queried anywhere. Collision-driven
refinement splits an offending chain and strictly increases the label count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .fields import AdamState, adam_step
from .toolpath import FieldGrid, WaypointSet

logger = logging.getLogger(__name__)

Array = np.ndarray


# ---------------------------------------------------------------------------
# Graph construction


@dataclass
class ReebNode:
    node_id: int
    level: int
    u: float
    centroid: Array
    n_voxels: int


@dataclass
class PartitionGraph:
    nodes: list
    edges: set                      # (lower node_id, upper node_id), adjacent levels
    U: Array
    labels: dict = field(default_factory=dict)   # node_id -> label id
    order: list = field(default_factory=list)    # label ids in print order
    label_volumes: list = None      # per level: int array, 0 = outside
    grid: FieldGrid = None

    @property
    def n_labels(self) -> int:
        return len(set(self.labels.values()))

    def order_index(self) -> dict:
        return {lab: k for k, lab in enumerate(self.order)}

    def label_levels(self, lab) -> list:
        return sorted(n.level for n in self.nodes if self.labels[n.node_id] == lab)

    def chain_nodes(self, lab) -> list:
        return sorted((n for n in self.nodes if self.labels[n.node_id] == lab),
                      key=lambda n: n.level)


def build_reeb(g_field, phi_field, U: Array, layer_height_norm: float,
               grid_res: int = 96, g_grid: FieldGrid | None = None,
               phi_grid: FieldGrid | None = None) -> PartitionGraph:
    """Build the region graph of g over the solid.

    Every interior voxel is binned to its nearest iso-value in U; connected
    components per bin are nodes. Nodes on consecutive levels are joined when
    their voxel sets touch (26-neighborhood) or their centroids are closer
    than 2x the layer height.
    """
    if g_grid is None:
        g_grid = FieldGrid.sample(g_field, res=grid_res)
    if phi_grid is None:
        phi_grid = FieldGrid.sample(phi_field, res=grid_res)
    inside = phi_grid.values < 0.75 * phi_grid.spacing
    mids = 0.5 * (U[1:] + U[:-1])
    bins = np.searchsorted(mids, g_grid.values)
    bins[~inside] = -1

    structure = np.ones((3, 3, 3), dtype=int)
    nodes = []
    label_volumes = []
    level_regions = []
    for k in range(len(U)):
        mask = bins == k
        lab, n_reg = ndimage.label(mask, structure=structure)
        label_volumes.append(lab)
        regions = []
        if n_reg:
            centroids = ndimage.center_of_mass(mask, lab, index=range(1, n_reg + 1))
            sizes = ndimage.sum_labels(mask, lab, index=range(1, n_reg + 1))
            for r in range(n_reg):
                node = ReebNode(
                    node_id=len(nodes), level=k, u=float(U[k]),
                    centroid=g_grid.to_world(np.asarray(centroids[r])),
                    n_voxels=int(sizes[r]),
                )
                nodes.append(node)
                regions.append(node.node_id)
        level_regions.append(regions)

    edges = set()
    thresh = 2.0 * layer_height_norm
    for k in range(len(U) - 1):
        la, lb = label_volumes[k], label_volumes[k + 1]
        if not level_regions[k] or not level_regions[k + 1]:
            continue
        pair_set = set()
        # touching voxels across the two bins (26-neighborhood)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    a = la[max(dx, 0):la.shape[0] + min(dx, 0),
                           max(dy, 0):la.shape[1] + min(dy, 0),
                           max(dz, 0):la.shape[2] + min(dz, 0)]
                    b = lb[max(-dx, 0):lb.shape[0] + min(-dx, 0),
                           max(-dy, 0):lb.shape[1] + min(-dy, 0),
                           max(-dz, 0):lb.shape[2] + min(-dz, 0)]
                    both = (a > 0) & (b > 0)
                    if both.any():
                        pair_set.update(
                            zip(a[both].ravel().tolist(), b[both].ravel().tolist()))
        for ra, rb in pair_set:
            edges.add((level_regions[k][ra - 1], level_regions[k + 1][rb - 1]))
        # the centroid-distance rule
        for ia in level_regions[k]:
            for ib in level_regions[k + 1]:
                d = np.linalg.norm(nodes[ia].centroid - nodes[ib].centroid)
                if d < thresh:
                    edges.add((ia, ib))

    graph = PartitionGraph(nodes=nodes, edges=edges, U=np.asarray(U),
                           label_volumes=label_volumes, grid=g_grid)
    assign_labels(graph)
    return graph


# ---------------------------------------------------------------------------
# Chain decomposition and print order


def assign_labels(graph: PartitionGraph):
    """Greedy longest-chain decomposition + topological label order."""
    up = {n.node_id: [] for n in graph.nodes}
    for a, b in graph.edges:
        up[a].append(b)
    for k in up:
        up[k].sort()

    unassigned = set(n.node_id for n in graph.nodes)
    labels = {}
    next_label = 0
    while unassigned:
        # longest chain through unassigned nodes (DP over levels, downward)
        length = {}
        successor = {}
        for n in sorted(graph.nodes, key=lambda n: -n.level):
            if n.node_id not in unassigned:
                continue
            best, succ = 1, None
            for nxt in up[n.node_id]:
                if nxt in unassigned and length.get(nxt, 0) + 1 > best:
                    best = length[nxt] + 1
                    succ = nxt
            length[n.node_id] = best
            successor[n.node_id] = succ
        start = max(length, key=lambda k: (length[k], -graph.nodes[k].level, -k))
        node = start
        while node is not None:
            labels[node] = next_label
            unassigned.discard(node)
            node = successor.get(node)
        next_label += 1
    graph.labels = labels
    _order_labels(graph)


def _label_dependencies(graph: PartitionGraph):
    deps = {lab: set() for lab in set(graph.labels.values())}
    for a, b in graph.edges:
        la, lb = graph.labels[a], graph.labels[b]
        if la != lb:
            deps[lb].add(la)  # lb rests on la's material
    return deps


def _order_labels(graph: PartitionGraph):
    """Topological order (Kahn) with ties broken by base height then id.

    Cycles in the contracted label graph are resolved by splitting one of
    the participating chains, which is always possible because singleton
    chains make the contraction acyclic.
    """
    while True:
        deps = _label_dependencies(graph)
        base_u = {lab: min(n.u for n in graph.nodes
                           if graph.labels[n.node_id] == lab)
                  for lab in deps}
        order = []
        remaining = dict(deps)
        while remaining:
            ready = [lab for lab, d in remaining.items()
                     if not (d & set(remaining))]
            if not ready:
                break
            ready.sort(key=lambda lab: (base_u[lab], lab))
            nxt = ready[0]
            order.append(nxt)
            del remaining[nxt]
        if not remaining:
            graph.order = order
            return
        # cycle: split the longest involved chain at its midpoint level
        cyc = sorted(remaining, key=lambda lab: -len(graph.chain_nodes(lab)))
        chain = graph.chain_nodes(cyc[0])
        if len(chain) < 2:
            raise RuntimeError("label cycle with singleton chains; graph invalid")
        _split_chain(graph, cyc[0], chain[len(chain) // 2].level)


def _split_chain(graph: PartitionGraph, lab: int, split_level: int):
    """Give nodes of ``lab`` at level >= split_level a fresh label."""
    new_label = max(graph.labels.values()) + 1
    for n in graph.nodes:
        if graph.labels[n.node_id] == lab and n.level >= split_level:
            graph.labels[n.node_id] = new_label
    return new_label


def refine_partition(graph: PartitionGraph, collision_report) -> PartitionGraph:
    """Split the chain blamed by the collision report at the lowest colliding u.

    ``collision_report`` rows are (obstacle label, obstacle u). The label
    count strictly increases per call; with at most one split per node the
    partition degenerates to per-node labels (where T follows g alone).
    """
    if not collision_report:
        return graph
    new_graph = PartitionGraph(nodes=graph.nodes, edges=graph.edges, U=graph.U,
                               labels=dict(graph.labels),
                               label_volumes=graph.label_volumes, grid=graph.grid)
    rows = list(collision_report)
    labs, counts = np.unique([r[0] for r in rows], return_counts=True)
    for lab in labs[np.argsort(-counts)]:
        chain = new_graph.chain_nodes(int(lab))
        if len(chain) < 2:
            continue
        u_low = min(r[1] for r in rows if r[0] == lab)
        split_level = None
        for n in chain[1:]:
            if n.u >= u_low - 1e-12:
                split_level = n.level
                break
        if split_level is None or split_level <= chain[0].level:
            split_level = chain[len(chain) // 2].level
        _split_chain(new_graph, int(lab), split_level)
        _order_labels(new_graph)
        logger.info("refinement: split label %d at level %d (labels %d -> %d)",
                    lab, split_level, graph.n_labels, new_graph.n_labels)
        return new_graph
    logger.warning("refinement requested but no splittable chain found")
    _order_labels(new_graph)
    return new_graph


# ---------------------------------------------------------------------------
# Waypoint labeling (exact lookup)


def _level_of(u_vals: Array, U: Array) -> Array:
    mids = 0.5 * (U[1:] + U[:-1])
    return np.searchsorted(mids, u_vals)


def label_waypoints(graph: PartitionGraph, wps: WaypointSet) -> Array:
    """Ground-truth order-index labels for waypoints via the region volumes."""
    order_idx = graph.order_index()
    node_by_level_region = {}
    for n in graph.nodes:
        node_by_level_region.setdefault(n.level, {})
    region_counter = {k: 0 for k in node_by_level_region}
    for n in graph.nodes:
        region_counter[n.level] += 1
        node_by_level_region[n.level][region_counter[n.level]] = n.node_id

    grid = graph.grid
    levels = _level_of(wps.u, graph.U)
    idx = np.clip(np.round((wps.pos - grid.origin) / grid.spacing).astype(int),
                  0, grid.res - 1)
    out = np.empty(len(wps), dtype=int)
    for k in np.unique(levels):
        vol = graph.label_volumes[k]
        sel = levels == k
        regions = vol[idx[sel, 0], idx[sel, 1], idx[sel, 2]]
        # points whose voxel missed the region mask: search nearby voxels
        missing = regions == 0
        if missing.any():
            coords = np.argwhere(vol > 0)
            if len(coords) == 0:
                raise RuntimeError(f"no region voxels at level {k}")
            from scipy.spatial import cKDTree

            tree = cKDTree(coords)
            _, nearest = tree.query(idx[sel][missing])
            cc = coords[nearest]
            regions = regions.copy()
            regions[missing] = vol[cc[:, 0], cc[:, 1], cc[:, 2]]
        node_ids = [node_by_level_region[k][r] for r in regions]
        out[sel] = [order_idx[graph.labels[nid]] for nid in node_ids]
    return out


def sequence_values(wps: WaypointSet, labels_order_idx: Array) -> Array:
    """T = g + order index (g is the waypoint's layer value)."""
    return wps.u + labels_order_idx


# ---------------------------------------------------------------------------
# Label classifier (ReLU MLP on (x, g(x)))


@dataclass
class ClassifierParams:
    weights: list
    biases: list

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]


def _mlp_init(sizes, rng) -> ClassifierParams:
    rng = np.random.default_rng(rng)
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a)))
        bs.append(np.zeros(b))
    return ClassifierParams(ws, bs)


def _mlp_forward(params: ClassifierParams, x: Array, want_cache=False):
    a = x
    cache = []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if k < len(params.weights) - 1:
            cache.append((a, z > 0))
            a = np.maximum(z, 0.0)
        else:
            cache.append((a, None))
            a = z
    return (a, cache) if want_cache else a


def _mlp_backward(params: ClassifierParams, cache, dz):
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        a_in, relu_mask = cache[k]
        gw[k] = dz.T @ a_in
        gb[k] = dz.sum(axis=0)
        if k:
            dz = (dz @ params.weights[k]) * cache[k - 1][1]
    return gw, gb


@dataclass
class ClassifierConfig:
    hidden: int = 256
    layers: int = 3
    lr: float = 1e-3
    epochs: int = 60
    batch: int = 4096
    holdout_frac: float = 0.1
    target_accuracy: float = 0.995
    seed: int = 0


class SequenceClassifier:
    """Order-index classifier on the 4-vector (x, g(x))."""

    def __init__(self, params: ClassifierParams, n_classes: int):
        self.params = params
        self.n_classes = n_classes

    def labels(self, x: Array, g_vals: Array) -> Array:
        if self.n_classes == 1:
            return np.zeros(len(x), dtype=int)
        logits = _mlp_forward(self.params, np.column_stack([x, g_vals]))
        return logits.argmax(axis=1)

    def logits(self, x: Array, g_vals: Array) -> Array:
        return _mlp_forward(self.params, np.column_stack([x, g_vals]))


def train_classifier(wps: WaypointSet, labels_gt: Array,
                     cfg: ClassifierConfig | None = None):
    """Cross-entropy training of the label classifier on waypoint data.

    Holds out a fraction for the accuracy gate; doubles the epoch budget once
    if the gate fails, then raises TrainingError.
    """
    from .sdf import TrainingError

    cfg = cfg or ClassifierConfig()
    n_classes = int(labels_gt.max()) + 1
    if n_classes == 1:
        params = _mlp_init((4, cfg.hidden, 1), cfg.seed)
        return SequenceClassifier(params, 1), {"accuracy": 1.0, "mislabeled": []}

    x_all = np.column_stack([wps.pos, wps.u])
    rng = np.random.default_rng(cfg.seed)
    n = len(x_all)
    perm = rng.permutation(n)
    n_hold = max(int(cfg.holdout_frac * n), 1)
    hold, train = perm[:n_hold], perm[n_hold:]

    sizes = (4,) + (cfg.hidden,) * (cfg.layers - 1) + (n_classes,)
    params = _mlp_init(sizes, cfg.seed)
    state = AdamState.for_params(params, lr=cfg.lr)

    def run_epochs(n_epochs):
        for _ in range(n_epochs):
            order = rng.permutation(len(train))
            for s in range(0, len(train), cfg.batch):
                idx = train[order[s:s + cfg.batch]]
                xb, yb = x_all[idx], labels_gt[idx]
                logits, cache = _mlp_forward(params, xb, want_cache=True)
                zmax = logits.max(axis=1, keepdims=True)
                ez = np.exp(logits - zmax)
                p = ez / ez.sum(axis=1, keepdims=True)
                dz = p.copy()
                dz[np.arange(len(yb)), yb] -= 1.0
                dz /= len(yb)
                grads = _mlp_backward(params, cache, dz)
                adam_step(params, grads, state, context="classifier cross-entropy")

    def accuracy(idx):
        pred = _mlp_forward(params, x_all[idx]).argmax(axis=1)
        return float((pred == labels_gt[idx]).mean()), pred

    run_epochs(cfg.epochs)
    acc, _ = accuracy(hold)
    if acc < cfg.target_accuracy:
        logger.info("classifier held-out accuracy %.4f < gate; doubling epochs", acc)
        run_epochs(cfg.epochs)
        acc, _ = accuracy(hold)
    if acc < cfg.target_accuracy:
        raise TrainingError(
            f"classifier accuracy {acc:.4f} below {cfg.target_accuracy}")
    _, pred = accuracy(hold)
    bad = hold[pred != labels_gt[hold]]
    report = {"accuracy": acc,
              "mislabeled": [wps.pos[i].tolist() for i in bad[:50]]}
    return SequenceClassifier(params, n_classes), report


# ---------------------------------------------------------------------------
# Sequence field views used by motion planning


class SequenceField:
    """T(x) = g(x) + order-index label, via the classifier or exact lookup."""

    def __init__(self, g_field, classifier: SequenceClassifier | None = None,
                 graph: PartitionGraph | None = None, strict: bool = False):
        if strict and graph is None:
            raise ValueError("strict mode needs the partition graph")
        if not strict and classifier is None:
            raise ValueError("classifier mode needs a trained classifier")
        self.g_field = g_field
        self.classifier = classifier
        self.graph = graph
        self.strict = strict

    def labels(self, x: Array, g_vals: Array | None = None) -> Array:
        if g_vals is None:
            g_vals = self.g_field.values(x)
        if self.strict:
            return self._lookup_labels(x, g_vals)
        return self.classifier.labels(x, g_vals)

    def _lookup_labels(self, x: Array, g_vals: Array) -> Array:
        graph = self.graph
        order_idx = graph.order_index()
        grid = graph.grid
        levels = _level_of(g_vals, graph.U)
        idx = np.clip(np.round((x - grid.origin) / grid.spacing).astype(int),
                      0, grid.res - 1)
        node_lookup = {}
        counter = {}
        for n in graph.nodes:
            counter[n.level] = counter.get(n.level, 0) + 1
            node_lookup[(n.level, counter[n.level])] = n.node_id
        out = np.empty(len(x), dtype=int)
        for k in np.unique(levels):
            vol = graph.label_volumes[k]
            sel = levels == k
            regions = vol[idx[sel, 0], idx[sel, 1], idx[sel, 2]]
            missing = regions == 0
            if missing.any():
                from scipy.spatial import cKDTree

                coords = np.argwhere(vol > 0)
                if len(coords):
                    tree = cKDTree(coords)
                    _, nearest = tree.query(idx[sel][missing])
                    cc = coords[nearest]
                    regions = regions.copy()
                    regions[missing] = vol[cc[:, 0], cc[:, 1], cc[:, 2]]
                else:
                    regions = regions.copy()
                    regions[missing] = 1  # no voxels at this level at all
            vals = np.empty(regions.shape, dtype=int)
            for i, r in enumerate(regions):
                nid = node_lookup.get((k, int(r)))
                vals[i] = order_idx[graph.labels[nid]] if nid is not None else 0
            out[sel] = vals
        return out

    def values(self, x: Array) -> Array:
        g_vals = self.g_field.values(x)
        return g_vals + self.labels(x, g_vals)
