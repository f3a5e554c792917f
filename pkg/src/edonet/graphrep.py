"""Grid graphs, neighbour tables, normalisation and point-cloud slicing."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    pass


class ExtractionError(GraphError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass
class GraphState:
    """Cloth state as a graph: node positions, undirected edges, gripper mask."""

    positions: np.ndarray
    edges: np.ndarray
    gripper_mask: np.ndarray
    rows: int = 0
    cols: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.gripper_mask = np.asarray(self.gripper_mask, dtype=bool)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise GraphError(f"positions must be N x 3, got {self.positions.shape}")
        if len(self.gripper_mask) != len(self.positions):
            raise GraphError("gripper mask length differs from node count")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise GraphError("self-loop in edge list")
        key = np.sort(self.edges, axis=1)
        if len(np.unique(key, axis=0)) != len(key):
            raise GraphError("duplicate edge in edge list")

    @property
    def n_nodes(self):
        return len(self.positions)

    def with_positions(self, positions):
        return GraphState(positions, self.edges, self.gripper_mask, self.rows, self.cols)


def grid_edges(rows, cols):
    idx = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.concatenate([horiz, vert])


def grid_graph(rows, cols, spacing=1.0, positions=None):
    """4-connected grid; the first and last rows are the gripped edges."""
    if rows < 2 or cols < 2:
        raise GraphError(f"grid needs rows, cols >= 2, got {rows}x{cols}")
    if positions is None:
        r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        positions = np.stack([c.ravel() * spacing, r.ravel() * spacing, np.zeros(rows * cols)], axis=1)
    mask = np.zeros(rows * cols, dtype=bool)
    mask[:cols] = True
    mask[-cols:] = True
    return GraphState(positions, grid_edges(rows, cols), mask, rows, cols)


@dataclass
class NeighborTable:
    """Per-node 1-hop and exactly-2-hop neighbour sets.

    ``dst``, ``src`` and ``hop`` list every directed pair (v <- s) with s in
    N_v^1 (hop 0) or N_v^2 (hop 1), sorted by (hop, dst, src).
    """

    hop1: list
    hop2: list
    dst: np.ndarray = field(repr=False, default=None)
    src: np.ndarray = field(repr=False, default=None)
    hop: np.ndarray = field(repr=False, default=None)

    @property
    def n_nodes(self):
        return len(self.hop1)


def neighbor_table(graph):
    n = graph.n_nodes
    adj = [[] for _ in range(n)]
    for i, j in graph.edges:
        adj[i].append(int(j))
        adj[j].append(int(i))
    hop1, hop2 = [], []
    for v in range(n):
        dist = {v: 0}
        queue = deque([v])
        while queue:
            u = queue.popleft()
            if dist[u] == 2:
                continue
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        hop1.append(np.array(sorted(w for w, d in dist.items() if d == 1), dtype=np.int64))
        hop2.append(np.array(sorted(w for w, d in dist.items() if d == 2), dtype=np.int64))
    if n > 1 and not _connected(adj):
        raise GraphError("graph is disconnected")
    dst, src, hop = [], [], []
    for k, table in enumerate((hop1, hop2)):
        for v in range(n):
            dst.extend([v] * len(table[v]))
            src.extend(table[v].tolist())
            hop.extend([k] * len(table[v]))
    return NeighborTable(hop1, hop2, np.array(dst, dtype=np.int64), np.array(src, dtype=np.int64),
                         np.array(hop, dtype=np.int64))


def _connected(adj):
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(adj)


def _stride(src, tgt):
    if tgt < 2 or src < tgt or (src - 1) % (tgt - 1) != 0:
        raise GraphError(f"cannot downsample {src} to {tgt}: need (src-1) divisible by (tgt-1)")
    return (src - 1) // (tgt - 1)


def downsample_cloth(state, rows=8, cols=8):
    """Evenly strided node selection that keeps corners and gripped rows."""
    rs = _stride(state.rows, rows)
    cs = _stride(state.cols, cols)
    r_idx = np.arange(rows) * rs
    c_idx = np.arange(cols) * cs
    sel = (r_idx[:, None] * state.cols + c_idx[None, :]).ravel()
    g = grid_graph(rows, cols, positions=state.positions[sel])
    g.gripper_mask = np.asarray(state.gripper_mask)[sel]
    return g


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-dimension mean and std for named feature groups."""

    mean: dict
    std: dict

    def apply(self, name, x):
        return (np.asarray(x, dtype=np.float64) - self.mean[name]) / self.std[name]

    def invert(self, name, x):
        return np.asarray(x, dtype=np.float64) * self.std[name] + self.mean[name]

    def scale(self, name, x):
        """Normalise a difference (no mean shift)."""
        return np.asarray(x, dtype=np.float64) / self.std[name]

    def unscale(self, name, x):
        return np.asarray(x, dtype=np.float64) * self.std[name]

    def to_dict(self):
        return {k: {"mean": self.mean[k].tolist(), "std": self.std[k].tolist()} for k in sorted(self.mean)}

    @classmethod
    def from_dict(cls, d):
        return cls({k: np.array(v["mean"]) for k, v in d.items()},
                   {k: np.array(v["std"]) for k, v in d.items()})

    def merged(self, other):
        return NormStats({**self.mean, **other.mean}, {**self.std, **other.std})


def fit_norm_stats(features, floor=1e-12):
    """Fit stats on training features.

    ``features`` maps a group name to an array whose last axis holds the
    feature dimensions. A dimension whose std is below ``floor`` raises
    :class:`ZeroVarianceError` naming it.
    """
    mean, std = {}, {}
    for name in sorted(features):
        x = np.asarray(features[name], dtype=np.float64)
        x = x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x.reshape(-1, 1)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        for d, s in enumerate(sd):
            if not s > floor:
                raise ZeroVarianceError(f"feature {name}[{d}] has zero variance")
        mean[name], std[name] = mu, sd
    return NormStats(mean, std)


# ---------------------------------------------------------------------------
# point cloud -> graph
# ---------------------------------------------------------------------------


def _thin(points, radius, start):
    """Greedy subsample keeping points at least ``radius`` apart, nearest to ``start`` first."""
    order = np.argsort(np.linalg.norm(points - start, axis=1), kind="stable")
    kept = []
    for i in order:
        p = points[i]
        if not kept or np.min(np.linalg.norm(np.asarray(kept) - p, axis=1)) >= radius:
            kept.append(p)
    return np.asarray(kept)


def _chain(points, start, end):
    """Nearest-neighbour chain from ``start`` through ``points`` to ``end``."""
    remaining = list(range(len(points)))
    path = [start]
    cur = start
    while remaining:
        d = np.linalg.norm(points[remaining] - cur, axis=1)
        k = int(np.argmin(d))
        cur = points[remaining.pop(k)]
        path.append(cur)
    path.append(end)
    return np.asarray(path)


def _equidistant(path, n_inner):
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = s[-1] * np.arange(1, n_inner + 1) / (n_inner + 1)
    return np.stack([np.interp(targets, s, path[:, d]) for d in range(3)], axis=1)


def pointcloud_to_graph(cloud, gripper_a, gripper_b, n_inner=6, eps=None, min_points=6, min_cloud=200):
    """Extract a (n_inner + 2) x len(gripper_a) grid graph from a point cloud.

    ``gripper_a[j]`` and ``gripper_b[j]`` are corresponding gripper nodes.
    For each pair, cloud points within ``eps`` of the plane through the
    pair (plane normal along the gripper axis) are projected onto that
    plane, thinned, chained by nearest neighbour from ``gripper_a[j]`` and
    resampled at ``n_inner`` equidistant arc-length positions. ``eps``
    defaults to half the gripper node gap.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) < min_cloud:
        raise ExtractionError(f"point cloud holds {len(cloud)} points, need at least {min_cloud}")
    A = np.asarray(gripper_a, dtype=np.float64)
    B = np.asarray(gripper_b, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ExtractionError("gripper endpoints must be two K x 3 arrays")
    n_pairs = len(A)
    gap = np.linalg.norm(A[-1] - A[0]) / (n_pairs - 1)
    if eps is None:
        eps = 0.5 * gap
    axis = (A[-1] - A[0]) + (B[-1] - B[0])
    rows = n_inner + 2
    pos = np.zeros((rows, n_pairs, 3))
    for j in range(n_pairs):
        chord = B[j] - A[j]
        normal = axis - axis.dot(chord) / chord.dot(chord) * chord
        normal /= np.linalg.norm(normal)
        dist = (cloud - A[j]) @ normal
        pts = cloud[np.abs(dist) <= eps]
        if len(pts) < min_points:
            raise ExtractionError(f"slice {j} holds {len(pts)} points, need {min_points}")
        pts = pts - np.outer((pts - A[j]) @ normal, normal)
        pts = _thin(pts, 0.25 * gap, A[j])
        path = _chain(pts, A[j], B[j])
        pos[0, j] = A[j]
        pos[-1, j] = B[j]
        pos[1:-1, j] = _equidistant(path, n_inner)
    return grid_graph(rows, n_pairs, positions=pos.reshape(-1, 3))
