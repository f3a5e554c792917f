"""Forward dynamics g_theta and the inverse head g''.

Graphs of one batch are stacked into a single disconnected graph. Each
propagation step sums messages Psi(h_v, h_s, e_vs) over the 1-hop and the
2-hop neighbours separately and feeds [h_v, sum1, sum2] to Phi. Psi is
Linear -> ReLU -> Linear; the last Linear commutes with the sum, so it is
applied after aggregation (sum of W2 r + b2 equals W2 (sum r) + deg * b2).
"""

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .graphrep import neighbor_table

HIDDEN = 32
STEPS = 4


class ModelError(RuntimeError):
    pass


@dataclass
class GraphBatch:
    """B graphs of N nodes, already normalised, flattened for the network.

    ``nodes``: (B*N) x 5 = [position(3), action(1), gripper flag(1)];
    ``dst``/``src``/``hop``: directed neighbour pairs (message s -> v);
    ``geom``: per pair [pos_s - pos_v (3), |pos_s - pos_v| (1)];
    ``owner``: per pair, row of the latent matrix to attach;
    ``deg``: (2*B*N) x 1 neighbour counts per (hop, node).
    """

    nodes: np.ndarray
    dst: np.ndarray
    src: np.ndarray
    hop: np.ndarray
    geom: np.ndarray
    owner: np.ndarray
    n_graphs: int
    n_nodes: int

    @property
    def total_nodes(self):
        return self.n_graphs * self.n_nodes

    def deg(self, union=False):
        n = self.total_nodes
        seg = self.dst if union else self.dst + self.hop * n
        return np.bincount(seg, minlength=n if union else 2 * n).astype(np.float64)[:, None]


_TABLES = {}


def _table_for(graph):
    key = (graph.n_nodes, graph.edges.tobytes())
    tab = _TABLES.get(key)
    if tab is None:
        tab = neighbor_table(graph)
        _TABLES[key] = tab
    return tab


def build_model_input(graphs, positions, actions, owner):
    """Assemble a :class:`GraphBatch`.

    ``graphs`` gives topology and gripper masks, ``positions`` (B x N x 3)
    and ``actions`` (B,) are normalised values, ``owner[b]`` is the latent
    row used by graph b.
    """
    positions = np.asarray(positions, dtype=np.float64)
    B, N = positions.shape[:2]
    if positions.shape[2] != 3:
        raise dn.DimensionError(f"positions must be B x N x 3, got {positions.shape}")
    actions = np.asarray(actions, dtype=np.float64).reshape(-1)
    if len(actions) != B or len(graphs) != B or len(owner) != B:
        raise dn.DimensionError("graphs, positions, actions and owner disagree on the batch size")
    nodes, dst, src, hop, own = [], [], [], [], []
    for b, g in enumerate(graphs):
        if g.n_nodes != N:
            raise dn.DimensionError(f"graph {b} has {g.n_nodes} nodes, expected {N}")
        tab = _table_for(g)
        nodes.append(np.concatenate([positions[b], np.full((N, 1), actions[b]),
                                     g.gripper_mask[:, None].astype(np.float64)], axis=1))
        dst.append(tab.dst + b * N)
        src.append(tab.src + b * N)
        hop.append(tab.hop)
        own.append(np.full(len(tab.dst), owner[b], dtype=np.int64))
    dst, src = np.concatenate(dst), np.concatenate(src)
    flat = positions.reshape(B * N, 3)
    delta = flat[src] - flat[dst]
    geom = np.concatenate([delta, np.linalg.norm(delta, axis=1, keepdims=True)], axis=1)
    return GraphBatch(np.concatenate(nodes), dst, src, np.concatenate(hop), geom, np.concatenate(own), B, N)


def init_dyn(store, latent=32, hidden=HIDDEN, union=False, prefix="dyn"):
    """``latent`` is the width of the conditioning vector (0 for no conditioning)."""
    store.add_dense(f"{prefix}.enc1", 5, hidden)
    store.add_dense(f"{prefix}.enc2", hidden, hidden)
    fan = 2 * hidden + 4 + latent
    store.add(f"{prefix}.psi.wv", (hidden, hidden), fan_in=fan)
    store.add(f"{prefix}.psi.ws", (hidden, hidden), fan_in=fan)
    store.add(f"{prefix}.psi.wg", (hidden, 4), fan_in=fan)
    if latent:
        store.add(f"{prefix}.psi.wz", (hidden, latent), fan_in=fan)
    store.add(f"{prefix}.psi.b1", (hidden,), fan_in=fan)
    store.add_dense(f"{prefix}.psi.2", hidden, hidden)
    store.add_dense(f"{prefix}.phi.1", (2 if union else 3) * hidden, hidden)
    store.add_dense(f"{prefix}.phi.2", hidden, hidden)
    store.add_dense(f"{prefix}.dec1", hidden, hidden)
    store.add_dense(f"{prefix}.dec2", hidden, 3)
    return store


def _mlp2(store, name, x, last="identity"):
    h = dn.dense(x, store[f"{name}1.w"], store[f"{name}1.b"], "relu")
    return dn.dense(h, store[f"{name}2.w"], store[f"{name}2.b"], last)


def edge_inputs(store, gb, z, prefix="dyn"):
    """Message-net pre-activation that does not depend on h: W_g e + W_z z + b1, per pair."""
    r = dn.add(dn.linear(gb.geom, store[f"{prefix}.psi.wg"]), store[f"{prefix}.psi.b1"])
    if z is not None:
        zc = dn.linear(z, store[f"{prefix}.psi.wz"])
        r = dn.add(r, dn.take_rows(zc, gb.owner))
    return r


def propagate(store, h, gb, r, union=False, prefix="dyn"):
    """One message-passing step h^{m-1} -> h^m."""
    n = gb.total_nodes
    P = dn.linear(h, store[f"{prefix}.psi.wv"])
    Q = dn.linear(h, store[f"{prefix}.psi.ws"])
    seg = gb.dst if union else gb.dst + gb.hop * n
    n_seg = n if union else 2 * n
    S = dn.edge_relu_sum(P, Q, r, gb.dst, gb.src, seg, n_seg)
    agg = dn.linear(S, store[f"{prefix}.psi.2.w"])
    agg = dn.add(agg, dn.mul(gb.deg(union), dn.reshape(store[f"{prefix}.psi.2.b"], (1, -1))))
    if union:
        x = dn.concat([h, agg], axis=1)
    else:
        x = dn.concat([h, dn.getitem(agg, slice(0, n)), dn.getitem(agg, slice(n, 2 * n))], axis=1)
    h = dn.dense(x, store[f"{prefix}.phi.1.w"], store[f"{prefix}.phi.1.b"], "relu")
    return dn.dense(h, store[f"{prefix}.phi.2.w"], store[f"{prefix}.phi.2.b"])


def g_theta(store, gb, z=None, steps=STEPS, union=False, prefix="dyn"):
    """Predicted normalised displacement, (B*N) x 3."""
    h = _mlp2(store, f"{prefix}.enc", gb.nodes)
    r = edge_inputs(store, gb, z, prefix)
    for _ in range(steps):
        h = propagate(store, h, gb, r, union, prefix)
    out = _mlp2(store, f"{prefix}.dec", h)
    if not np.all(np.isfinite(out.data)):
        raise ModelError("non-finite dynamics output")
    return out


# ---------------------------------------------------------------------------
# inverse head
# ---------------------------------------------------------------------------


def init_inverse(store, latent=32, hidden=HIDDEN, prefix="inv"):
    store.add_dense(f"{prefix}.node1", 6, hidden)
    store.add_dense(f"{prefix}.node2", hidden, hidden)
    if latent:
        store.add_dense(f"{prefix}.z1", latent, hidden)
        store.add_dense(f"{prefix}.z2", hidden, hidden)
    store.add_dense(f"{prefix}.proj1", (2 if latent else 1) * hidden, hidden)
    store.add_dense(f"{prefix}.proj2", hidden, 1)
    return store


def g_inverse(store, start, change, z=None, prefix="inv"):
    """Predicted normalised action per graph.

    ``start`` is B x N x 3 normalised positions before the action and
    ``change`` the normalised displacement to the goal (a fixed linear
    recoding of the goal positions). ``z`` is B x p or None.
    """
    start = np.asarray(start, dtype=np.float64)
    B, N = start.shape[:2]
    x = np.concatenate([start, np.asarray(change, dtype=np.float64)], axis=2).reshape(B * N, 6)
    h = _mlp2(store, f"{prefix}.node", x, "relu")
    if z is not None:
        hz = _mlp2(store, f"{prefix}.z", z, "relu")
        h = dn.concat([h, dn.take_rows(hz, np.repeat(np.arange(B), N))], axis=1)
    y = _mlp2(store, f"{prefix}.proj", h)
    return dn.segment_sum(y, np.repeat(np.arange(B), N), B) * (1.0 / N)
