"""Adaptation module: EA observations -> latent z.

Per node, [position, sensed force] goes through a one-hidden-layer
encoder; attention pools the nodes of each frame; a tanh Elman RNN,
started from the learned z0, folds the frames into z.
"""

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn

LATENT = 32
HIDDEN = 32


class NormalizationError(RuntimeError):
    pass


@dataclass
class EABatch:
    """EA observations of S samples, T frames each, as arrays.

    positions: S x T x N x 3, forces: S x T x 3. ``normalized`` must be
    true before the batch reaches the network.
    """

    positions: np.ndarray
    forces: np.ndarray
    normalized: bool = False

    @property
    def shape(self):
        return self.positions.shape[:3]

    @classmethod
    def from_observations(cls, samples, stats=None):
        """``samples`` is a list (one per sample) of Observation lists."""
        pos = np.array([[o.graph.positions for o in obs] for obs in samples], dtype=np.float64)
        force = np.array([[o.force for o in obs] for obs in samples], dtype=np.float64)
        if pos.size == 0:
            pos = pos.reshape(len(samples), 0, 0, 3)
            force = force.reshape(len(samples), 0, 3)
        if stats is None:
            return cls(pos, force, False)
        return cls(stats.apply("ea_pos", pos), stats.apply("ea_force", force), True)


def init_adapt(store, n_in=6, hidden=HIDDEN, latent=LATENT, prefix="adapt"):
    store.add_dense(f"{prefix}.enc1", n_in, hidden)
    store.add_dense(f"{prefix}.enc2", hidden, hidden)
    store.add(f"{prefix}.att.w", (1, hidden), fan_in=hidden)
    store.add(f"{prefix}.rnn.wx", (latent, hidden), fan_in=hidden)
    store.add(f"{prefix}.rnn.wz", (latent, latent), fan_in=latent)
    store.add(f"{prefix}.rnn.b", (latent,), fan_in=latent)
    store.add(f"{prefix}.z0", (latent,), init="zeros")
    return store


def encode_observation(store, batch, prefix="adapt"):
    """Per-node embeddings, shape (S*T*N) x hidden, rows ordered (sample, frame, node)."""
    if not batch.normalized:
        raise NormalizationError("EA observations must be normalised with the training stats first")
    S, T, N = batch.shape
    force = np.broadcast_to(batch.forces[:, :, None, :], (S, T, N, 3))
    x = np.concatenate([batch.positions, force], axis=-1).reshape(S * T * N, 6)
    h = dn.dense(x, store[f"{prefix}.enc1.w"], store[f"{prefix}.enc1.b"], "relu")
    return dn.dense(h, store[f"{prefix}.enc2.w"], store[f"{prefix}.enc2.b"])


def attend_aggregate(store, o, n_nodes, prefix="adapt"):
    """Attention pooling over consecutive groups of ``n_nodes`` rows of ``o``."""
    o = dn.as_tensor(o)
    n_groups = o.shape[0] // n_nodes
    s = dn.linear(o, store[f"{prefix}.att.w"])
    alpha = dn.reshape(dn.softmax(dn.reshape(s, (n_groups, n_nodes)), axis=1), (n_groups * n_nodes, 1))
    seg = np.repeat(np.arange(n_groups), n_nodes)
    return dn.segment_sum(dn.mul(alpha, o), seg, n_groups)


def rnn_adapt(store, zhat, n_samples, T, prefix="adapt"):
    """Fold ``zhat`` rows (ordered sample, frame) into one z per sample."""
    z0 = dn.reshape(store[f"{prefix}.z0"], (1, -1))
    z = dn.add(np.zeros((n_samples, z0.shape[1])), z0)
    wx, wz, b = store[f"{prefix}.rnn.wx"], store[f"{prefix}.rnn.wz"], store[f"{prefix}.rnn.b"]
    for t in range(T):
        x_t = dn.take_rows(zhat, np.arange(n_samples) * T + t)
        z = dn.tanh(dn.dense(x_t, wx, b) + dn.linear(z, wz))
    return z


def f_phi(store, batch, prefix="adapt"):
    """Latent z (S x p) for every sample in ``batch``."""
    S, T, N = batch.shape
    if T == 0:
        return rnn_adapt(store, None, S, 0, prefix)
    o = encode_observation(store, batch, prefix)
    zhat = attend_aggregate(store, o, N, prefix)
    return rnn_adapt(store, zhat, S, T, prefix)
