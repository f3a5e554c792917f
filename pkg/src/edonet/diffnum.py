"""Dense float64 arrays with tape-based reverse-mode differentiation.

Usage::

    store = ParamStore(seed=0)
    store.add_dense("fc", n_in=3, n_out=2)
    with Tape() as tape:
        y = dense(x, store["fc.w"], store["fc.b"], "relu")
        loss = y.sum()
    grads = backward(loss, store)

Operations record themselves on the innermost open :class:`Tape`. Without
an open tape they only compute values, which is what finite-difference
probes and inference use.
"""

import json
import struct
import zlib
from contextlib import contextmanager

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    pass


_TAPES = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of primitive ops; backward replays it once, in reverse."""

    def __init__(self):
        self.records = []
        self.leaves = {}
        self.used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss):
        if self.used:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.used = True
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                # never in place: backward rules may hand out shared or read-only views
                if t.grad is None:
                    t.grad = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
                else:
                    t.grad = t.grad + g
        # drop saved intermediates; this also breaks tensor <-> tape cycles
        self.records = []


@contextmanager
def no_tape():
    """Suspend recording (values only)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, op):
    # a sum is non-finite whenever any term is; one pass, no temporary mask
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _make(data, op, inputs, backward_fn):
    data = _finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward_fn)
        out.tape = tape
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (np.where(mask, g, 0.0),))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def sum_(x, axis=None):
    x = as_tensor(x)
    y = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _make(np.asarray(y), "sum", (x,), bw)


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    return _make(np.asarray(x.data.mean()), "mean", (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, key):
    """Basic indexing (ints and slices); no fancy indexing."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _make(np.array(x.data[key]), "getitem", (x,), bw)


def concat(xs, axis=-1):
    xs = [as_tensor(t) for t in xs]
    data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, "concat", tuple(xs), bw)


def take_rows(x, idx):
    """Gather rows ``x[idx]`` of a 2-D tensor; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        _kernels.scatter_add_rows(out, idx, np.ascontiguousarray(g))
        return (out,)

    return _make(x.data[idx], "take_rows", (x,), bw)


def segment_sum(x, seg, n_seg):
    """Row sums of a 2-D tensor grouped by ``seg``: out[k] = sum of x[e] with seg[e] == k."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n_seg, x.shape[1]))
    _kernels.scatter_add_rows(out, seg, np.ascontiguousarray(x.data))
    return _make(out, "segment_sum", (x,), lambda g: (g[seg],))


def edge_relu_sum(P, Q, R, dst, src, seg, n_seg):
    """Fused ``S[seg[e]] += relu(P[dst[e]] + Q[src[e]] + R[e])``.

    The message-passing hot path: avoids materialising the gathered
    edge activations three times over.
    """
    P, Q, R = as_tensor(P), as_tensor(Q), as_tensor(R)
    if P.shape != Q.shape or R.shape[1] != P.shape[1] or R.shape[0] != len(dst):
        raise DimensionError(f"edge_relu_sum shapes P{P.shape} Q{Q.shape} R{R.shape} edges={len(dst)}")
    S, mask = _kernels.edge_relu_sum(
        np.ascontiguousarray(P.data), np.ascontiguousarray(Q.data), np.ascontiguousarray(R.data),
        dst, src, seg, n_seg)

    def bw(g):
        return _kernels.edge_relu_sum_backward(np.ascontiguousarray(g), mask, dst, src, seg, P.shape[0])

    return _make(S, "edge_relu_sum", (P, Q, R), bw)


_ACTIVATIONS = ("relu", "tanh", "identity")


def linear(x, W):
    """``x W^T`` for a 2-D ``x`` and ``W`` of shape (n_out, n_in)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: x{x.shape} W{W.shape}")
    return _make(x.data @ W.data.T, "linear", (x, W), lambda g: (g @ W.data, g.T @ x.data))


def dense(x, W, b, activation="identity"):
    """``act(x W^T + b)``; ``x`` is ``(n_in,)`` or ``(batch, n_in)``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2:
        raise DimensionError(f"dense: weight must be 2-D, got {W.shape}")
    n_out, n_in = W.shape
    if x.data.ndim not in (1, 2) or x.shape[-1] != n_in or b.shape != (n_out,):
        raise DimensionError(f"dense: x{x.shape} W{W.shape} b{b.shape}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    x2 = x.data.reshape(-1, n_in)
    y = x2 @ W.data.T + b.data
    if activation == "relu":
        y = np.maximum(y, 0.0)
    elif activation == "tanh":
        y = np.tanh(y)

    def bw(g):
        g = g.reshape(-1, n_out)
        if activation == "relu":
            g = np.where(y > 0.0, g, 0.0)
        elif activation == "tanh":
            g = g * (1.0 - y * y)
        return (g @ W.data).reshape(x.shape), g.T @ x2, g.sum(axis=0)

    return _make(y.reshape(x.shape[:-1] + (n_out,)), f"dense_{activation}", (x, W, b), bw)


def transpose(x):
    x = as_tensor(x)
    return _make(x.data.T, "transpose", (x,), lambda g: (g.T,))


def mse(pred, target):
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _slot_seed(master_seed, name):
    return [int(master_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


class ParamStore:
    """Named float64 slots, each trainable or frozen.

    Initial values depend only on (master seed, slot name), never on the
    order in which slots are created.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.data = {}
        self.trainable = {}

    def __contains__(self, name):
        return name in self.data

    def __iter__(self):
        return iter(self.data)

    def __len__(self):
        return len(self.data)

    def add(self, name, shape, init="uniform", fan_in=None, trainable=True):
        if name in self.data:
            raise KeyError(f"duplicate slot {name!r}")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, str) and init == "zeros":
            arr = np.zeros(shape)
        elif isinstance(init, str) and init == "uniform":
            fan_in = fan_in if fan_in is not None else (shape[-1] if len(shape) > 1 else shape[0])
            bound = 1.0 / np.sqrt(fan_in)
            rng = np.random.default_rng(_slot_seed(self.seed, name))
            arr = rng.uniform(-bound, bound, size=shape)
        elif isinstance(init, str):
            raise ValueError(f"unknown init {init!r}")
        else:
            arr = np.array(init, dtype=np.float64).reshape(shape)
        self.data[name] = arr
        self.trainable[name] = trainable
        return arr

    def add_dense(self, prefix, n_in, n_out, trainable=True):
        self.add(f"{prefix}.w", (n_out, n_in), fan_in=n_in, trainable=trainable)
        self.add(f"{prefix}.b", (n_out,), fan_in=n_in, trainable=trainable)

    def __getitem__(self, name):
        """Slot as a tensor; a leaf on the active tape when trainable."""
        tape = active_tape()
        if tape is None or not self.trainable[name]:
            return Tensor(self.data[name], name=name)
        key = (id(self), name)
        leaf = tape.leaves.get(key)
        if leaf is None:
            leaf = Tensor(self.data[name], requires_grad=True, name=name)
            tape.leaves[key] = leaf
        return leaf

    def names(self, prefix=""):
        return [n for n in self.data if n.startswith(prefix)]

    def trainable_names(self):
        return [n for n, t in self.trainable.items() if t]

    def set_trainable(self, prefix, flag):
        for n in self.names(prefix):
            self.trainable[n] = flag

    def copy(self):
        other = ParamStore(self.seed)
        other.data = {k: v.copy() for k, v in self.data.items()}
        other.trainable = dict(self.trainable)
        return other

    def update_from(self, other, prefix=""):
        for n in other.names(prefix):
            if n in self.data:
                if self.data[n].shape != other.data[n].shape:
                    raise DimensionError(f"slot {n}: {self.data[n].shape} vs {other.data[n].shape}")
                self.data[n] = other.data[n].copy()


def backward(loss, store=None):
    """Run the tape that recorded ``loss`` backward.

    Returns ``{slot: gradient}`` over the store's trainable slots; slots
    the loss does not reach get zeros.
    """
    tape = _owner_tape(loss)
    tape.backward(loss)
    if store is None:
        return {leaf.name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                for leaf in tape.leaves.values()}
    grads = {}
    for name in store.trainable_names():
        leaf = tape.leaves.get((id(store), name))
        if leaf is not None and leaf.grad is not None:
            grads[name] = leaf.grad
        else:
            grads[name] = np.zeros_like(store.data[name])
    return grads


def _owner_tape(loss):
    if loss.tape is None:
        raise TapeError("loss was not produced under an open tape")
    return loss.tape


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam; decoupled weight decay is applied first."""

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-5):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, grads):
        self.t += 1
        adam_step(self.store, grads, self.lr, self.beta1, self.beta2, self.eps,
                  self.weight_decay, self.t, self.m, self.v)


def adam_step(store, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-5,
              t=1, m=None, v=None):
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    m = {} if m is None else m
    v = {} if v is None else v
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in slot {name!r}")
    for name, g in grads.items():
        if not store.trainable.get(name, False):
            continue
        p = store.data[name]
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        if weight_decay:
            p = p - lr * weight_decay * p
        store.data[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(closure, store, h=1e-5, max_coords=8, seed=0, names=None):
    """Max relative error between backward and central differences.

    ``closure()`` must build the scalar loss from ``store`` slots and be
    deterministic. Up to ``max_coords`` coordinates per slot are probed;
    the error is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    with Tape():
        loss = closure()
    grads = backward(loss, store)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in (names or store.trainable_names()):
        arr = store.data[name]
        flat = arr.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_coords:
            picks = rng.choice(flat.size, size=max_coords, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            with no_tape():
                up = closure().item()
            flat[i] = orig - h
            with no_tape():
                down = closure().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = grads[name].reshape(-1)[i]
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"EDOCKPT\x00"
VERSION = 1
_FLAG_TRAINABLE = 1
_FLAG_OPTIMIZER = 2


def save_checkpoint(path, store, step=0, metadata=None, optimizer=None):
    """Write slots, seed, step count and a JSON metadata blob.

    Layout (little-endian): magic[8] version:u32 seed:i64 step:u64
    meta_len:u32 meta[utf-8 json] n_slots:u32, then per slot
    name_len:u16 name flags:u8 ndim:u8 dims:u32*ndim data:f64*prod(dims).
    Optimizer moments are extra slots named ``adam.m/<slot>`` and
    ``adam.v/<slot>`` with the optimizer flag set.
    """
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = [(n, store.data[n], _FLAG_TRAINABLE if store.trainable[n] else 0) for n in store.data]
    if optimizer is not None:
        entries.append(("adam.t", np.array([float(optimizer.t)]), _FLAG_OPTIMIZER))
        for n in sorted(optimizer.m):
            entries.append((f"adam.m/{n}", optimizer.m[n], _FLAG_OPTIMIZER))
            entries.append((f"adam.v/{n}", optimizer.v[n], _FLAG_OPTIMIZER))
    parts = [MAGIC, struct.pack("<IqQI", VERSION, store.seed, int(step), len(meta)), meta,
             struct.pack("<I", len(entries))]
    for name, arr, flags in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", flags, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Returns ``(store, step, metadata, optimizer_state)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8
    version, seed, step, meta_len = struct.unpack_from("<IqQI", buf, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IqQI")
    metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_slots,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    store = ParamStore(seed)
    opt = {"m": {}, "v": {}, "t": 0}
    for _ in range(n_slots):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        flags, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
        if flags & _FLAG_OPTIMIZER:
            if name == "adam.t":
                opt["t"] = int(arr[0])
            else:
                kind, slot = name.split("/", 1)
                opt[kind[-1]][slot] = arr
        else:
            store.data[name] = arr
            store.trainable[name] = bool(flags & _FLAG_TRAINABLE)
    return store, step, metadata, opt
