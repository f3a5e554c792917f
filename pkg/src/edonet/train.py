"""Dataset generation, splits, the self-supervised loss and the training loop."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import hashlib
import json
import os

import numpy as np

from . import adapt, clothsim, diffnum as dn, dyn
from .clothsim import Observation, PhysicalParams, subsample_indices
from .graphrep import GraphState, fit_norm_stats, grid_edges, NormStats

ENVS = ("bandage", "lifting")
VARIANTS = ("edonet", "nc", "edo1", "os", "of", "oi")
DATASET_FORMAT = "edonet-dataset/1"
RECORD_FIELDS = {
    "sample_id": "index of the sample in grid order (stiffness outer, bending inner)",
    "params": "[stiffness, bending]",
    "rows": "graph rows", "cols": "graph columns",
    "gripper_mask": "per node 0/1, gripped rows",
    "ea_positions": "EA frames x nodes x 3 node positions (m)",
    "ea_forces": "EA frames x 3 smoothed gripper force (N)",
    "<env>.before": "nodes x 3 settled positions before the action (m)",
    "<env>.actions": "action values, one per interaction",
    "<env>.after": "interactions x nodes x 3 settled positions after the action (m)",
}


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    sample_id: int
    params: PhysicalParams
    rows: int
    cols: int
    gripper_mask: np.ndarray
    ea_positions: np.ndarray
    ea_forces: np.ndarray
    envs: dict  # env -> {"before": N x 3, "actions": A, "after": A x N x 3}

    def graph(self, positions):
        return GraphState(positions, grid_edges(self.rows, self.cols), self.gripper_mask, self.rows, self.cols)

    def ea_observations(self, T):
        idx = subsample_indices(len(self.ea_positions), T)
        return [Observation(self.graph(self.ea_positions[i]), self.ea_forces[i], int(i) + 1) for i in idx]

    def interactions(self, env):
        """``(G_before, action, delta)`` triples."""
        e = self.envs[env]
        g = self.graph(e["before"])
        return [(g, float(a), after - e["before"]) for a, after in zip(e["actions"], e["after"])]

    def to_dict(self):
        d = {"sample_id": self.sample_id, "params": self.params.as_array(), "rows": self.rows,
             "cols": self.cols, "gripper_mask": self.gripper_mask.astype(np.int64),
             "ea_positions": self.ea_positions, "ea_forces": self.ea_forces}
        for env in sorted(self.envs):
            for key in ("before", "actions", "after"):
                d[f"{env}.{key}"] = self.envs[env][key]
        return d

    @classmethod
    def from_dict(cls, d):
        envs = {}
        for key, value in d.items():
            if "." in key:
                env, part = key.split(".", 1)
                envs.setdefault(env, {})[part] = np.asarray(value, dtype=np.float64)
        return cls(int(d["sample_id"]), PhysicalParams(*map(float, d["params"])), int(d["rows"]),
                   int(d["cols"]), np.asarray(d["gripper_mask"], dtype=bool),
                   np.asarray(d["ea_positions"], dtype=np.float64),
                   np.asarray(d["ea_forces"], dtype=np.float64), envs)


def grid_params(cfg):
    ks, bs = cfg.grid_values()
    return [PhysicalParams(float(k), float(b)) for k in ks for b in bs]


def gen_sample(args):
    sample_id, params, sim, seed = args
    try:
        graphs, forces = clothsim.ea_frames(params, sim, seed)
        envs = {}
        before = clothsim.bandage_initial(params, sim)
        after = [clothsim.run_bandage(params, a, sim, before)[1].positions for a in sim.action_grid("bandage")]
        envs["bandage"] = {"before": clothsim.downsample_cloth(before).positions,
                           "actions": sim.action_grid("bandage"), "after": np.array(after)}
        before = clothsim.lifting_initial(params, sim)
        after = [clothsim.run_lifting(params, a, sim, before)[1].positions for a in sim.action_grid("lifting")]
        envs["lifting"] = {"before": clothsim.downsample_cloth(before).positions,
                           "actions": sim.action_grid("lifting"), "after": np.array(after)}
    except (clothsim.SimulationDiverged, clothsim.NotConverged) as exc:
        raise DataError(f"generation failed at cell k={params.stiffness:g}, b={params.bending:g}: {exc}") from exc
    g0 = graphs[0]
    return SampleRecord(sample_id, params, g0.rows, g0.cols, g0.gripper_mask,
                        np.array([g.positions for g in graphs]), forces, envs)


def gen_dataset(cfg, jobs=1):
    """All grid cells; returns ``(records, manifest)``."""
    tasks = [(i, p, cfg.sim, cfg.seed) for i, p in enumerate(grid_params(cfg))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            records = list(ex.map(gen_sample, tasks))
    else:
        records = [gen_sample(t) for t in tasks]
    manifest = {"format": DATASET_FORMAT, "grid": cfg.grid, "seed": cfg.seed,
                "n_samples": len(records), "interactions_per_env": cfg.sim.n_actions,
                "ea_frames": cfg.sim.ea_frames, "envs": list(ENVS),
                "config_hash": cfg.hash(), "gen_hash": cfg.gen_hash(), "fields": RECORD_FIELDS}
    return records, manifest


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def _num(x):
    return "%.17g" % x


def _array_text(a):
    if a.ndim == 0:
        return _num(a) if a.dtype.kind == "f" else str(int(a))
    if a.ndim == 1:
        fmt = _num if a.dtype.kind == "f" else (lambda v: str(int(v)))
        return "[" + ",".join(fmt(v) for v in a) + "]"
    return "[" + ",".join(_array_text(r) for r in a) + "]"


def _to_json(obj):
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return _array_text(obj)
    if isinstance(obj, float):
        return _num(obj)
    return json.dumps(obj)


def write_dataset(out_dir, records, manifest):
    os.makedirs(out_dir, exist_ok=True)
    lines = "".join(_to_json(r.to_dict()) + "\n" for r in records).encode("utf-8")
    with open(os.path.join(out_dir, "samples.jsonl"), "wb") as fh:
        fh.write(lines)
    manifest = dict(manifest, data_sha256=hashlib.sha256(lines).hexdigest())
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_dataset(data_dir):
    try:
        with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(data_dir, "samples.jsonl"), "rb") as fh:
            raw = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset in {data_dir}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{data_dir}: unknown dataset format {manifest.get('format')!r}")
    if hashlib.sha256(raw).hexdigest() != manifest.get("data_sha256"):
        raise DataError(f"{data_dir}: samples.jsonl does not match the manifest checksum")
    records = [SampleRecord.from_dict(json.loads(line)) for line in raw.decode("utf-8").splitlines() if line]
    if len(records) != manifest["n_samples"]:
        raise DataError(f"{data_dir}: manifest lists {manifest['n_samples']} samples, found {len(records)}")
    return records, manifest


# ---------------------------------------------------------------------------
# splits and normalisation
# ---------------------------------------------------------------------------


def split_counts(n, fractions=(0.8, 0.1, 0.1)):
    """Largest-remainder rounding of ``n * fractions``; ties go to the earlier split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if abs(fr.sum() - 1.0) > 1e-9 or np.any(fr < 0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    quota = n * fr
    counts = np.floor(quota + 1e-9).astype(int)
    rem = quota - counts
    for i in sorted(range(len(fr)), key=lambda i: (-round(rem[i], 9), i))[:n - counts.sum()]:
        counts[i] += 1
    return counts


def split(n_samples, fractions=(0.8, 0.1, 0.1), seed=0):
    """Disjoint, covering train/val/test sample index arrays."""
    counts = split_counts(n_samples, fractions)
    if np.any(counts == 0):
        raise DataError(f"{n_samples} samples cannot fill every split (counts {counts.tolist()})")
    perm = np.random.default_rng(seed).permutation(n_samples)
    a, b = counts[0], counts[0] + counts[1]
    return np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])


def fit_stats(records, train_idx):
    """Normalisation stats from the training samples only."""
    tr = [records[i] for i in train_idx]
    feats = {"ea_pos": np.concatenate([r.ea_positions.reshape(-1, 3) for r in tr]),
             "ea_force": np.concatenate([r.ea_forces for r in tr]),
             "params": np.array([r.params.as_array() for r in tr])}
    for env in ENVS:
        if env not in tr[0].envs:
            continue
        feats[f"{env}.pos"] = np.concatenate(
            [np.concatenate([r.envs[env]["before"], r.envs[env]["after"].reshape(-1, 3)]) for r in tr])
        feats[f"{env}.disp"] = np.concatenate(
            [(r.envs[env]["after"] - r.envs[env]["before"]).reshape(-1, 3) for r in tr])
        feats[f"{env}.action"] = np.concatenate([r.envs[env]["actions"] for r in tr])[:, None]
    return fit_norm_stats(feats)


class Prepared:
    """Normalised arrays for every sample, ready for batching."""

    def __init__(self, records, stats):
        self.stats = stats
        self.n_samples = len(records)
        r0 = records[0]
        self.graph = r0.graph(r0.envs[ENVS[0]]["before"] if r0.envs else r0.ea_positions[0])
        self.ea_pos = stats.apply("ea_pos", np.array([r.ea_positions for r in records]))
        self.ea_force = stats.apply("ea_force", np.array([r.ea_forces for r in records]))
        self.params = stats.apply("params", np.array([r.params.as_array() for r in records]))
        self.raw_params = np.array([r.params.as_array() for r in records])
        self.env = {}
        for env in r0.envs:
            before = np.array([r.envs[env]["before"] for r in records])
            after = np.array([r.envs[env]["after"] for r in records])
            actions = np.array([r.envs[env]["actions"] for r in records])
            self.env[env] = {
                "before": stats.apply(f"{env}.pos", before),
                "after": stats.apply(f"{env}.pos", after),
                "actions": stats.apply(f"{env}.action", actions[..., None])[..., 0],
                "disp": stats.scale(f"{env}.disp", after - before[:, None]),
                "raw_actions": actions,
            }

    @property
    def n_frames(self):
        return self.ea_pos.shape[1]

    def pairs(self, env, samples):
        n_act = self.env[env]["actions"].shape[1]
        return [(int(s), j) for s in samples for j in range(n_act)]

    def ea_batch(self, samples, T):
        idx = subsample_indices(self.n_frames, T) if T > 0 else np.zeros(0, dtype=np.int64)
        samples = np.asarray(samples)
        return adapt.EABatch(self.ea_pos[samples][:, idx], self.ea_force[samples][:, idx], True)


# ---------------------------------------------------------------------------
# model variants
# ---------------------------------------------------------------------------


class ModelConfigError(ValueError):
    pass


class Model:
    """One trainable variant: optional adaptation path plus the dynamics net."""

    def __init__(self, variant, cfg, seed=None):
        if variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        self.variant = variant
        # observations consumed per sample; 0 for variants without adaptation
        self.T = (1 if variant == "edo1" else cfg.T) if self.uses_adapt else 0
        self.latent = cfg.latent
        self.hidden = cfg.hidden
        self.steps = cfg.steps
        self.union = cfg.union_sum
        self.os_weight = cfg.os_weight
        self.store = dn.ParamStore(cfg.seed if seed is None else seed)
        if self.uses_adapt:
            adapt.init_adapt(self.store, hidden=cfg.hidden, latent=cfg.latent)
        dyn.init_dyn(self.store, self.cond_width, cfg.hidden, self.union)
        if variant == "os":
            self.store.add_dense("sup", cfg.latent, 2)

    @property
    def uses_adapt(self):
        return self.variant in ("edonet", "edo1", "os")

    @property
    def cond_width(self):
        if self.uses_adapt:
            return self.latent
        return 2 if self.variant in ("of", "oi") else 0

    def condition(self, data, samples):
        """Conditioning rows (one per sample) or None."""
        if self.uses_adapt:
            return adapt.f_phi(self.store, data.ea_batch(samples, self.T))
        if self.cond_width:
            return dn.Tensor(data.params[np.asarray(samples)])
        return None

    def predict(self, gb, cond):
        return dyn.g_theta(self.store, gb, cond, self.steps, self.union)

    def metadata(self):
        return {"variant": self.variant, "T": self.T, "latent": self.latent, "hidden": self.hidden,
                "steps": self.steps, "union_sum": self.union, "os_weight": self.os_weight}

    @classmethod
    def from_store(cls, store, meta):
        m = cls.__new__(cls)
        m.variant, m.T, m.latent = meta["variant"], meta["T"], meta["latent"]
        m.hidden, m.steps, m.union = meta["hidden"], meta["steps"], meta["union_sum"]
        m.os_weight = meta["os_weight"]
        m.store = store
        return m


@dataclass
class Batch:
    gb: object
    target: np.ndarray
    samples: np.ndarray
    params: np.ndarray


def make_batch(data, env, pairs):
    """Stack interactions ``(sample, action index)`` into one graph batch."""
    e = data.env[env]
    s_idx = np.array([p[0] for p in pairs])
    a_idx = np.array([p[1] for p in pairs])
    samples, owner = np.unique(s_idx, return_inverse=True)
    gb = dyn.build_model_input([data.graph] * len(pairs), e["before"][s_idx],
                               e["actions"][s_idx, a_idx], owner)
    target = e["disp"][s_idx, a_idx].reshape(-1, 3)
    return Batch(gb, target, samples, data.params[samples])


def loss_batch(model, data, batch):
    """Mean squared normalised-displacement error (+ supervised term for OS)."""
    cond = model.condition(data, batch.samples)
    loss = dn.mse(model.predict(batch.gb, cond), batch.target)
    if model.variant == "os":
        head = dn.dense(cond, model.store["sup.w"], model.store["sup.b"])
        loss = loss + model.os_weight * dn.mse(head, batch.params)
    return loss


def eval_loss(model, data, env, samples, chunk=64):
    """Loss over all interactions of ``samples``, without recording."""
    pairs = data.pairs(env, samples)
    total, count = 0.0, 0
    with dn.no_tape():
        for i in range(0, len(pairs), chunk):
            part = pairs[i:i + chunk]
            total += loss_batch(model, data, make_batch(data, env, part)).item() * len(part)
            count += len(part)
    return total / count


@dataclass
class TrainResult:
    store: dn.ParamStore
    history: list
    best_epoch: int
    best_val: float


def train_model(model, data, env, cfg, train_idx, val_idx, epochs=None, log=None):
    """Adam over shuffled interaction batches; keeps the best-validation weights."""
    epochs = cfg.epochs if epochs is None else epochs
    opt = dn.Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    pairs = data.pairs(env, train_idx)
    history = []
    best = (np.inf, 0, model.store.copy())
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), cfg.batch)):
            part = [pairs[i] for i in order[start:start + cfg.batch]]
            batch = make_batch(data, env, part)
            try:
                with dn.Tape():
                    loss = loss_batch(model, data, batch)
                grads = dn.backward(loss, model.store)
                opt.step(grads)
            except (dn.NonFiniteError, dn.TrainingAborted) as exc:
                raise dn.TrainingAborted(f"epoch {epoch}, batch {bi}: {exc}") from exc
            total += loss.item() * len(part)
        train_loss = total / len(pairs)
        val_loss = eval_loss(model, data, env, val_idx)
        history.append((epoch, train_loss, val_loss))
        if val_loss < best[0]:
            best = (val_loss, epoch, model.store.copy())
        if log is not None:
            log(epoch, train_loss, val_loss)
    return TrainResult(best[2], history, best[1], best[0])


def write_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch},{_num(tr)},{_num(va)}\n")


def save_model(path, model, stats, env, extra=None, step=0):
    meta = dict(model.metadata(), env=env, stats=stats.to_dict(), **(extra or {}))
    dn.save_checkpoint(path, model.store, step, meta)


def load_model(path):
    store, step, meta, _ = dn.load_checkpoint(path)
    return Model.from_store(store, meta), NormStats.from_dict(meta["stats"]), meta
