"""Experiments: state prediction, property decoding, transfer, inverse dynamics,
action selection, and report aggregation."""

import csv
from dataclasses import dataclass, field
import os

import numpy as np

from . import diffnum as dn, dyn
from .train import Model, ModelConfigError, make_batch, train_model

REPORT_COLUMNS = ("experiment", "variant", "env", "T", "mean_mse", "std_mse", "n_samples", "config_hash")
DUMP_COLUMNS = ("experiment", "variant", "env", "T", "config_hash", "sample_id", "mse")
DECODE_TS = (1, 3, 5, 10)


class EvalError(ValueError):
    pass


@dataclass
class MetricReport:
    experiment: str
    variant: str
    env: str
    T: int
    per_sample: list
    config_hash: str
    sample_ids: list = field(default=None)

    def __post_init__(self):
        self.per_sample = [float(v) for v in self.per_sample]
        if self.sample_ids is None:
            self.sample_ids = list(range(len(self.per_sample)))
        self.sample_ids = [int(i) for i in self.sample_ids]

    @property
    def mean(self):
        return float(np.mean(self.per_sample))

    @property
    def std(self):
        return float(np.std(self.per_sample))

    @property
    def key(self):
        return (self.experiment, self.variant, self.env, self.T, self.config_hash)

    def row(self):
        return {"experiment": self.experiment, "variant": self.variant, "env": self.env, "T": self.T,
                "mean_mse": "%.17g" % self.mean, "std_mse": "%.17g" % self.std,
                "n_samples": len(self.per_sample), "config_hash": self.config_hash}


# ---------------------------------------------------------------------------
# state prediction
# ---------------------------------------------------------------------------


def model_predictor(model, data):
    def predict(batch):
        with dn.no_tape():
            return model.predict(batch.gb, model.condition(data, batch.samples)).data
    return predict


def per_sample_mse(predict, data, env, samples):
    """MSE of normalised displacements over each sample's interactions."""
    out = []
    for s in samples:
        batch = make_batch(data, env, data.pairs(env, [s]))
        err = predict(batch) - batch.target
        out.append(float(np.mean(err * err)))
    return out


def eval_state_prediction(model, data, env, samples, config_hash="", trained_env=None, predict=None):
    if trained_env is not None and trained_env != env:
        raise EvalError(f"checkpoint was trained on {trained_env!r}, data requested for {env!r}")
    predict = predict or model_predictor(model, data)
    return MetricReport("state", model.variant, env, model.T, per_sample_mse(predict, data, env, samples),
                        config_hash, list(samples))


def lookup_predictor(data, env):
    """Ground-truth displacement lookup (harness self-test)."""
    def predict(batch):
        return batch.target.copy()
    return predict


# ---------------------------------------------------------------------------
# property decoding
# ---------------------------------------------------------------------------


def latents(model, data, samples, T=None):
    """z rows for ``samples`` (no recording)."""
    if not model.uses_adapt:
        raise ModelConfigError(f"variant {model.variant!r} has no adaptation module")
    from .adapt import f_phi
    with dn.no_tape():
        return f_phi(model.store, data.ea_batch(samples, model.T if T is None else T)).data


def _mlp_init(store, sizes, prefix):
    for i in range(len(sizes) - 1):
        store.add_dense(f"{prefix}.{i}", sizes[i], sizes[i + 1])


def _mlp(store, x, n_layers, prefix):
    for i in range(n_layers):
        act = "relu" if i < n_layers - 1 else "identity"
        x = dn.dense(x, store[f"{prefix}.{i}.w"], store[f"{prefix}.{i}.b"], act)
    return x


def train_regressor(X, Y, X_val, Y_val, cfg, seed=0, check_every=20):
    """MLP (``decode_layers`` hidden layers of ``decode_hidden``) fit full-batch.

    The iterate with the lowest validation MSE is kept.
    """
    store = dn.ParamStore(seed)
    sizes = [X.shape[1]] + [cfg.decode_hidden] * cfg.decode_layers + [Y.shape[1]]
    _mlp_init(store, sizes, "reg")
    n = len(sizes) - 1
    opt = dn.Adam(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    best = (np.inf, store.copy())
    for it in range(cfg.decode_epochs + 1):
        if it % check_every == 0:
            with dn.no_tape():
                val = dn.mse(_mlp(store, X_val, n, "reg"), Y_val).item()
            if val < best[0]:
                best = (val, store.copy())
        if it == cfg.decode_epochs:
            break
        with dn.Tape():
            loss = dn.mse(_mlp(store, X, n, "reg"), Y)
        opt.step(dn.backward(loss, store))
    return best[1], n


def decode_params(model, data, train_idx, val_idx, test_idx, cfg, Ts=DECODE_TS, config_hash=""):
    """Per T: reports of per-sample normalised (k, b) MSE on seen and unseen samples."""
    out = {}
    for T in Ts:
        z = {name: latents(model, data, idx, T) for name, idx in
             (("train", train_idx), ("val", val_idx), ("test", test_idx))}
        reg, n = train_regressor(z["train"], data.params[train_idx], z["val"], data.params[val_idx], cfg,
                                 seed=cfg.seed)
        res = {}
        for name, idx, exp in (("train", train_idx, "decode_seen"), ("test", test_idx, "decode")):
            with dn.no_tape():
                pred = _mlp(reg, z[name], n, "reg").data
            err = np.mean((pred - data.params[idx]) ** 2, axis=1)
            res[exp] = MetricReport(exp, model.variant, "ea", T, err, config_hash, list(idx))
        out[T] = res
    return out


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def transfer_bandage2lifting(source, data, cfg, train_idx, val_idx, test_idx, config_hash="", log=None):
    """Fine-tune g_theta on lifting with f_phi and z0 frozen.

    Returns ``(model, train_result, report, frozen_ok)``.
    """
    if not source.uses_adapt:
        raise ModelConfigError(f"variant {source.variant!r} has no adaptation module to keep frozen")
    model = Model.from_store(source.store.copy(), source.metadata())
    model.store.set_trainable("adapt.", False)
    frozen = {n: model.store.data[n].copy() for n in model.store.names("adapt.")}
    result = train_model(model, data, "lifting", cfg, train_idx, val_idx, cfg.transfer_epochs, log)
    model.store = result.store
    frozen_ok = all(np.array_equal(frozen[n], model.store.data[n]) and
                    frozen[n].tobytes() == model.store.data[n].tobytes() for n in frozen)
    report = eval_state_prediction(model, data, "lifting", test_idx, config_hash)
    report.experiment = "transfer"
    return model, result, report, frozen_ok


# ---------------------------------------------------------------------------
# inverse dynamics
# ---------------------------------------------------------------------------


INVERSE_KINDS = ("edonet", "edo1", "nc", "oi", "of", "os")


def condition_table(model, data, kind=None):
    """Per-sample conditioning used by the inverse head (None for NC)."""
    kind = kind or model.variant
    if kind == "nc":
        return None
    if kind in ("oi", "of"):
        return data.params.copy()
    return latents(model, data, np.arange(data.n_samples))


def _inverse_batch(data, env, pairs):
    e = data.env[env]
    s = np.array([p[0] for p in pairs])
    a = np.array([p[1] for p in pairs])
    return s, e["before"][s], e["disp"][s, a], e["actions"][s, a]


def inverse_predict(store, Z, data, env, pairs):
    s, start, change, _ = _inverse_batch(data, env, pairs)
    z = None if Z is None else Z[s]
    return dyn.g_inverse(store, start, change, z)


def train_inverse(Z, data, env, cfg, train_idx, val_idx, epochs=None, seed=None):
    """Inverse head g'' on frozen conditioning ``Z``; best validation iterate kept."""
    epochs = cfg.inverse_epochs if epochs is None else epochs
    store = dn.ParamStore(cfg.seed if seed is None else seed)
    dyn.init_inverse(store, 0 if Z is None else Z.shape[1], cfg.hidden)
    opt = dn.Adam(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    pairs = data.pairs(env, train_idx)
    val_pairs = data.pairs(env, val_idx)
    best = (np.inf, store.copy())
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        for start in range(0, len(order), cfg.batch):
            part = [pairs[i] for i in order[start:start + cfg.batch]]
            target = _inverse_batch(data, env, part)[3]
            with dn.Tape():
                loss = dn.mse(dn.reshape(inverse_predict(store, Z, data, env, part), (-1,)), target)
            opt.step(dn.backward(loss, store))
        with dn.no_tape():
            pred = inverse_predict(store, Z, data, env, val_pairs).data.reshape(-1)
        val = float(np.mean((pred - _inverse_batch(data, env, val_pairs)[3]) ** 2))
        if val < best[0]:
            best = (val, store.copy())
    return best[1]


def eval_inverse(store, Z, data, env, samples, variant, T, config_hash="", predict=None):
    """Per-sample normalised action MSE. ``predict(pairs)`` overrides the head."""
    out = []
    for s in samples:
        pairs = data.pairs(env, [s])
        target = _inverse_batch(data, env, pairs)[3]
        if predict is None:
            with dn.no_tape():
                pred = inverse_predict(store, Z, data, env, pairs).data.reshape(-1)
        else:
            pred = predict(pairs)
        out.append(float(np.mean((pred - target) ** 2)))
    return MetricReport("inverse", variant, env, T, out, config_hash, list(samples))


# ---------------------------------------------------------------------------
# action selection
# ---------------------------------------------------------------------------


def action_prediction(predict_positions, goal, grid):
    """Candidate action whose predicted state is closest to ``goal``.

    ``predict_positions(actions)`` returns one predicted state per action.
    Errors are squared distances; exact ties go to the smallest action.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ValueError("empty action grid")
    order = np.argsort(grid, kind="stable")
    pred = np.asarray(predict_positions(grid[order]))
    err = np.sum((pred - goal[None]) ** 2, axis=tuple(range(1, pred.ndim)))
    return float(grid[order][int(np.argmin(err))])


def model_state_predictor(model, data, env, sample, cond=None):
    """``actions -> predicted raw positions`` for one sample's start state."""
    e = data.env[env]
    stats = data.stats
    before = e["before"][sample]
    before_raw = stats.invert(f"{env}.pos", before)
    if cond is None and model.cond_width:
        with dn.no_tape():
            cond = model.condition(data, [sample]).data

    def predict(actions):
        a_norm = stats.apply(f"{env}.action", np.asarray(actions)[:, None])[:, 0]
        gb = dyn.build_model_input([data.graph] * len(actions), np.repeat(before[None], len(actions), 0),
                                   a_norm, np.zeros(len(actions), dtype=np.int64))
        with dn.no_tape():
            delta = model.predict(gb, None if cond is None else dn.Tensor(cond)).data
        return before_raw[None] + stats.unscale(f"{env}.disp", delta.reshape(len(actions), -1, 3))

    return predict


def eval_action(model, data, env, samples, config_hash=""):
    """Per-sample mean |a* - a_true| over the sample's interactions (raw action units)."""
    e = data.env[env]
    grid = e["raw_actions"][0]
    out = []
    for s in samples:
        predict = model_state_predictor(model, data, env, s)
        goals = data.stats.invert(f"{env}.pos", e["after"][s])
        errs = [abs(action_prediction(predict, goals[j], grid) - e["raw_actions"][s, j]) for j in range(len(goals))]
        out.append(float(np.mean(errs)))
    return MetricReport("action", model.variant, env, model.T, out, config_hash, list(samples))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_report(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_dump(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for r in reports:
            for sid, v in zip(r.sample_ids, r.per_sample):
                w.writerow([r.experiment, r.variant, r.env, r.T, r.config_hash, sid, "%.17g" % v])


def read_dump(path):
    """Rebuild reports from a per-sample dump; raises EvalError when malformed."""
    groups = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != DUMP_COLUMNS:
            raise ValueError("bad header")
        for row in rows[1:]:
            exp, var, env, T, h, sid, v = row
            key = (exp, var, env, int(T), h)
            groups.setdefault(key, ([], []))
            groups[key][0].append(int(sid))
            groups[key][1].append(float(v))
    except (OSError, ValueError) as exc:
        raise EvalError(f"malformed report file {path}: {exc}") from exc
    return [MetricReport(k[0], k[1], k[2], k[3], vals, k[4], ids) for k, (ids, vals) in groups.items()]


def read_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def aggregate_report(reports, out_dir):
    """Write ``report.csv`` (sorted rows) and decode-vs-T curves; returns the rows."""
    if not reports:
        raise EvalError("no reports to aggregate")
    seen = set()
    for r in reports:
        if r.key in seen:
            raise EvalError(f"duplicate report {r.key}")
        seen.add(r.key)
    reports = sorted(reports, key=lambda r: (r.experiment, r.variant, r.env, r.T, r.config_hash))
    os.makedirs(out_dir, exist_ok=True)
    write_report(os.path.join(out_dir, "report.csv"), reports)
    curves = {}
    for r in reports:
        if r.experiment.startswith("decode"):
            curves.setdefault((r.experiment, r.variant), []).append((r.T, r.mean))
    for (exp, variant), pts in sorted(curves.items()):
        with open(os.path.join(out_dir, f"{exp}_{variant}.dat"), "w", encoding="utf-8") as fh:
            for x, y in sorted(pts):
                fh.write(f"{x} {y:.17g}\n")
    return [r.row() for r in reports]
