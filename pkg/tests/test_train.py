import os

import numpy as np
import pytest

from edonet import adapt, diffnum as dn, train
from edonet.config import RunConfig

CFG = RunConfig(epochs=3, batch=16)


# ---------------------------------------------------------------- grid and splits


def test_grid_sizes():
    assert len(train.grid_params(RunConfig(grid="full"))) == 143
    assert len(train.grid_params(RunConfig(grid="desk"))) == 25


def test_split_counts_largest_remainder():
    assert train.split_counts(143).tolist() == [115, 14, 14]
    assert train.split_counts(25).tolist() == [20, 3, 2]
    assert train.split_counts(10).tolist() == [8, 1, 1]
    with pytest.raises(ValueError):
        train.split_counts(10, (0.5, 0.2, 0.2))


def test_split_disjoint_covering_deterministic():
    a = train.split(143, seed=3)
    b = train.split(143, seed=3)
    c = train.split(143, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    joined = np.concatenate(a)
    assert sorted(joined.tolist()) == list(range(143))
    assert [len(x) for x in a] == [115, 14, 14]


def test_split_too_small():
    with pytest.raises(train.DataError):
        train.split(2)


def test_stats_depend_on_train_only(records):
    base = train.fit_stats(records, [0, 1, 2])
    changed = list(records)
    r = records[4]
    changed[4] = train.SampleRecord(r.sample_id, r.params, r.rows, r.cols, r.gripper_mask,
                                    r.ea_positions + 1.0, r.ea_forces * 3.0, r.envs)
    other = train.fit_stats(changed, [0, 1, 2])
    assert base.to_dict() == other.to_dict()


# ---------------------------------------------------------------- generation and files


def test_generation_deterministic(records):
    again = train.gen_sample((0, records[0].params, CFG.sim, CFG.seed))
    for key, value in records[0].to_dict().items():
        assert np.asarray(value).tobytes() == np.asarray(again.to_dict()[key]).tobytes(), key


def test_record_layout(records):
    r = records[0]
    assert r.ea_positions.shape == (CFG.sim.ea_frames, 64, 3)
    for env in train.ENVS:
        assert r.envs[env]["after"].shape == (30, 64, 3)
        assert len(r.envs[env]["actions"]) == 30


def test_dataset_round_trip(tmp_path, records):
    man = {"format": train.DATASET_FORMAT, "n_samples": len(records)}
    m1 = train.write_dataset(tmp_path / "a", records, man)
    m2 = train.write_dataset(tmp_path / "b", records, man)
    assert (tmp_path / "a" / "samples.jsonl").read_bytes() == (tmp_path / "b" / "samples.jsonl").read_bytes()
    assert m1["data_sha256"] == m2["data_sha256"]
    back, _ = train.read_dataset(tmp_path / "a")
    for x, y in zip(records, back):
        for key, value in x.to_dict().items():
            assert np.array_equal(np.asarray(value), np.asarray(y.to_dict()[key])), key


def test_tampered_dataset_rejected(tmp_path, records):
    train.write_dataset(tmp_path, records[:2], {"format": train.DATASET_FORMAT, "n_samples": 2})
    path = tmp_path / "samples.jsonl"
    raw = path.read_bytes()
    path.write_bytes(raw.replace(b"1", b"2", 1))
    with pytest.raises(train.DataError, match="checksum"):
        train.read_dataset(tmp_path)
    with pytest.raises(train.DataError):
        train.read_dataset(tmp_path / "missing")


# ---------------------------------------------------------------- loss


def _batch(data, env="bandage", samples=(0, 1)):
    return train.make_batch(data, env, data.pairs(env, samples)[::7])


def test_perfect_prediction_gives_zero_loss(data):
    for variant in ("edonet", "os"):
        m = train.Model(variant, CFG)
        b = _batch(data)
        with dn.no_tape():
            cond = m.condition(data, b.samples)
            b.target = m.predict(b.gb, cond).data
            if variant == "os":
                b.params = dn.dense(cond, m.store["sup.w"], m.store["sup.b"]).data
            assert train.loss_batch(m, data, b).item() == 0.0


def test_loss_matches_naive_loop(data):
    m = train.Model("edonet", CFG)
    b = _batch(data)
    with dn.no_tape():
        pred = m.predict(b.gb, m.condition(data, b.samples)).data
        loss = train.loss_batch(m, data, b).item()
    acc, n = 0.0, 0
    for i in range(pred.shape[0]):
        for j in range(3):
            acc += (pred[i, j] - b.target[i, j]) ** 2
            n += 1
    assert abs(loss - acc / n) < 1e-12


def test_supervised_term(data):
    m = train.Model("os", CFG)
    b = _batch(data)
    with dn.no_tape():
        cond = m.condition(data, b.samples)
        base = dn.mse(m.predict(b.gb, cond), b.target).item()
        head = cond.data @ m.store.data["sup.w"].T + m.store.data["sup.b"]
        total = train.loss_batch(m, data, b).item()
    assert abs(total - base - CFG.os_weight * np.mean((head - b.params) ** 2)) < 1e-12


def test_nc_ignores_exploration(data):
    m = train.Model("nc", CFG)
    b = _batch(data)
    with dn.no_tape():
        before = train.loss_batch(m, data, b).item()
        saved = data.ea_pos.copy(), data.ea_force.copy()
        data.ea_pos[...] = np.random.default_rng(0).normal(size=data.ea_pos.shape)
        data.ea_force[...] = 5.0
        after = train.loss_batch(m, data, b).item()
        data.ea_pos[...], data.ea_force[...] = saved
    assert before == after


def test_edonet_depends_on_exploration(data):
    m = train.Model("edonet", CFG)
    b = _batch(data)
    with dn.no_tape():
        before = train.loss_batch(m, data, b).item()
        saved = data.ea_force.copy()
        data.ea_force[...] = 5.0
        after = train.loss_batch(m, data, b).item()
        data.ea_force[...] = saved
    assert before != after


def test_of_conditions_on_normalised_params(data):
    m = train.Model("of", CFG)
    cond = m.condition(data, [1, 3]).data
    assert np.array_equal(cond, data.params[[1, 3]])
    assert train.Model("nc", CFG).condition(data, [1]) is None


def test_edo1_is_edonet_with_one_frame(data):
    m1, m5 = train.Model("edo1", CFG), train.Model("edonet", CFG)
    assert m1.T == 1 and m5.T == CFG.T and train.Model("nc", CFG).T == 0
    assert m1.store.data.keys() == m5.store.data.keys()
    with dn.no_tape():
        z = m1.condition(data, [0, 2]).data
        ref = adapt.f_phi(m1.store, data.ea_batch([0, 2], 1)).data
    assert np.array_equal(z, ref)


def test_unknown_variant():
    with pytest.raises(train.ModelConfigError, match="unknown variant"):
        train.Model("gnn", CFG)


# ---------------------------------------------------------------- training loop


@pytest.mark.parametrize("variant", train.VARIANTS)
def test_training_reduces_loss(data, tmp_path, variant):
    m = train.Model(variant, CFG)
    res = train.train_model(m, data, "lifting", CFG, [0, 1, 2], [3], epochs=3)
    assert len(res.history) == 3
    assert res.history[-1][1] < res.history[0][1]
    assert res.best_val == min(h[2] for h in res.history)
    path = tmp_path / "history.csv"
    train.write_history(path, res.history)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4


def test_non_finite_aborts_with_location(data):
    m = train.Model("nc", CFG)
    m.store.data["dyn.dec2.b"][...] = np.nan
    with pytest.raises(dn.TrainingAborted, match="epoch 1, batch 0"):
        train.train_model(m, data, "bandage", CFG, [0, 1], [2], epochs=1)


def test_checkpoint_round_trip(data, tmp_path):
    m = train.Model("edonet", CFG)
    path = os.path.join(tmp_path, "m.ckpt")
    train.save_model(path, m, data.stats, "bandage", {"best_epoch": 2})
    back, stats, meta = train.load_model(path)
    assert meta["env"] == "bandage" and meta["best_epoch"] == 2 and back.T == m.T
    b = _batch(data)
    with dn.no_tape():
        assert train.loss_batch(m, data, b).item() == train.loss_batch(back, data, b).item()
    assert stats.to_dict() == data.stats.to_dict()
