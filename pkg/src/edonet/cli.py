"""Command-line entry point: gen, train, eval, report.

Exit codes: 0 success, 2 usage or argument error, 3 data or compatibility
error, 4 numerical failure.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import glob
import sys

import numpy as np

from . import clothsim, diffnum as dn
from .config import ConfigError, GRIDS, load_config
from .evalsuite import (EvalError, aggregate_report, condition_table, decode_params, eval_action,
                        eval_inverse, eval_state_prediction, read_dump, train_inverse,
                        transfer_bandage2lifting, write_dump, write_report)
from .graphrep import ZeroVarianceError
from .train import (ENVS, VARIANTS, DataError, Model, ModelConfigError, Prepared, fit_stats, gen_dataset,
                    load_model, read_dataset, save_model, split, train_model, write_dataset, write_history)

EXPERIMENTS = ("state", "decode", "transfer", "inverse", "action")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _config(args):
    try:
        return load_config(args.config)
    except OSError as exc:
        raise CliError(2, f"cannot read config: {exc}") from exc
    except ConfigError as exc:
        raise CliError(2, str(exc)) from exc


def _load_data(path, cfg):
    try:
        records, manifest = read_dataset(path)
    except DataError as exc:
        raise CliError(3, str(exc)) from exc
    if manifest["gen_hash"] != cfg.gen_hash():
        raise CliError(3, f"dataset {path} was generated with different simulator/grid settings "
                          f"(manifest {manifest['gen_hash'][:12]}, config {cfg.gen_hash()[:12]})")
    return records, manifest


def cmd_gen(args):
    cfg = _config(args)
    updates = {}
    if args.grid is not None:
        updates["grid"] = args.grid
    if args.seed is not None:
        updates["seed"] = args.seed
    cfg = cfg.with_updates(**updates)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise CliError(2, f"output directory {args.out} is not empty (use --force)")
    records, manifest = gen_dataset(cfg, jobs=args.jobs or cfg.jobs)
    manifest = write_dataset(args.out, records, manifest)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    print(f"wrote {manifest['n_samples']} samples to {args.out} config_hash={cfg.hash()}")


def _prepared(records, cfg):
    tr, va, te = split(len(records), seed=cfg.split_seed)
    return Prepared(records, fit_stats(records, tr)), (tr, va, te)


def cmd_train(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.with_updates(epochs=args.epochs)
    records, manifest = _load_data(args.data, cfg)
    data, (tr, va, te) = _prepared(records, cfg)
    model = Model(args.variant, cfg)
    result = train_model(model, data, args.env, cfg, tr, va)
    model.store = result.store
    os.makedirs(args.out, exist_ok=True)
    extra = {"config_hash": cfg.hash(), "gen_hash": cfg.gen_hash(), "data_sha256": manifest["data_sha256"],
             "split": {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()},
             "best_epoch": result.best_epoch, "best_val": result.best_val, "epochs": cfg.epochs}
    save_model(os.path.join(args.out, "model.ckpt"), model, data.stats, args.env, extra, result.best_epoch)
    write_history(os.path.join(args.out, "history.csv"), result.history)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    print(f"variant={args.variant} env={args.env} best_val_loss={result.best_val:.6g} "
          f"best_epoch={result.best_epoch} config_hash={cfg.hash()}")


def _load_checkpoint(path, manifest):
    if not os.path.isfile(path):
        raise CliError(2, f"checkpoint {path} not found")
    try:
        model, stats, meta = load_model(path)
    except (dn.CheckpointError, KeyError, ValueError) as exc:
        raise CliError(3, f"cannot load checkpoint {path}: {exc}") from exc
    if meta.get("gen_hash") != manifest["gen_hash"]:
        raise CliError(3, f"checkpoint {path} was trained on a different dataset")
    return model, stats, meta


def cmd_eval(args):
    cfg = _config(args)
    for path in args.checkpoint:
        if not os.path.isfile(path):
            raise CliError(2, f"checkpoint {path} not found")
    records, manifest = _load_data(args.data, cfg)
    loaded = [_load_checkpoint(p, manifest) for p in args.checkpoint]
    reports = []
    for (model, stats, meta), path in zip(loaded, args.checkpoint):
        data = Prepared(records, stats)
        tr, va, te = (np.array(meta["split"][k]) for k in ("train", "val", "test"))
        h = meta["config_hash"]
        env = args.env or meta["env"]
        try:
            if args.experiment == "state":
                reports.append(eval_state_prediction(model, data, env, te, h, trained_env=meta["env"]))
            elif args.experiment == "decode":
                for T, res in decode_params(model, data, tr, va, te, cfg, config_hash=h).items():
                    reports.extend([res["decode"], res["decode_seen"]])
            elif args.experiment == "transfer":
                if meta["env"] != "bandage":
                    raise CliError(3, f"transfer needs a bandage checkpoint, {path} is {meta['env']}")
                tuned, result, report, frozen_ok = transfer_bandage2lifting(model, data, cfg, tr, va, te, h)
                if not frozen_ok:
                    raise CliError(4, "adaptation weights changed during fine-tuning")
                os.makedirs(args.out, exist_ok=True)
                skip = set(tuned.metadata()) | {"env", "stats"}
                extra = {k: v for k, v in meta.items() if k not in skip}
                extra.update(best_epoch=result.best_epoch, best_val=result.best_val, source_env="bandage")
                save_model(os.path.join(args.out, f"transfer_{model.variant}.ckpt"), tuned, stats, "lifting",
                           extra, result.best_epoch)
                reports.append(report)
            elif args.experiment == "inverse":
                Z = condition_table(model, data)
                head = train_inverse(Z, data, "bandage", cfg, tr, va)
                reports.append(eval_inverse(head, Z, data, "bandage", te, model.variant, model.T, h))
            elif args.experiment == "action":
                reports.append(eval_action(model, data, env, te, h))
        except ModelConfigError as exc:
            raise CliError(3, f"{path}: {exc}") from exc
        except EvalError as exc:
            raise CliError(3, f"{path}: {exc}") from exc
    os.makedirs(args.out, exist_ok=True)
    write_report(os.path.join(args.out, f"{args.experiment}.csv"), reports)
    write_dump(os.path.join(args.out, f"{args.experiment}.samples.csv"), reports)
    for r in reports:
        print(f"{r.experiment} {r.variant} {r.env} T={r.T} mean={r.mean:.6g} std={r.std:.6g} n={len(r.per_sample)}")


def cmd_report(args):
    paths = sorted(glob.glob(os.path.join(args.inp, "*.samples.csv")))
    if not paths:
        raise CliError(2, f"no report files (*.samples.csv) in {args.inp}")
    reports = []
    for p in paths:
        try:
            reports.extend(read_dump(p))
        except EvalError as exc:
            raise CliError(3, str(exc)) from exc
    try:
        rows = aggregate_report(reports, args.out)
    except EvalError as exc:
        raise CliError(3, str(exc)) from exc
    print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'report.csv')}")


def build_parser():
    p = argparse.ArgumentParser(prog="edonet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset over the parameter grid")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--grid", choices=GRIDS)
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", required=True, choices=VARIANTS)
    t.add_argument("--env", default="bandage", choices=ENVS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an experiment on trained checkpoints")
    e.add_argument("--config")
    e.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    e.add_argument("--checkpoint", required=True, action="append")
    e.add_argument("--data", required=True)
    e.add_argument("--env", choices=ENVS)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate per-sample report files")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", None) is None and "EDONET_JOBS" in os.environ:
        args.jobs = int(os.environ["EDONET_JOBS"])
    try:
        args.func(args)
    except CliError as exc:
        print(f"edonet: error: {exc}", file=sys.stderr)
        if exc.code == 2:
            parser.print_usage(sys.stderr)
        return exc.code
    except (DataError, ZeroVarianceError) as exc:
        print(f"edonet: data error: {exc}", file=sys.stderr)
        return 3
    except (dn.TrainingAborted, dn.NonFiniteError, clothsim.SimulationDiverged,
            clothsim.NotConverged) as exc:
        print(f"edonet: numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
