"""Command-line entry point: ``esvdfair {train,postprocess,baseline,evaluate,sweep}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical error.
Log verbosity comes from the ``ESVD_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .errors import ConfigError, ESVDError
from .model import MLP

log = logging.getLogger("esvdfair")


def _seed_range(text: str):
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(s) for s in text.split(",")]


def _floats(text: str):
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esvdfair", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--seeds", type=_seed_range, help="e.g. 0..9 or 0,3,5")
        sp.add_argument("--out", type=Path)
        sp.add_argument("--ks-mode", choices=("exact", "binned"))
        sp.add_argument("--bins", type=int)
        return sp

    common(sub.add_parser("train", help="train the base regressor"))
    sp = common(sub.add_parser("postprocess", help="apply ESVDFair with output-layer adjustment"))
    sp.add_argument("--model", type=Path, help="model JSON (default: <out>/seed_<s>/model.json)")
    sp.add_argument("--layer", type=int, help="1-based layer to rewrite (default L-1)")
    sp.add_argument("--ce-tilde", type=float)
    sp.add_argument("--cv-tilde", type=float)
    sp.add_argument("--mode", choices=("algorithm1", "least-squares", "fine-tune"))
    sp = common(sub.add_parser("baseline", help="quantile matching or barycenter transport"))
    sp.add_argument("--model", type=Path)
    sp.add_argument("--method", choices=("quantile", "barycenter"), required=True)
    sp = common(sub.add_parser("evaluate", help="MSE, KS and densities on the test split"))
    sp.add_argument("--model", type=Path)
    sp.add_argument("--predictions", type=Path, help="JSON list of test-split predictions")
    sp.add_argument("--method", default=None, help="label for the report")
    sp = common(sub.add_parser("sweep", help="grid over ce_tilde / cv_tilde"))
    sp.add_argument("--ce-grid", type=_floats)
    sp.add_argument("--cv-grid", type=_floats)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--mode", choices=("algorithm1", "least-squares", "fine-tune"))
    sp.add_argument("--jobs", type=int, default=1)
    return p


def resolve_config(args) -> ex.RunConfig:
    cfg = ex.RunConfig.load(args.config) if args.config else ex.RunConfig.from_dict({})
    seeds = args.seeds if args.seeds is not None else ([args.seed] if args.seed is not None else None)
    over = {
        "seeds": seeds,
        "out": str(args.out) if args.out else None,
        "evaluation.ks_mode": args.ks_mode,
        "evaluation.bins": args.bins,
        "fairness.ce_tilde": getattr(args, "ce_tilde", None),
        "fairness.cv_tilde": getattr(args, "cv_tilde", None),
        "fairness.layer": getattr(args, "layer", None),
        "fairness.mode": getattr(args, "mode", None),
    }
    return cfg.override(**over)


def _load_model(args, cfg, seed) -> MLP:
    path = args.model or ex.seed_dir(cfg, seed) / "model.json"
    if not Path(path).exists():
        raise ConfigError(f"model file {path} not found; run 'train' first")
    return MLP.from_dict(json.loads(Path(path).read_text()))


def _save_model(path, model: MLP, cfg, seed, **meta):
    ex.write_atomic(path, json.dumps(model.to_dict(seed=seed, config_hash=cfg.hash, **meta),
                                     sort_keys=True))


def cmd_train(args, cfg):
    ds = ex.load_dataset(cfg)
    for seed in cfg.seeds:
        prep = ex.prepare(cfg, seed, ds)
        model, report = ex.train_model(cfg, prep)
        d = ex.seed_dir(cfg, seed)
        _save_model(d / "model.json", model, cfg, seed)
        ex.write_atomic(d / "split.json", json.dumps(prep.split.to_dict()))
        ex.write_report(d / "train_report.json", report, cfg)
        log.info("seed %d: train MSE %.4f, test MSE %.4f", seed, report["train_mse"],
                 report["test_mse"])


def cmd_postprocess(args, cfg):
    ds = ex.load_dataset(cfg)
    for seed in cfg.seeds:
        prep = ex.prepare(cfg, seed, ds)
        model = _load_model(args, cfg, seed)
        new, report = ex.postprocess(cfg, prep, model)
        d = ex.seed_dir(cfg, seed)
        _save_model(d / "adjusted_model.json", new, cfg, seed, source=model.digest())
        ex.write_report(d / "postprocess_report.json", report, cfg)
        log.info("seed %d: d_e^2 %.4g -> %.4g, d_v^2 %.4g -> %.4g", seed,
                 report["before"]["d_e_squared"], report["after"]["d_e_squared"],
                 report["before"]["d_v_squared"], report["after"]["d_v_squared"])


def cmd_baseline(args, cfg):
    ds = ex.load_dataset(cfg)
    for seed in cfg.seeds:
        prep = ex.prepare(cfg, seed, ds)
        model = _load_model(args, cfg, seed)
        pred, report = ex.run_baseline(cfg, prep, model, args.method)
        d = ex.seed_dir(cfg, seed)
        ex.write_atomic(d / f"{args.method}_predictions.json", json.dumps(pred.tolist()))
        ex.write_report(d / f"baseline_{args.method}.json", report, cfg)
        log.info("seed %d %s: MSE %.4f KS %.4f", seed, args.method, report["mse"], report["ks"])


def cmd_evaluate(args, cfg):
    from .evaluation import evaluate

    ds = ex.load_dataset(cfg)
    ev = cfg.raw["evaluation"]
    for seed in cfg.seeds:
        prep = ex.prepare(cfg, seed, ds)
        d = ex.seed_dir(cfg, seed)
        X, y, A = prep.part("test")
        if args.predictions:
            pred = np.asarray(json.loads(Path(args.predictions).read_text()), dtype=float)
            label = args.method or Path(args.predictions).stem
        else:
            path = args.model or (d / "adjusted_model.json" if (d / "adjusted_model.json").exists()
                                  else d / "model.json")
            if not Path(path).exists():
                raise ConfigError(f"model file {path} not found")
            pred = MLP.from_dict(json.loads(Path(path).read_text())).forward(X)
            label = args.method or Path(path).stem
        rep = evaluate(pred, y, A, method=label, ks_mode=ev["ks_mode"], bins=int(ev["bins"]),
                       seed=seed)
        ex.write_report(d / f"evaluate_{label}.json", rep.to_dict(), cfg)
        ex.write_atomic(d / f"density_{label}.csv", rep.densities.to_csv())
        log.info("seed %d %s: MSE %.4f KS %.4f", seed, label, rep.mse, rep.ks)


def cmd_sweep(args, cfg):
    grid = cfg.raw["sweep"]
    ce = args.ce_grid or grid["ce_tilde"]
    cv = args.cv_grid or grid["cv_tilde"]
    rows, table = ex.run_sweep(cfg, ce, cv, jobs=args.jobs)
    ex.write_report(cfg.out / "sweep.json", {"cells": table, "rows": rows}, cfg)
    buf = io.StringIO()
    fields = ["ce_tilde", "cv_tilde", "mse_mean", "mse_std", "ks_mean", "ks_std", "n_ok",
              "n_failed"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in table:
        w.writerow({k: row[k] for k in fields})
    ex.write_atomic(cfg.out / "sweep.csv", buf.getvalue())
    for row in table:
        log.info("ce~=%g cv~=%g: MSE %s KS %s", row["ce_tilde"], row["cv_tilde"],
                 row["mse_mean"], row["ks_mean"])


COMMANDS = {"train": cmd_train, "postprocess": cmd_postprocess, "baseline": cmd_baseline,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ESVD_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ESVDError as exc:
        print(f"esvdfair: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"esvdfair: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
