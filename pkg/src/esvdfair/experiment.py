"""Run configuration and the per-seed experimental protocol."""
from __future__ import annotations

import copy
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import (barycenter_transport_fit, fit_attribute_predictor,
                        fit_quantile_matcher)
from .dataset import (GroupedDataset, load_csv, make_gaussian_groups, split, standardize)
from .errors import ConfigError
from .esvd import FairnessConfig, esvdfair_with_adjustment
from .evaluation import evaluate
from .model import DEFAULT_HIDDEN, MLP, TrainConfig, config_hash, mse_loss, train
from .transforms import moment_diagnostics

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "dataset": {"synthetic": {"n": 4000, "dim": 8, "seed": 0}},
    "model": {"hidden": list(DEFAULT_HIDDEN)},
    "train": {"epochs": 20, "lr": 1e-3, "decay": 0.8, "batch_size": 256},
    "fairness": {"ce_tilde": 15.0, "cv_tilde": 150.0, "eps_e": 1e-5, "layer": None,
                 "mode": "fine-tune", "fine_tune_epochs": 50, "fine_tune_lr": 1e-3},
    "baselines": {"bins": 36, "attribute_predictor": "logistic", "quantile_mode": "mixture",
                  "attribute_epochs": 20},
    "evaluation": {"ks_mode": "exact", "bins": 36},
    "sweep": {"ce_tilde": [1.5, 2, 5, 15, 50], "cv_tilde": [150]},
    "seeds": [0],
    "out": "runs/default",
    "runtime_warn_threshold": 1e14,
}

_KNOWN = {k: set(v) if isinstance(v, dict) else None for k, v in DEFAULT_CONFIG.items()}
_KNOWN["dataset"] = {"synthetic", "path", "schema", "preset"}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(_merge(DEFAULT_CONFIG, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **keys) -> "RunConfig":
        """Apply dotted-key overrides, e.g. ``fairness.ce_tilde=5``."""
        raw = copy.deepcopy(self.raw)
        for dotted, value in keys.items():
            if value is None:
                continue
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return RunConfig.from_dict(raw)

    def validate(self) -> None:
        for k, v in self.raw.items():
            if k not in _KNOWN:
                raise ConfigError(f"unknown config key {k!r}")
            if _KNOWN[k] is not None and isinstance(v, dict):
                extra = set(v) - _KNOWN[k]
                if extra:
                    raise ConfigError(f"unknown keys under {k!r}: {sorted(extra)}")
        ds = self.raw["dataset"]
        if not ({"synthetic", "path", "preset"} & set(ds)):
            raise ConfigError("dataset needs 'synthetic', 'preset' or 'path'")
        if "path" in ds and "schema" not in ds and "preset" not in ds:
            raise ConfigError("dataset.path needs a schema")
        self.train_config(0).validate()
        fc = self.fairness_config()
        fc.validate()
        hidden = self.raw["model"]["hidden"]
        if not hidden or any(int(h) < 1 for h in hidden):
            raise ConfigError("model.hidden must list positive widths")
        layer = self.raw["fairness"]["layer"]
        if layer is not None and not 1 <= int(layer) <= len(hidden):
            raise ConfigError(f"fairness.layer must be in 1..{len(hidden)}; layer "
                              f"{len(hidden) + 1} is the output layer and cannot be rewritten")
        fc.validate(len(hidden) + 1)
        if not self.raw["seeds"]:
            raise ConfigError("seeds must be non-empty")
        b = self.raw["baselines"]
        if int(b["bins"]) < 2 or int(self.raw["evaluation"]["bins"]) < 2:
            raise ConfigError("bin counts must be >= 2")
        if b["attribute_predictor"] not in ("logistic", "mlp-sigmoid"):
            raise ConfigError("baselines.attribute_predictor must be logistic or mlp-sigmoid")
        if b["quantile_mode"] not in ("mixture", "as-printed"):
            raise ConfigError("baselines.quantile_mode must be mixture or as-printed")
        if self.raw["evaluation"]["ks_mode"] not in ("exact", "binned"):
            raise ConfigError("evaluation.ks_mode must be exact or binned")

    @property
    def hash(self) -> str:
        return config_hash({k: v for k, v in self.raw.items() if k != "out"})

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def seeds(self) -> list:
        return [int(s) for s in self.raw["seeds"]]

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.raw["train"])

    def fairness_config(self) -> FairnessConfig:
        f = dict(self.raw["fairness"])
        layer = f.pop("layer")
        # config layers are 1-based like W^[l]; None means the second-last layer
        f["layer"] = -2 if layer is None else int(layer) - 1
        return FairnessConfig(**f)


# --- atomic output -----------------------------------------------------------

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_report(path, report: dict, cfg: RunConfig) -> None:
    """JSON with the config hash embedded; the timestamp lives in ``run_metadata``."""
    body = dict(report)
    body["config_hash"] = cfg.hash
    body["run_metadata"] = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    write_atomic(path, json.dumps(body, indent=1, sort_keys=True))


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out / f"seed_{seed}"


# --- protocol steps ----------------------------------------------------------

def load_dataset(cfg: RunConfig) -> GroupedDataset:
    from .dataset import LAW_SCHOOL_SCHEMA

    ds = cfg.raw["dataset"]
    if "synthetic" in ds:
        return make_gaussian_groups(**ds["synthetic"])
    schema = ds.get("schema")
    if schema is None and ds.get("preset") == "law_school":
        schema = LAW_SCHOOL_SCHEMA
    if schema is None:
        raise ConfigError(f"unknown dataset preset {ds.get('preset')!r}")
    return load_csv(ds["path"], schema)


@dataclass
class Prepared:
    ds: GroupedDataset
    split: object
    seed: int

    def part(self, name):
        idx = getattr(self.split, name)
        return self.ds.X[idx], self.ds.y[idx], self.ds.A[idx]


def prepare(cfg: RunConfig, seed: int, ds: Optional[GroupedDataset] = None) -> Prepared:
    ds = load_dataset(cfg) if ds is None else ds
    sp = split(ds, seed)
    return Prepared(standardize(ds, sp.train), sp, seed)


def check_runtime_budget(cfg: RunConfig, n_rows: int, width: int) -> bool:
    cost = float(n_rows) ** 2 * float(width) ** 2
    if cost > cfg.raw["runtime_warn_threshold"]:
        log.warning("post-processing cost estimate N^2 n^2 = %.3g exceeds %.3g",
                    cost, cfg.raw["runtime_warn_threshold"])
        return True
    return False


def train_model(cfg: RunConfig, prep: Prepared):
    X, y, _ = prep.part("train")
    model = MLP.init(X.shape[1], cfg.raw["model"]["hidden"], 1, seed=prep.seed)
    model, trace = train(model, X, y, cfg.train_config(prep.seed))
    report = {"seed": prep.seed, "loss_trace": trace}
    for name in ("train", "val", "test"):
        Xs, ys, _ = prep.part(name)
        report[f"{name}_mse"] = mse_loss(model, Xs, ys)
    return model, report


def postprocess(cfg: RunConfig, prep: Prepared, model: MLP):
    X, y, A = prep.part("train")
    fc = cfg.fairness_config()
    check_runtime_budget(cfg, X.shape[0], max(W.shape[1] for W in model.layers))
    new, report = esvdfair_with_adjustment(model, X, y, A, fc, seed=prep.seed)
    idx = report["layer"]
    L1 = model.layer_input(X[A == 1], idx)
    L2 = model.layer_input(X[A == 2], idx)
    report["diagnostics_before"] = moment_diagnostics(L1, L2, model.layers[idx], fc.eps_e)
    report["diagnostics_after"] = moment_diagnostics(L1, L2, new.layers[idx], fc.eps_e)
    report["seed"] = prep.seed
    return new, report


def run_baseline(cfg: RunConfig, prep: Prepared, model: MLP, method: str):
    b = cfg.raw["baselines"]
    ev = cfg.raw["evaluation"]
    Xtr, _, Atr = prep.part("train")
    Xte, yte, Ate = prep.part("test")
    clf = fit_attribute_predictor(Xtr, Atr, b["attribute_predictor"], seed=prep.seed,
                                  hidden=cfg.raw["model"]["hidden"], epochs=b["attribute_epochs"])
    a_hat = clf.predict(Xte)
    f_tr = model.forward(Xtr)
    f_te = model.forward(Xte)
    if method == "quantile":
        fitted = fit_quantile_matcher(f_tr, Atr, b["quantile_mode"])
    elif method == "barycenter":
        fitted = barycenter_transport_fit(f_tr, Atr, int(b["bins"]))
    else:
        raise ConfigError(f"unknown baseline {method!r}")
    pred = fitted.predict(f_te, a_hat)
    rep = evaluate(pred, yte, Ate, method=method, ks_mode=ev["ks_mode"], bins=int(ev["bins"]),
                   seed=prep.seed)
    out = rep.to_dict()
    out["attribute_accuracy"] = float(np.mean(a_hat == Ate))
    return pred, out


def evaluate_model(cfg: RunConfig, prep: Prepared, model: MLP, method: str, part: str = "test"):
    ev = cfg.raw["evaluation"]
    X, y, A = prep.part(part)
    return evaluate(model.forward(X), y, A, method=method, ks_mode=ev["ks_mode"],
                    bins=int(ev["bins"]), seed=prep.seed)


def run_seed(cfg: RunConfig, seed: int, ds: Optional[GroupedDataset] = None,
             baselines: bool = True) -> dict:
    """Every method on one split; returns test MSE/KS per method."""
    prep = prepare(cfg, seed, ds)
    model, _ = train_model(cfg, prep)
    results = {"none": evaluate_model(cfg, prep, model, "none").to_dict()}
    adjusted, _ = postprocess(cfg, prep, model)
    results["esvdfair"] = evaluate_model(cfg, prep, adjusted, "esvdfair").to_dict()
    if baselines:
        for method in ("quantile", "barycenter"):
            _, results[method] = run_baseline(cfg, prep, model, method)
    return {m: {"mse": r["mse"], "ks": r["ks"]} for m, r in results.items()}


# --- sweeps ------------------------------------------------------------------

def _cell_worker(args):
    raw, seed, model_dict, ce, cv = args
    try:
        cfg = RunConfig.from_dict(raw).override(**{"fairness.ce_tilde": ce,
                                                   "fairness.cv_tilde": cv})
        prep = prepare(cfg, seed)
        model = MLP.from_dict(model_dict)
        adjusted, _ = postprocess(cfg, prep, model)
        rep = evaluate_model(cfg, prep, adjusted, "esvdfair")
        return {"ce_tilde": ce, "cv_tilde": cv, "seed": seed, "mse": rep.mse, "ks": rep.ks,
                "error": None}
    except Exception as exc:  # per-cell failures are recorded, not fatal
        return {"ce_tilde": ce, "cv_tilde": cv, "seed": seed, "mse": None, "ks": None,
                "error": f"{type(exc).__name__}: {exc}"}


def aggregate(rows: list) -> list:
    cells = {}
    for r in rows:
        cells.setdefault((r["ce_tilde"], r["cv_tilde"]), []).append(r)
    table = []
    for (ce, cv), rs in cells.items():
        ok = [r for r in rs if r["error"] is None]
        entry = {"ce_tilde": ce, "cv_tilde": cv, "n_ok": len(ok), "n_failed": len(rs) - len(ok)}
        for metric in ("mse", "ks"):
            vals = np.array([r[metric] for r in ok], dtype=float)
            entry[f"{metric}_mean"] = float(vals.mean()) if vals.size else None
            entry[f"{metric}_std"] = float(vals.std()) if vals.size else None
        table.append(entry)
    return table


def run_sweep(cfg: RunConfig, ce_grid, cv_grid, jobs: int = 1, models: Optional[dict] = None):
    """Post-process one trained model per seed for every grid cell."""
    if not ce_grid or not cv_grid:
        raise ConfigError("sweep grid must be non-empty")
    models = dict(models or {})
    tasks = []
    for seed in cfg.seeds:
        if seed not in models:
            prep = prepare(cfg, seed)
            models[seed], _ = train_model(cfg, prep)
        md = models[seed].to_dict()
        for ce in ce_grid:
            for cv in cv_grid:
                tasks.append((cfg.raw, seed, md, float(ce), float(cv)))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_worker, tasks))
    else:
        rows = [_cell_worker(t) for t in tasks]
    return rows, aggregate(rows)


