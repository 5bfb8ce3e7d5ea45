"""``evade-bench`` command-line front end.

Every run writes ``config.json`` (the fully resolved configuration) and
``run.json`` (seeds, library versions, config hash) into ``--out`` next to
its result files.  Failures print a JSON object ``{"error": {"kind": ...,
"message": ...}}`` and exit with status 2.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from ._smo import ConvergenceError
from .attack import GENERIC, SPECIFIC, AttackSpec, roi_from_rect, run_attack
from .classifier import OneVsAllSVM, cv_select, load_model, save_model
from .data import DatasetError, load_manifest, split
from .evaluation import (REFERENCE_FC7_SENSITIVITY, baseline_subsets, classifier_id,
                         security_eval, sensitivity)
from .featmap import IdentityMap, map_from_config
from .pnm import write_pnm
from .seeding import child_seed

log = logging.getLogger("evade_bench")

COMMANDS = ("train", "attack", "security-eval", "baseline", "sensitivity", "calibrate")

DEFAULTS = {
    "dataset": None,
    "seed": 0,
    "threads": 1,
    "split": [0.6, 0.2, 0.2],
    "feature_map": {"kind": "identity"},
    "classifier": {
        "kernel": "rbf",
        "C_grid": [1.0],
        "gamma_grid": [1.0],
        "folds": 3,
        "standardize": False,
        "reject": False,
        "tol": 1e-4,
    },
    "attack": {
        "mode": GENERIC,
        "d_max": 1.0,
        "d_max_grid": None,
        "eta": None,
        "epsilon": 1e-6,
        "max_iters": 5000,
        "target": None,
        "samples": None,
        "max_samples": 10,
        "roi": None,
        "noise_amplification": 10.0,
        "write_images": True,
    },
    "security_eval": {
        "mode": GENERIC,
        "d_max_grid": [0.0, 0.5, 1.0],
        "repetitions": 1,
        "max_samples": 100,
        "eta": None,
        "epsilon": 1e-6,
        "max_iters": 5000,
        "roi": None,
    },
    "baseline": {
        "class_counts": None,
        "subsets_per_count": 30,
        "confidence": 0.05,
        "kernel": "linear",
        "C": 1.0,
        "gamma": 1.0,
        "test_fraction": 1.0 / 3.0,
    },
    "sensitivity": {"rho": 10.0, "target": "model", "max_samples": 100},
    "calibrate": {"fnr_increase": 0.05},
}


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, kind, message, extra=None):
        super().__init__(message)
        self.kind = kind
        self.extra = extra or {}


# ------------------------------------------------------------------ config
def resolve_config(user: dict) -> dict:
    """Merge ``user`` over the defaults; unknown keys raise :class:`ConfigError`."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in user.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(DEFAULTS[key], dict) and key != "feature_map":
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            bad = set(val) - set(DEFAULTS[key])
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            cfg[key].update(val)
        else:
            cfg[key] = val
    if cfg["dataset"] is None:
        raise ConfigError("config needs a 'dataset' manifest (object or path)")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _parse_floats(text, what):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {what} {text!r}") from None


def _parse_roi(text):
    vals = _parse_floats(text, "--roi")
    if len(vals) != 4 or any(v != int(v) for v in vals):
        raise ConfigError("--roi must be four integers r,c,h,w")
    return [int(v) for v in vals]


# ------------------------------------------------------------------ context
class Run:
    def __init__(self, command, cfg, out, model_path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.model_path = model_path
        self.seed = int(cfg["seed"])
        self.seeds = {}
        os.makedirs(out, exist_ok=True)

    def child(self, name, index=0):
        s = child_seed(self.seed, name, index)
        self.seeds[f"{name}:{index}"] = s
        return s

    def dataset(self):
        man = self.cfg["dataset"]
        try:
            self.ds = load_manifest(man)
        except FileNotFoundError as exc:
            raise CliError("dataset-not-found", f"dataset not found: {exc}") from None
        except (DatasetError, TypeError, KeyError) as exc:
            raise CliError("dataset-invalid", str(exc)) from None
        fr = self.cfg["split"]
        self.train, self.val, self.test = split(self.ds, fr, seed=self.child("split"))
        return self.ds

    def feature_map(self):
        fm = self.cfg["feature_map"]
        if not isinstance(fm, dict):
            raise ConfigError("feature_map must be an object")
        if fm.get("kind") == "identity":
            return IdentityMap(self.ds.dim)
        return map_from_config(fm, self.ds.dim)

    def model(self):
        if not self.model_path:
            raise ConfigError(f"{self.command} needs --model")
        if not os.path.exists(self.model_path):
            raise CliError("model-not-found", f"model not found: {self.model_path}")
        clf = load_model(self.model_path)
        if clf.n_features_in_ != self.ds.dim or clf.num_classes != self.ds.num_classes:
            raise CliError("incompatible-model",
                           f"model has d={clf.n_features_in_}, c={clf.num_classes}; dataset has "
                           f"d={self.ds.dim}, c={self.ds.num_classes}")
        return clf

    def path(self, name):
        return os.path.join(self.out, name)

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def roi_mask(self, rect):
        if rect is None:
            return None
        if self.ds.shape is None:
            raise ConfigError("an ROI needs a dataset with an image shape")
        return roi_from_rect(self.ds.shape, rect)

    def finish(self, extra=None):
        import sklearn

        self.write_json("config.json", self.cfg)
        info = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "master_seed": self.seed,
            "child_seeds": self.seeds,
            "versions": {"evade_bench": __version__, "python": platform.python_version(),
                         "numpy": np.__version__,
                         "scikit-learn": sklearn.__version__},
        }
        if extra:
            info.update(extra)
        self.write_json("run.json", info)


def _csv_rows(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else
                        ("" if v is None else v) for v in r])


# ---------------------------------------------------------------- commands
def cmd_train(run: Run):
    ds = run.dataset()
    cc = run.cfg["classifier"]
    fmap = run.feature_map()
    X, y = ds.X[run.train], ds.y[run.train]
    C, gamma, table = cv_select(X, y, fmap, cc["kernel"], cc["C_grid"], cc["gamma_grid"],
                                folds=int(cc["folds"]), seed=run.child("cv"),
                                standardize=bool(cc["standardize"]), tol=float(cc["tol"]))
    clf = OneVsAllSVM(kernel=cc["kernel"], C=C, gamma=gamma if gamma is not None else 1.0,
                      feature_map=fmap, reject=bool(cc["reject"]),
                      standardize=bool(cc["standardize"]), tol=float(cc["tol"]))
    clf.fit(X, y, num_classes=ds.num_classes)
    model_path = run.model_path or run.path("model.json")
    save_model(clf, model_path)
    folds = int(cc["folds"])
    header = ["C", "gamma", "mean_accuracy"] + [f"fold_{i}" for i in range(folds)]
    _csv_rows(run.path("cv_table.csv"), header, [[r[h] for h in header] for r in table])
    test_acc = float(np.mean(clf.predict(ds.X[run.test]) == ds.y[run.test])) if run.test.size else None
    summary = {"model": os.path.abspath(model_path), "C": C, "gamma": gamma,
               "classifier": classifier_id(clf), "n_support": int(clf.support_vectors_.shape[0]),
               "test_accuracy": test_acc}
    run.write_json("train.json", summary)
    return summary


def _select(run, indices, section):
    sel = run.cfg[section].get("samples")
    if sel is None:
        return indices[: int(run.cfg[section]["max_samples"])]
    sel = [int(v) for v in sel]
    bad = [v for v in sel if not 0 <= v < run.ds.n_samples]
    if bad:
        raise ConfigError(f"sample indices out of range: {bad}")
    return np.array(sel, dtype=np.int64)


def cmd_attack(run: Run):
    ds = run.dataset()
    clf = run.model()
    ac = run.cfg["attack"]
    mode = ac["mode"]
    if mode not in (GENERIC, SPECIFIC):
        raise ConfigError(f"attack.mode must be {GENERIC!r} or {SPECIFIC!r}")
    grid = ac["d_max_grid"]
    grid = [float(ac["d_max"])] if grid is None else sorted(float(v) for v in grid)
    mask = run.roi_mask(ac["roi"])
    samples = _select(run, run.test, "attack")
    rng = np.random.default_rng(run.child("attack-targets"))
    amp = float(ac["noise_amplification"])
    images = bool(ac["write_images"]) and ds.shape is not None
    if images:
        os.makedirs(run.path("images"), exist_ok=True)

    results, failed = [], []
    for i in samples:
        x0, label = ds.X[i], int(ds.y[i])
        if mode == GENERIC:
            k = int(np.argmax(clf.discriminants(x0)))
        elif ac["target"] is not None:
            k = int(ac["target"])
            if k == label:
                raise ConfigError(f"sample {i}: error-specific target equals its true class {label}")
            if not 0 <= k < clf.num_classes:
                raise ConfigError(f"target {k} out of range")
        else:
            draw = int(rng.integers(0, clf.num_classes - 1))
            k = draw + 1 if draw >= label else draw
        try:
            x_prev, per_budget, minimal = None, [], None
            for dm in grid:
                spec = AttackSpec(mode, k, dm, ds.x_lb, ds.x_ub, mask, ac["eta"],
                                  float(ac["epsilon"]), int(ac["max_iters"]))
                res = run_attack(clf, x0, spec, x_init=x_prev)
                x_prev = res.x_adv
                per_budget.append({"d_max": dm, "success": res.success,
                                   "best_omega": res.best_omega, "distance": res.distance})
                if res.success and minimal is None:
                    minimal = dm
        except (ValueError, ConvergenceError) as exc:
            failed.append({"sample": int(i), "message": str(exc)})
            continue
        entry = res.to_dict()
        entry.update({"sample": int(i), "label": label, "k": k, "budgets": per_budget,
                      "minimal_successful_d_max": minimal,
                      "predicted_with_reject": int(clf.predict_one(res.x_adv))})
        results.append(entry)
        res.write_trajectory(run.path(f"trajectory_{i}.csv"))
        _csv_rows(run.path(f"x_adv_{i}.csv"), ["value"], [[float(v)] for v in res.x_adv])
        if images:
            shape = ds.shape
            write_pnm(run.path(f"images/source_{i}.pnm"), x0.reshape(shape))
            write_pnm(run.path(f"images/adv_{i}.pnm"), res.x_adv.reshape(shape))
            noise = np.clip(amp * np.abs(res.x_adv - x0), 0.0, 255.0)
            write_pnm(run.path(f"images/noise_{i}.pnm"), noise.reshape(shape))

    run.write_json("attack_results.json", {"results": results, "failed": failed,
                                           "noise_amplification": amp})
    _csv_rows(run.path("attack_summary.csv"),
              ["sample", "label", "k", "success", "predicted", "best_omega", "distance",
               "iterations", "termination", "minimal_successful_d_max"],
              [[r["sample"], r["label"], r["k"], int(r["success"]), r["predicted"],
                r["best_omega"], r["distance"], r["iterations"], r["termination"],
                r["minimal_successful_d_max"]] for r in results])
    if failed:
        raise CliError("partial-failure", f"{len(failed)} attack(s) failed",
                       {"failed_samples": [f["sample"] for f in failed]})
    return {"n_attacked": len(results),
            "n_success": int(sum(r["success"] for r in results))}


def cmd_security_eval(run: Run):
    ds = run.dataset()
    clf = run.model()
    sc = run.cfg["security_eval"]
    idx = run.test[: int(sc["max_samples"])]
    t0 = time.perf_counter()
    curve = security_eval(clf, ds.X[idx], ds.y[idx], mode=sc["mode"], d_max_grid=sc["d_max_grid"],
                          repetitions=int(sc["repetitions"]), seed=run.child("security-eval"),
                          x_lb=ds.x_lb, x_ub=ds.x_ub, roi_mask=run.roi_mask(sc["roi"]),
                          eta=sc["eta"], epsilon=float(sc["epsilon"]),
                          max_iters=int(sc["max_iters"]), threads=int(run.cfg["threads"]))
    elapsed = time.perf_counter() - t0
    curve.to_csv(run.path("security_curve.csv"))
    curve.to_long_csv(run.path("security_curve_long.csv"))
    meta = dict(curve.metadata)
    meta.update({"classifier": curve.classifier, "mode": curve.mode,
                 "repetitions": curve.repetitions, "n_samples": curve.n_samples,
                 "config_hash": config_hash(run.cfg), "seed": run.seeds["security-eval:0"]})
    run.write_json("security_curve.json", meta)
    return {"classifier": curve.classifier, "accuracy": [float(v) for v in curve.mean["accuracy"]],
            "elapsed_seconds": elapsed}


def cmd_baseline(run: Run):
    ds = run.dataset()
    bc = run.cfg["baseline"]
    counts = bc["class_counts"] or list(range(2, ds.num_classes + 1))
    table = baseline_subsets(ds, counts, int(bc["subsets_per_count"]), float(bc["confidence"]),
                             seed=run.child("baseline"), kernel=bc["kernel"], C=float(bc["C"]),
                             gamma=float(bc["gamma"]), feature_map=run.feature_map(),
                             test_fraction=float(bc["test_fraction"]),
                             threads=int(run.cfg["threads"]))
    table.to_csv(run.path("baseline.csv"))
    table.to_long_csv(run.path("baseline_long.csv"))
    summary = [table.summary(k) for k in table.class_counts]
    run.write_json("baseline.json", {"summary": summary, "config_hash": config_hash(run.cfg)})
    return {"medians": [s["median"] for s in summary]}


def cmd_sensitivity(run: Run):
    ds = run.dataset()
    sc = run.cfg["sensitivity"]
    if sc["target"] == "model":
        target = run.model()
    elif sc["target"] == "feature-map":
        target = run.feature_map()
    else:
        raise ConfigError("sensitivity.target must be 'model' or 'feature-map'")
    idx = run.train[: int(sc["max_samples"])]
    rep = sensitivity(target, ds.X[idx], rho=float(sc["rho"]), seed=run.child("sensitivity"))
    rep.to_csv(run.path("sensitivity.csv"))
    out = rep.to_dict()
    out["reference_imagenet_fc7"] = {**REFERENCE_FC7_SENSITIVITY, "reproducible_here": False}
    run.write_json("sensitivity.json", out)
    return {"ratio": rep.ratio}


def cmd_calibrate(run: Run):
    ds = run.dataset()
    clf = run.model()
    inc = float(run.cfg["calibrate"]["fnr_increase"])
    if run.val.size == 0:
        raise ConfigError("calibration needs a non-empty validation split")
    report = clf.calibrate_thresholds(ds.X[run.val], ds.y[run.val], inc)
    clf.reject = True
    save_model(clf, run.model_path)
    _csv_rows(run.path("calibration.csv"),
              ["class", "n_positive", "fnr_before", "fnr_after", "threshold"],
              [[r["class"], r["n_positive"], r["fnr_before"], r["fnr_after"], r["threshold"]]
               for r in report])
    run.write_json("calibration.json", {"fnr_increase": inc, "classes": report,
                                        "model": os.path.abspath(run.model_path)})
    return {"classes": report}


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "security-eval": cmd_security_eval,
            "baseline": cmd_baseline, "sensitivity": cmd_sensitivity, "calibrate": cmd_calibrate}


# -------------------------------------------------------------------- main
def build_parser():
    p = argparse.ArgumentParser(prog="evade-bench",
                                description="Evasion attacks and reject-option defenses "
                                            "for one-vs-all kernel SVMs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--model", help="model header path (read, or written by train/calibrate)")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, help="max worker threads (overrides config)")
    p.add_argument("--dmax-grid", help="comma-separated budgets, e.g. 0,0.5,1")
    p.add_argument("--roi", help="rectangle r,c,h,w confining the perturbation")
    return p


def _load_config(args):
    try:
        with open(args.config) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise CliError("config-not-found", f"config not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if isinstance(user, dict) and isinstance(user.get("dataset"), str):
        base = os.path.dirname(os.path.abspath(args.config))
        user["dataset"] = os.path.join(base, user["dataset"])
    cfg = resolve_config(user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg["threads"] = args.threads
    section = {"attack": "attack", "security-eval": "security_eval"}.get(args.command)
    if args.dmax_grid is not None and section:
        cfg[section]["d_max_grid"] = _parse_floats(args.dmax_grid, "--dmax-grid")
    if args.roi is not None and section:
        cfg[section]["roi"] = _parse_roi(args.roi)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EVADE_BENCH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    run = None
    try:
        cfg = _load_config(args)
        run = Run(args.command, cfg, args.out, args.model)
        log.info("running %s into %s", args.command, args.out)
        summary = HANDLERS[args.command](run)
        run.finish({"summary": summary})
        print(json.dumps({"status": "ok", "command": args.command, "summary": summary},
                         sort_keys=True, default=float))
        return 0
    except CliError as exc:
        err = {"kind": exc.kind, "message": str(exc), **exc.extra}
    except ConfigError as exc:
        err = {"kind": "config-invalid", "message": str(exc)}
    except ConvergenceError as exc:
        err = {"kind": "solver-not-converged", "message": str(exc)}
    except (ValueError, DatasetError) as exc:
        err = {"kind": "invalid-argument", "message": str(exc)}
    payload = {"error": err}
    if run is not None:
        run.write_json("error.json", payload)
        try:
            run.finish()
        except OSError:
            pass
    else:
        try:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "error.json"), "w") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
        except OSError:
            pass
    print(json.dumps(payload, sort_keys=True))
    return 2


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
