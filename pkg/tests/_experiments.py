"""Acceptance experiments.  Each ``run_*`` function performs one experiment,
writes its result CSVs into ``out`` and returns a dict of measured values."""

from __future__ import annotations

import csv
import functools
import os

import numpy as np

from _oracles import central_gradient, disk_grid, dykstra_projection, grid_omega
from evade_bench import (GENERIC, REJECT, SPECIFIC, AffineMap, AttackSpec, ComposedMap,
                         IdentityMap, OneVsAllSVM, REFERENCE_FC7_SENSITIVITY, TanhRandomMap,
                         baseline_subsets, grad_omega, make_blob_images, make_blobs, omega, project,
                         roi_from_rect, run_attack, security_eval, sensitivity, split)
from evade_bench.pnm import read_pnm, write_pnm


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ------------------------------------------------------------ criterion 1
def _grad_configs():
    d = 4
    maps = {
        "identity": lambda: IdentityMap(d),
        "affine": lambda: AffineMap(d, 6, seed=1),
        "tanh-random": lambda: TanhRandomMap(d, 6, seed=2),
        "composition": lambda: ComposedMap([AffineMap(d, 6, seed=3), TanhRandomMap(6, 5, seed=4)]),
    }
    for name, make in maps.items():
        for kernel in ("linear", "rbf"):
            yield name, kernel, make()


def run_gradients(cases_per_config=35, seed=0):
    rng = np.random.default_rng(seed)
    worst, n_disc, n_omega = 0.0, 0, 0

    def check(g, fd):
        nonlocal worst
        err = np.linalg.norm(g - fd)
        worst = max(worst, err / max(1e-4 * np.linalg.norm(fd), 1e-6) * 1e-4)
        return err <= max(1e-4 * np.linalg.norm(fd), 1e-6)

    failures = []
    for name, kernel, fmap in _grad_configs():
        ds = make_blobs(c=3, d=4, n_per_class=15, spread=1.0, seed=int(rng.integers(1000)))
        clf = OneVsAllSVM(kernel=kernel, C=1.0, gamma=0.5, feature_map=fmap).fit(ds.X, ds.y)
        done_d = done_o = 0
        while done_d < cases_per_config or done_o < cases_per_config:
            x = ds.X[rng.integers(ds.n_samples)] + rng.normal(0, 0.7, 4)
            k = int(rng.integers(3))
            if done_d < cases_per_config:
                fd = central_gradient(lambda v: clf.discriminants(v, calibrated=False)[k], x, 1e-5)
                if not check(clf.grad_discriminant(x, k), fd):
                    failures.append((name, kernel, "discriminant"))
                done_d += 1
            if done_o < cases_per_config:
                f = clf.discriminants(x, calibrated=False)
                rest = np.sort(np.delete(f, k))
                if rest[-1] - rest[-2] < 1e-3:      # omega is not smooth near a competitor switch
                    continue
                fd = central_gradient(lambda v: omega(clf, v, k)[0], x, 1e-5)
                if not check(grad_omega(clf, x, k), fd):
                    failures.append((name, kernel, "omega"))
                done_o += 1
        n_disc += done_d
        n_omega += done_o
    return {"cases": n_disc + n_omega, "failures": failures, "worst_relative": worst}


# ------------------------------------------------------------ criterion 2
def run_projection(n=200, d=10, seed=0):
    rng = np.random.default_rng(seed)
    worst_gap = worst_viol = 0.0
    idempotent = True
    active = 0
    for _ in range(n):
        lb = -rng.uniform(0.05, 0.6, d)
        ub = rng.uniform(0.05, 0.6, d)
        x0 = rng.uniform(lb, ub)
        d_max = rng.uniform(0.1, 1.0)
        x = x0 + rng.normal(0, 1.0, d)
        p = project(x, x0, d_max, lb, ub)
        viol = max(np.linalg.norm(p - x0) - d_max, np.max(lb - p), np.max(p - ub), 0.0)
        worst_viol = max(worst_viol, viol)
        idempotent &= bool(np.array_equal(project(p, x0, d_max, lb, ub), p))
        worst_gap = max(worst_gap, np.linalg.norm(p - dykstra_projection(x, x0, d_max, lb, ub)))
        on_sphere = abs(np.linalg.norm(p - x0) - d_max) < 1e-9
        on_box = np.any((p == lb) | (p == ub))
        active += bool(on_sphere and on_box)
    return {"worst_gap": worst_gap, "worst_violation": worst_viol, "idempotent": idempotent,
            "both_active": active}


# ------------------------------------------------------------ criterion 3
GAUSS_CENTERS = np.array([[0.0, 0.0], [2.0, 0.0], [-1.0, 3.5]])
GAUSS = {"gamma": 0.3, "C": 1.0, "spread": 0.4, "n_per_class": 50, "seed": 0,
        "generic_d_max": 2.5, "specific_d_max": 5.0}


def gauss_classifier():
    ds = make_blobs(c=3, d=2, n_per_class=GAUSS["n_per_class"], centers=GAUSS_CENTERS,
                    spread=GAUSS["spread"], seed=GAUSS["seed"])
    return ds, OneVsAllSVM(kernel="rbf", C=GAUSS["C"], gamma=GAUSS["gamma"]).fit(ds.X, ds.y)


def run_three_gaussians(out):
    ds, clf = gauss_classifier()
    rows, generic_ok, specific_ok, worst_gap = [], [], [], -np.inf
    for src, x0 in enumerate(GAUSS_CENTERS):
        k = int(np.argmax(clf.discriminants(x0)))
        dm = GAUSS["generic_d_max"]
        res = run_attack(clf, x0, AttackSpec(GENERIC, k, dm))
        oracle = grid_omega(clf, disk_grid(x0, dm), k).min()
        gap = (res.best_omega - oracle) / abs(oracle)
        worst_gap = max(worst_gap, gap)
        generic_ok.append(res.success and k == src and gap <= 0.05)
        rows.append([src, "error-generic", k, dm, res.best_omega, oracle, int(res.success),
                     res.predicted])
        for tgt in range(3):
            if tgt == src:
                continue
            dm = GAUSS["specific_d_max"]
            r = run_attack(clf, x0, AttackSpec(SPECIFIC, tgt, dm))
            specific_ok.append(r.success and r.predicted == tgt)
            rows.append([src, "error-specific", tgt, dm, r.best_omega, "", int(r.success),
                         r.predicted])
    _write(os.path.join(out, "three_gaussians.csv"),
           ["source", "mode", "k", "d_max", "best_omega", "grid_oracle_omega", "success",
            "predicted"], rows)
    train_acc = float(np.mean(clf.predict(ds.X) == ds.y))
    return {"generic_ok": generic_ok, "specific_ok": specific_ok, "worst_gap": worst_gap,
            "train_accuracy": train_acc}


# ------------------------------------------------------------ criterion 4
IMG = {"c": 3, "shape": (8, 8, 1), "n_per_class": 100, "spread": 12.0, "seed": 0}
IMG_GRID = [0.0, 100.0, 200.0, 400.0]


def image_map(d=64):
    # centre pixels to [-1, 1], then a seeded tanh random layer
    centre = AffineMap(weights=np.eye(d) / 127.5, bias=-np.ones(d))
    return ComposedMap([centre, TanhRandomMap(d, 32, seed=2)])


@functools.lru_cache(maxsize=1)
def image_testbed():
    ds = make_blob_images(**IMG)
    tr, va, te = split(ds, (0.4, 0.3, 0.3), seed=0)
    fmap = image_map()
    lin = OneVsAllSVM(kernel="linear", C=1.0, feature_map=fmap).fit(ds.X[tr], ds.y[tr])
    rbf = OneVsAllSVM(kernel="rbf", C=1.0, gamma=0.2, feature_map=fmap).fit(ds.X[tr], ds.y[tr])
    adv = rbf.with_reject(True)
    shifted = rbf.with_reject(True)
    shifted.calibrate_thresholds(ds.X[va], ds.y[va], 0.05)
    return ds, (tr, va, te), {"SVM": lin, "SVM-RBF": rbf, "SVM-adv": adv,
                              "SVM-adv-shifted": shifted}


def run_security_curves(out, threads=1):
    ds, (_, _, te), models = image_testbed()
    curves = {}
    for name, clf in models.items():
        cur = security_eval(clf, ds.X[te], ds.y[te], GENERIC, IMG_GRID, x_lb=0.0, x_ub=255.0,
                            seed=0, threads=threads, name=name)
        cur.to_csv(os.path.join(out, f"security_{name}.csv"))
        cur.to_long_csv(os.path.join(out, f"security_{name}_long.csv"))
        curves[name] = cur
    return curves


# ------------------------------------------------------------ criterion 5
def run_cap(out, n_probes=100, seed=0):
    ds, _, models = image_testbed()
    clf = models["SVM-adv-shifted"]
    gamma = clf.kernel_.gamma
    sv = clf.support_vectors_
    rng = np.random.default_rng(seed)
    rows = []
    rejected_all, gate_ok = True, True
    min_dist = np.inf
    for i in range(n_probes):
        u = rng.standard_normal(sv.shape[1])
        radius = rng.uniform(10.0, 50.0) / np.sqrt(gamma) + np.linalg.norm(sv - sv.mean(0), axis=1).max()
        z = sv.mean(0) + radius * u / np.linalg.norm(u)
        dist = np.linalg.norm(sv - z, axis=1).min()
        min_dist = min(min_dist, dist)
        s = clf.feature_decision_function(z[None, :])[0]
        pred = int(clf.predict_from_scores(s[None, :])[0])
        rejected_all &= pred == REJECT
        gate_ok &= pred != REJECT or bool(np.all(s <= 0))
        rows.append([i, dist, pred, s.max()])
    # the same check for an identity-map model, probing in input space
    _, gauss_clf = gauss_classifier()
    g2 = gauss_clf.with_reject(True)
    g2.calibrate_thresholds(*_gauss_validation(), 0.05)
    far = []
    for i in range(n_probes):
        ang = rng.uniform(0, 2 * np.pi)
        x = np.array([np.cos(ang), np.sin(ang)]) * (rng.uniform(10, 50) / np.sqrt(g2.kernel_.gamma) + 6.0)
        dist = np.linalg.norm(g2.support_vectors_ - x, axis=1).min()
        pred = g2.predict_one(x)
        s = g2.discriminants(x)
        rejected_all &= dist >= 10 / np.sqrt(g2.kernel_.gamma) and pred == REJECT
        gate_ok &= pred != REJECT or bool(np.all(s <= 0))
        far.append([n_probes + i, dist, pred, s.max()])
    _write(os.path.join(out, "cap_probes.csv"), ["probe", "min_sv_distance", "prediction",
                                                 "max_thresholded_discriminant"], rows + far)
    return {"all_rejected": rejected_all, "gate_ok": gate_ok,
            "min_feature_distance": min_dist, "required": 10 / np.sqrt(gamma)}


def _gauss_validation():
    ds = make_blobs(c=3, d=2, n_per_class=50, centers=GAUSS_CENTERS, spread=GAUSS["spread"], seed=101)
    return ds.X, ds.y


# ------------------------------------------------------------ criterion 6
def run_calibration(out):
    centers = np.array([[0.0, 0.0], [2.5, 0.0], [0.0, 2.5], [2.5, 2.5]])
    train = make_blobs(c=4, d=2, n_per_class=60, centers=centers, spread=0.8, seed=1)
    val = make_blobs(c=4, d=2, n_per_class=250, centers=centers, spread=0.8, seed=2)
    clf = OneVsAllSVM(kernel="rbf", C=1.0, gamma=0.5).fit(train.X, train.y).with_reject(True)
    before = clf.raw_decision_function(val.X)
    clf.calibrate_thresholds(val.X, val.y, 0.05)
    after = clf.decision_function(val.X)
    rows, deltas = [], []
    for k in range(4):
        pos = val.y == k
        fb = float(np.mean(before[pos, k] <= 0))
        fa = float(np.mean(after[pos, k] <= 0))
        deltas.append(fa - fb)
        rows.append([k, int(pos.sum()), fb, fa, float(clf.thresholds_[k])])
    _write(os.path.join(out, "calibration.csv"),
           ["class", "n_positive", "fnr_before", "fnr_after", "threshold"], rows)
    return {"n_validation": val.n_samples, "deltas": deltas}


# ------------------------------------------------------------ criterion 7
def run_sensitivity(out):
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 255, (50, 64))
    ident = sensitivity(IdentityMap(64), X, rho=10.0, seed=1)
    ds, (tr, _, _), models = image_testbed()
    nonlin = sensitivity(models["SVM-RBF"], ds.X[tr][:100], rho=10.0, seed=1)
    rows = [["identity", ident.rho, ident.random_mean, ident.random_std, ident.adversarial_mean,
             ident.adversarial_std, ident.ratio, ident.n_samples, ident.n_excluded]]
    rows.append(["tanh-random∘affine rbf", nonlin.rho, nonlin.random_mean, nonlin.random_std,
                 nonlin.adversarial_mean, nonlin.adversarial_std, nonlin.ratio,
                 nonlin.n_samples, nonlin.n_excluded])
    ref = REFERENCE_FC7_SENSITIVITY
    rows.append(["reference imagenet fc7 (not reproducible here)", ref["rho"], ref["random"][0],
                 ref["random"][1], ref["adversarial"][0], ref["adversarial"][1],
                 ref["adversarial"][0] / ref["random"][0], "", ""])
    _write(os.path.join(out, "sensitivity.csv"),
           ["configuration", "rho", "random_mean", "random_std", "adversarial_mean",
            "adversarial_std", "ratio", "n_samples", "n_excluded"], rows)
    return {"identity_ratio": ident.ratio, "nonlinear_ratio": nonlin.ratio}


# ------------------------------------------------------------ criterion 8
def run_baselines(out, threads=1):
    ds = make_blobs(c=10, d=10, n_per_class=30, centers=2.0 * np.eye(10), spread=1.0, seed=0)
    table = baseline_subsets(ds, range(2, 11), 30, 0.05, seed=0, kernel="linear", C=0.1,
                             threads=threads)
    table.to_csv(os.path.join(out, "baseline.csv"))
    table.to_long_csv(os.path.join(out, "baseline_long.csv"))
    return {"medians": [table.summary(k)["median"] for k in range(2, 11)]}


# ------------------------------------------------------------ criterion 9
def run_roi(out, n_cases=50, seed=0):
    ds, (_, _, te), models = image_testbed()
    h, w, _ = ds.shape
    rng = np.random.default_rng(seed)
    rows, worst, identical = [], 0.0, True
    names = ["SVM", "SVM-RBF"]
    for i in range(n_cases):
        rh, rw = int(rng.integers(0, h + 1)), int(rng.integers(0, w + 1))
        r0, c0 = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        mask = roi_from_rect(ds.shape, (r0, c0, rh, rw))
        clf = models[names[i % 2]]
        idx = int(te[rng.integers(te.size)])
        x0 = ds.X[idx]
        mode = GENERIC if rng.random() < 0.5 else SPECIFIC
        if mode == GENERIC:
            k = int(np.argmax(clf.discriminants(x0)))
        else:
            k = int((ds.y[idx] + rng.integers(1, ds.num_classes)) % ds.num_classes)
        dm = float(rng.uniform(20, 400))
        res = run_attack(clf, x0, AttackSpec(mode, k, dm, 0.0, 255.0, roi_mask=mask))
        src_path = os.path.join(out, f"roi_src_{i}.pnm")
        adv_path = os.path.join(out, f"roi_adv_{i}.pnm")
        write_pnm(src_path, x0.reshape(ds.shape))
        write_pnm(adv_path, res.x_adv.reshape(ds.shape))
        src, _ = read_pnm(src_path)
        adv, _ = read_pnm(adv_path)
        outside = ~mask.reshape(ds.shape)
        same = np.array_equal(src[outside], adv[outside])
        same &= np.array_equal(res.x_adv[~mask], x0[~mask])
        identical &= bool(same)
        delta = float(np.max(np.abs(res.x_adv - x0)[~mask])) if (~mask).any() else 0.0
        worst = max(worst, delta)
        rows.append([i, r0, c0, rh, rw, mode, k, dm, delta, int(same), res.distance])
        os.remove(src_path)
        os.remove(adv_path)
    _write(os.path.join(out, "roi_cases.csv"),
           ["case", "row", "col", "height", "width", "mode", "k", "d_max",
            "max_abs_change_outside", "pnm_identical_outside", "distance"], rows)
    return {"identical": identical, "worst_outside": worst}
