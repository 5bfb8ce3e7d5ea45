"""Experiment harnesses: security curves, class-subset baselines and
feature-space sensitivity.

All harnesses are deterministic for a given seed; per-sample work can be
spread over threads and is reduced in sample order, so results do not depend
on the thread count.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import GENERIC, SPECIFIC, AttackSpec, grad_omega, run_attack
from .classifier import REJECT, OneVsAllSVM
from .data import Dataset, split
from .featmap import FeatureMap
from .seeding import child_seed

__all__ = [
    "SecurityCurve",
    "security_eval",
    "BaselineTable",
    "baseline_subsets",
    "SensitivityReport",
    "sensitivity",
    "REFERENCE_FC7_SENSITIVITY",
    "classifier_id",
]

# Reference outcome for ImageNet fc7 features at input l2 norm 10 (mean, std).
# Requires the pre-trained network; not reproducible with the bundled maps.
REFERENCE_FC7_SENSITIVITY = {"rho": 10.0, "random": (0.022, 0.002), "adversarial": (2.386, 0.386)}

METRICS = ("accuracy", "rejection_rate", "error_rate", "attack_success_rate", "security")


def _fmt(v):
    return repr(float(v))


def _pmap(fn, items, threads):
    if threads is None or threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def classifier_id(clf: OneVsAllSVM) -> str:
    if clf.kernel_.kind == "linear":
        base = "SVM"
    else:
        base = "SVM-RBF"
    if clf.reject:
        base = "SVM-adv" if base == "SVM-RBF" else base + "-reject"
        if np.any(clf.thresholds_ > 0):
            base += "-shifted"
    return base


# ------------------------------------------------------------ security eval
@dataclass
class SecurityCurve:
    d_max: np.ndarray
    mean: dict
    std: dict
    mode: str
    classifier: str
    repetitions: int
    n_samples: int
    outcomes: np.ndarray = field(repr=False, default=None)   # (reps, grid, n) codes
    metadata: dict = field(default_factory=dict)

    def rows(self):
        for j, dm in enumerate(self.d_max):
            row = {"d_max": float(dm)}
            for m in METRICS:
                row[f"{m}_mean"] = float(self.mean[m][j])
                row[f"{m}_std"] = float(self.std[m][j])
            yield row

    def to_csv(self, path):
        cols = ["d_max"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["classifier", "mode"] + cols)
            for row in self.rows():
                w.writerow([self.classifier, self.mode] + [_fmt(row[c]) for c in cols])

    def to_long_csv(self, path):
        """Plot-ready long format: one row per (d_max, metric)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["classifier", "mode", "d_max", "metric", "mean", "std"])
            for j, dm in enumerate(self.d_max):
                for m in METRICS:
                    w.writerow([self.classifier, self.mode, _fmt(dm), m,
                                _fmt(self.mean[m][j]), _fmt(self.std[m][j])])


# outcome codes
CORRECT, REJECTED, WRONG, HIT = 0, 1, 2, 3   # HIT: error-specific target reached


def security_eval(clf: OneVsAllSVM, X, y, mode=GENERIC, d_max_grid=(0.0,), repetitions=1,
                  seed=0, x_lb=-np.inf, x_ub=np.inf, roi_mask=None, eta=None, epsilon=1e-6,
                  max_iters=5000, threads=1, name=None) -> SecurityCurve:
    """Accuracy / rejection / attack-success against increasing ``d_max``.

    Attacks at each budget warm-start from the previous budget's result.
    A sample counts as correct if the classifier (with its own reject
    setting) predicts its true label; rejections are tallied separately and
    never count as a successful attack.  Error-specific repetitions draw one
    target per sample uniformly among the other classes.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    grid = np.asarray(d_max_grid, dtype=np.float64)
    if grid.size == 0 or grid[0] != 0.0:
        raise ValueError("d_max grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("d_max grid must be strictly increasing")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if mode not in (GENERIC, SPECIFIC):
        raise ValueError(f"unknown mode {mode!r}")
    c = clf.num_classes
    n = X.shape[0]
    reps = repetitions if mode == SPECIFIC else 1

    targets = np.zeros((reps, n), dtype=np.int64)
    for r in range(reps):
        rng = np.random.default_rng(child_seed(seed, "security-targets", r))
        draws = rng.integers(0, c - 1, size=n)
        targets[r] = np.where(draws >= y, draws + 1, draws)

    def chain(task):
        r, i = task
        x0 = X[i]
        clean = int(np.argmax(clf.discriminants(x0)))
        k = y[i] if mode == GENERIC else targets[r, i]
        preds = np.empty(grid.size, dtype=np.int64)
        iters = 0
        x_prev = None
        for j, dm in enumerate(grid):
            if dm == 0.0 or (mode == GENERIC and clean != y[i]):
                x_adv = x0
            else:
                spec = AttackSpec(mode, int(k), float(dm), x_lb, x_ub, roi_mask, eta,
                                  epsilon, max_iters)
                res = run_attack(clf, x0, spec, x_init=x_prev)
                x_adv = res.x_adv
                iters += res.iterations
            x_prev = x_adv
            preds[j] = clf.predict_one(x_adv)
        return preds, iters

    tasks = [(r, i) for r in range(reps) for i in range(n)]
    out = _pmap(chain, tasks, threads)
    preds = np.array([p for p, _ in out]).reshape(reps, n, grid.size).transpose(0, 2, 1)
    total_iters = int(sum(it for _, it in out))

    codes = np.full(preds.shape, WRONG, dtype=np.int8)
    codes[preds == y[None, None, :]] = CORRECT
    codes[preds == REJECT] = REJECTED
    if mode == SPECIFIC:
        codes[(preds == targets[:, None, :]) & (preds != REJECT)] = HIT

    per_rep = {
        "accuracy": (codes == CORRECT).mean(axis=2),
        "rejection_rate": (codes == REJECTED).mean(axis=2),
        "error_rate": ((codes == WRONG) | (codes == HIT)).mean(axis=2),
        "attack_success_rate": ((codes == HIT) if mode == SPECIFIC else (codes == WRONG)).mean(axis=2),
    }
    # samples not successfully attacked: rejections count here, unlike in accuracy
    per_rep["security"] = 1.0 - per_rep["attack_success_rate"]
    mean = {m: v.mean(axis=0) for m, v in per_rep.items()}
    std = {m: v.std(axis=0) for m, v in per_rep.items()}
    return SecurityCurve(
        d_max=grid, mean=mean, std=std, mode=mode,
        classifier=name or classifier_id(clf), repetitions=reps, n_samples=n,
        outcomes=codes,
        metadata={"warm_start": True, "total_attack_iterations": total_iters,
                  "eta": "d_max/100" if eta is None else eta, "epsilon": epsilon,
                  "max_iters": max_iters, "reject_counts_as_correct": False},
    )


# -------------------------------------------------------------- baselines
@dataclass
class BaselineTable:
    class_counts: list
    observations: dict          # count -> np.ndarray of accuracies
    confidence: float

    def summary(self, count):
        obs = np.sort(self.observations[count])
        q1, med, q3 = np.quantile(obs, [0.25, 0.5, 0.75])
        iqr = q3 - q1
        lo = obs[obs >= q1 - 1.5 * iqr].min()
        hi = obs[obs <= q3 + 1.5 * iqr].max()
        return {
            "class_count": int(count), "n_subsets": int(obs.size),
            "mean": float(obs.mean()), "std": float(obs.std()),
            "q1": float(q1), "median": float(med), "q3": float(q3),
            "whisker_low": float(lo), "whisker_high": float(hi),
            "min_accuracy": float(np.quantile(obs, self.confidence, method="inverted_cdf")),
        }

    def to_csv(self, path):
        rows = [self.summary(k) for k in self.class_counts]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([v if isinstance(v, int) else _fmt(v) for v in r.values()])

    def to_long_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_count", "subset", "accuracy"])
            for k in self.class_counts:
                for s, a in enumerate(self.observations[k]):
                    w.writerow([k, s, _fmt(a)])


def baseline_subsets(ds: Dataset, class_counts, subsets_per_count=30, confidence=0.05, seed=0,
                     kernel="linear", C=1.0, gamma=1.0, feature_map=None,
                     test_fraction=1.0 / 3.0, threads=1) -> BaselineTable:
    """Accuracy distribution over random class subsets of each size.

    For each subset the selected classes are relabelled densely, split
    stratified into train/test, and a fresh classifier is trained and scored.
    ``min_accuracy`` is the empirical quantile of the observations at level
    ``confidence`` (the sample minimum when it is 0).
    """
    counts = [int(k) for k in class_counts]
    if subsets_per_count < 1:
        raise ValueError("subsets_per_count must be >= 1")
    for k in counts:
        if k < 2:
            raise ValueError("class counts must be >= 2")
        if k > ds.num_classes:
            raise ValueError(f"class count {k} exceeds {ds.num_classes} classes")
    if not 0.0 <= confidence <= 1.0:
        raise ValueError("confidence must lie in [0, 1]")

    def one(task):
        k, s = task
        rng = np.random.default_rng(child_seed(seed, f"baseline-{k}", s))
        chosen = np.sort(rng.choice(ds.num_classes, size=k, replace=False))
        idx = np.flatnonzero(np.isin(ds.y, chosen))
        y = np.searchsorted(chosen, ds.y[idx])
        tr, _, te = split(y, (1.0 - test_fraction, 0.0, test_fraction),
                          seed=child_seed(seed, f"baseline-split-{k}", s))
        clf = OneVsAllSVM(kernel=kernel, C=C, gamma=gamma, feature_map=feature_map)
        clf.fit(ds.X[idx[tr]], y[tr], num_classes=k)
        return float(np.mean(clf.predict(ds.X[idx[te]]) == y[te]))

    obs = {}
    for k in counts:
        obs[k] = np.array(_pmap(one, [(k, s) for s in range(subsets_per_count)], threads))
    return BaselineTable(counts, obs, float(confidence))


# ------------------------------------------------------------ sensitivity
@dataclass
class SensitivityReport:
    rho: float
    random_mean: float
    random_std: float
    adversarial_mean: float
    adversarial_std: float
    n_samples: int
    n_excluded: int
    direction: str

    @property
    def ratio(self) -> float:
        return self.adversarial_mean / self.random_mean

    def to_dict(self):
        return {"rho": self.rho, "random_mean": self.random_mean, "random_std": self.random_std,
                "adversarial_mean": self.adversarial_mean,
                "adversarial_std": self.adversarial_std, "ratio": self.ratio,
                "n_samples": self.n_samples, "n_excluded": self.n_excluded,
                "direction": self.direction}

    def to_csv(self, path):
        d = self.to_dict()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(d))
            w.writerow([v if isinstance(v, (int, str)) else _fmt(v) for v in d.values()])


def _top_singular_direction(fmap, x, rng, n_iter=100):
    v = rng.standard_normal(x.size)
    v /= np.linalg.norm(v)
    for _ in range(n_iter):
        u = fmap._pullback(x, fmap._jvp(x, v))
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return None
        v = u / nu
    return v


def sensitivity(model, X, rho=10.0, seed=0) -> SensitivityReport:
    """Feature-space l2 shift caused by input perturbations of norm ``rho``.

    Random directions are Gaussian draws rescaled to the sphere.  With a
    classifier the adversarial direction is the normalized descent direction
    of the error-generic objective for the predicted class; with a bare
    feature map it is the leading right singular vector of the map's Jacobian
    (power iteration).  Box constraints are ignored.  Samples with a zero
    adversarial direction are excluded from both statistics.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    X = np.asarray(X, dtype=np.float64)
    if isinstance(model, FeatureMap):
        fmap, clf = model, None
    else:
        fmap, clf = model.feature_map_, model
    rng = np.random.default_rng(seed)
    rand, adv = [], []
    excluded = 0
    for x in X:
        u = rng.standard_normal(x.size)
        u *= rho / np.linalg.norm(u)
        if clf is not None:
            k = int(np.argmax(clf.discriminants(x, calibrated=False)))
            g = -grad_omega(clf, x, k)
            ng = np.linalg.norm(g)
            direction = g / ng if ng > 0 else None
        else:
            direction = _top_singular_direction(fmap, x, rng)
        if direction is None:
            excluded += 1
            continue
        z = fmap._forward(x)
        rand.append(np.linalg.norm(fmap._forward(x + u) - z))
        adv.append(np.linalg.norm(fmap._forward(x + rho * direction) - z))
    if not rand:
        raise ValueError("every sample had a zero adversarial direction")
    rand, adv = np.array(rand), np.array(adv)
    return SensitivityReport(float(rho), float(rand.mean()), float(rand.std()),
                             float(adv.mean()), float(adv.std()), len(rand), excluded,
                             "attack-gradient" if clf is not None else "jacobian-top-singular")
