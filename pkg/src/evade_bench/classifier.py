"""One-vs-all kernel SVMs on top of a feature map, with a reject option.

Discriminants are ``f_k(x) - t_k`` where ``f_k`` is the k-th binary SVM
evaluated on ``z = feature_map(x)`` and ``t_k`` is a per-class rejection
offset (zero until :meth:`OneVsAllSVM.calibrate_thresholds` is called).
Prediction is the argmax (ties to the lowest index); with ``reject=True``
a sample whose best discriminant is not strictly positive gets
:data:`REJECT`.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._smo import ConvergenceError, solve_dual
from .featmap import (AffineMap, ComposedMap, FeatureMap, IdentityMap, params_from_bytes,
                      params_to_bytes)
from .validation import check_fraction, check_vector

__all__ = [
    "REJECT",
    "KernelSpec",
    "BinaryMachine",
    "OneVsAllSVM",
    "ConvergenceError",
    "kernel_matrix",
    "cv_select",
    "save_model",
    "load_model",
    "DEFAULT_C_GRID",
    "DEFAULT_GAMMA_GRID",
]

REJECT = -1

DEFAULT_C_GRID = tuple(10.0 ** p for p in range(-3, 4))
DEFAULT_GAMMA_GRID = tuple(10.0 ** p for p in range(-6, -1))


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float | None = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if self.kind == "rbf" and not (self.gamma is not None and self.gamma > 0):
            raise ValueError("rbf kernel needs gamma > 0")


def kernel_matrix(A, B, kernel: KernelSpec):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if kernel.kind == "linear":
        return A @ B.T
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-kernel.gamma * sq)


@dataclass(frozen=True)
class BinaryMachine:
    """One class-vs-rest discriminant ``f(z) = sum_i beta_i k(z, z_i) + b``."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    kernel: KernelSpec
    threshold: float = 0.0

    def decision(self, z):
        z = np.atleast_2d(z)
        return kernel_matrix(z, self.support_vectors, self.kernel) @ self.dual_coef + self.bias


def _train_gram(K, y, num_classes, C, tol, max_iter):
    """Solve all OvA duals on one Gram matrix; returns (beta (c, n), bias (c,))."""
    n = y.size
    beta = np.zeros((num_classes, n))
    bias = np.zeros(num_classes)
    for k in range(num_classes):
        yk = np.where(y == k, 1.0, -1.0)
        alpha, b, _ = solve_dual(K, yk, C, tol=tol, max_iter=max_iter)
        beta[k] = alpha * yk
        bias[k] = b
    return beta, bias


class OneVsAllSVM(ClassifierMixin, BaseEstimator):
    """Multiclass one-vs-all SVM with optional reject option.

    Parameters
    ----------
    kernel : {"rbf", "linear"}
    C : float
        Box constraint shared by all binary machines.
    gamma : float
        RBF width, ``k(a, b) = exp(-gamma ||a - b||^2)``; ignored for linear.
    feature_map : FeatureMap or None
        Input-to-feature map; identity when None.
    reject : bool
        Apply the reject rule in :meth:`predict`.
    standardize : bool
        Append a per-feature standardization stage fitted on training features.
    tol, max_iter : SMO stopping tolerance and iteration cap per machine.
    """

    def __init__(self, kernel="rbf", C=1.0, gamma=1.0, feature_map=None, reject=False,
                 standardize=False, tol=1e-4, max_iter=1_000_000):
        self.kernel = kernel
        self.C = C
        self.gamma = gamma
        self.feature_map = feature_map
        self.reject = reject
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter

    # ------------------------------------------------------------------ fit
    def fit(self, X, y, num_classes=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if self.C <= 0:
            raise ValueError("C must be positive")
        c = int(y.max()) + 1 if num_classes is None else int(num_classes)
        missing = sorted(set(range(c)) - set(np.unique(y).tolist()))
        if missing:
            raise ValueError(f"classes absent from training data: {missing}")
        if c < 2:
            raise ValueError("need at least two classes")
        fmap = self.feature_map if self.feature_map is not None else IdentityMap(X.shape[1])
        if fmap.input_dim != X.shape[1]:
            raise ValueError(f"feature map expects d={fmap.input_dim}, data has {X.shape[1]}")
        Z = fmap.transform(X)
        if self.standardize:
            std = AffineMap.standardizer(Z)
            fmap = ComposedMap([fmap, std])
            Z = std.transform(Z)
        self.kernel_ = KernelSpec(self.kernel, self.gamma if self.kernel == "rbf" else None)
        K = kernel_matrix(Z, Z, self.kernel_)
        beta, bias = _train_gram(K, y, c, self.C, self.tol, self.max_iter)
        keep = np.any(beta != 0.0, axis=0)
        self._set_state(fmap, Z[keep], beta[:, keep], bias, np.zeros(c))
        self.n_features_in_ = X.shape[1]
        return self

    def _set_state(self, fmap, sv, dual, bias, thresholds):
        self.feature_map_ = fmap
        self.support_vectors_ = np.ascontiguousarray(sv)
        self.dual_coef_ = np.ascontiguousarray(dual)
        self.intercept_ = np.asarray(bias, dtype=np.float64)
        self.thresholds_ = np.asarray(thresholds, dtype=np.float64)
        self.classes_ = np.arange(dual.shape[0])
        if self.kernel_.kind == "linear":
            self.coef_ = self.dual_coef_ @ self.support_vectors_
        self._sv_sqnorm = (self.support_vectors_ ** 2).sum(1)

    @classmethod
    def from_parameters(cls, support_vectors, dual_coef, intercept, kernel="rbf", gamma=1.0,
                        feature_map=None, thresholds=None, reject=False):
        """Assemble a fitted classifier from explicit machine parameters.

        ``dual_coef`` is (c, n_sv) holding ``beta_i = alpha_i y_i`` per class.
        """
        sv = np.atleast_2d(np.asarray(support_vectors, dtype=np.float64))
        dual = np.atleast_2d(np.asarray(dual_coef, dtype=np.float64))
        if dual.shape[1] != sv.shape[0]:
            raise ValueError("dual_coef columns must match the number of support vectors")
        c = dual.shape[0]
        fmap = feature_map if feature_map is not None else IdentityMap(sv.shape[1])
        if fmap.output_dim != sv.shape[1]:
            raise ValueError("support vectors do not live in the feature map's output space")
        clf = cls(kernel=kernel, gamma=gamma, feature_map=feature_map, reject=reject)
        clf.kernel_ = KernelSpec(kernel, gamma if kernel == "rbf" else None)
        clf._set_state(fmap, sv, dual, np.broadcast_to(np.asarray(intercept, float), (c,)),
                       np.zeros(c) if thresholds is None else thresholds)
        clf.n_features_in_ = fmap.input_dim
        return clf

    @property
    def num_classes(self) -> int:
        return self.dual_coef_.shape[0]

    @property
    def machines_(self):
        check_is_fitted(self, "dual_coef_")
        out = []
        for k in range(self.num_classes):
            nz = self.dual_coef_[k] != 0.0
            out.append(BinaryMachine(self.support_vectors_[nz], self.dual_coef_[k, nz],
                                     float(self.intercept_[k]), self.kernel_,
                                     float(self.thresholds_[k])))
        return out

    # ------------------------------------------------------------ scoring
    def _scores_z(self, Z):
        """Uncalibrated discriminants for feature rows Z, shape (n, c)."""
        if self.kernel_.kind == "linear":
            return Z @ self.coef_.T + self.intercept_
        sq = (Z * Z).sum(1)[:, None] + self._sv_sqnorm[None, :] - 2.0 * (Z @ self.support_vectors_.T)
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-self.kernel_.gamma * sq) @ self.dual_coef_.T + self.intercept_

    def raw_decision_function(self, X):
        """Discriminants without rejection offsets."""
        check_is_fitted(self, "dual_coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self._scores_z(self.feature_map_.transform(X))

    def feature_decision_function(self, Z, calibrated=True):
        """Discriminants for rows already in feature space (bypasses the map)."""
        check_is_fitted(self, "dual_coef_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.support_vectors_.shape[1]:
            raise ValueError(f"expected {self.support_vectors_.shape[1]} features, got {Z.shape[1]}")
        S = self._scores_z(Z)
        return S - self.thresholds_ if calibrated else S

    def decision_function(self, X):
        """Thresholded discriminants ``f_k - t_k``, shape (n, c)."""
        return self.raw_decision_function(X) - self.thresholds_

    def discriminants(self, x, calibrated=True):
        """Discriminant vector for one input-space sample."""
        check_is_fitted(self, "dual_coef_")
        x = check_vector(x, self.n_features_in_)
        f = self._scores_one(self.feature_map_._forward(x))
        return f - self.thresholds_ if calibrated else f

    def predict_from_scores(self, S):
        S = np.atleast_2d(S)
        pred = np.argmax(S, axis=1)
        if self.reject:
            pred = np.where(S[np.arange(S.shape[0]), pred] > 0.0, pred, REJECT)
        return pred

    def predict(self, X):
        return self.predict_from_scores(self.decision_function(X))

    def predict_one(self, x):
        return int(self.predict_from_scores(self.discriminants(x))[0])

    # ---------------------------------------------------------- gradients
    def _kernel_vec(self, z):
        # direct differences: exact k(z, z_i) = 1 at a support vector
        diff = self.support_vectors_ - z
        return np.exp(-self.kernel_.gamma * np.einsum("ij,ij->i", diff, diff))

    def _scores_one(self, z):
        if self.kernel_.kind == "linear":
            return self.coef_ @ z + self.intercept_
        return self.dual_coef_ @ self._kernel_vec(z) + self.intercept_

    def _grad_z_coef(self, z, coef, kv=None):
        """Gradient in z of ``sum_i coef_i k(z, z_i)`` (rbf) or ``coef @ SV @ z`` (linear)."""
        if self.kernel_.kind == "linear":
            return coef @ self.support_vectors_
        if kv is None:
            kv = self._kernel_vec(z)
        w = coef * kv
        return -2.0 * self.kernel_.gamma * (z * w.sum() - w @ self.support_vectors_)

    def _grad_z(self, z, k):
        """d f_k / d z at feature vector z."""
        if self.kernel_.kind == "linear":
            return self.coef_[k].copy()
        return self._grad_z_coef(z, self.dual_coef_[k])

    def grad_discriminant(self, x, k):
        """Input-space gradient of discriminant ``k`` (chain rule through the map)."""
        check_is_fitted(self, "dual_coef_")
        x = check_vector(x, self.n_features_in_)
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class index {k} out of range")
        z = self.feature_map_._forward(x)
        return self.feature_map_._pullback(x, self._grad_z(z, k))

    # ------------------------------------------------------- calibration
    def calibrate_thresholds(self, X_val, y_val, fnr_increase):
        """Raise per-class offsets so each class's validation false-negative
        rate grows by ``fnr_increase`` (absolute) over the uncalibrated rate.

        Returns a list of per-class dicts with before/after FNR and offset.
        """
        fnr_increase = check_fraction(fnr_increase, "fnr_increase")
        X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
        S = self.raw_decision_function(X_val)
        t = np.zeros(self.num_classes)
        report = []
        for k in range(self.num_classes):
            s = np.sort(S[y_val == k, k])
            n = s.size
            if n == 0:
                raise ValueError(f"validation set has no positives of class {k}")
            base = int(np.count_nonzero(s <= 0.0))
            extra = int(round(fnr_increase * n))
            target = base + extra
            if extra > 0:
                if target > n:
                    raise ValueError(
                        f"class {k}: FNR {target / n:.3f} unreachable ({base}/{n} already negative)"
                    )
                # scores <= t_k become negatives; s[target-1] > 0 here
                t[k] = max(0.0, float(s[target - 1]))
            after = int(np.count_nonzero(s - t[k] <= 0.0))
            report.append({"class": k, "n_positive": n, "fnr_before": base / n,
                           "fnr_after": after / n, "threshold": float(t[k])})
        self.thresholds_ = t
        return report

    def with_reject(self, reject=True, thresholds=None):
        """Shallow copy sharing the fitted machines, with new reject flag / offsets."""
        out = copy.copy(self)
        out.reject = reject
        out.thresholds_ = (np.zeros(self.num_classes) if thresholds is None
                           else np.array(thresholds, dtype=np.float64))
        return out


def cv_select(X, y, feature_map=None, kernel="rbf", C_grid=DEFAULT_C_GRID,
              gamma_grid=DEFAULT_GAMMA_GRID, folds=3, seed=0, standardize=False,
              tol=1e-4, max_iter=1_000_000):
    """Exhaustive grid search by stratified k-fold accuracy.

    Returns ``(best_C, best_gamma, table)``.  ``table`` has one dict per grid
    point with per-fold accuracies; ties go to smaller C, then smaller gamma.
    For a linear kernel the gamma grid is ignored and ``best_gamma`` is None.
    """
    from .data import stratified_kfold

    X, y = check_X_y(X, y, dtype=np.float64)
    y = y.astype(np.int64)
    C_grid = sorted(float(v) for v in C_grid)
    gammas = [None] if kernel == "linear" else sorted(float(v) for v in gamma_grid)
    if not C_grid or not gammas:
        raise ValueError("grids must be non-empty")
    c = int(y.max()) + 1
    fmap = feature_map if feature_map is not None else IdentityMap(X.shape[1])
    Z = fmap.transform(X)
    splits = stratified_kfold(y, folds, seed)
    fold_Z = []
    for tr, te in splits:
        Ztr, Zte = Z[tr], Z[te]
        if standardize:
            std = AffineMap.standardizer(Ztr)
            Ztr, Zte = std.transform(Ztr), std.transform(Zte)
        fold_Z.append((Ztr, Zte))

    results = {}
    for g in gammas:
        ks = KernelSpec(kernel, g)
        grams = [(kernel_matrix(Ztr, Ztr, ks), kernel_matrix(Zte, Ztr, ks))
                 for Ztr, Zte in fold_Z]
        for C in C_grid:
            accs = []
            for (tr, te), (Ktr, Kte) in zip(splits, grams):
                beta, bias = _train_gram(Ktr, y[tr], c, C, tol, max_iter)
                pred = np.argmax(Kte @ beta.T + bias, axis=1)
                accs.append(float(np.mean(pred == y[te])))
            results[(C, g)] = accs

    table = []
    best, best_acc = None, -np.inf
    for C in C_grid:
        for g in gammas:
            accs = results[(C, g)]
            mean = float(np.mean(accs))
            row = {"C": C, "gamma": g, "mean_accuracy": mean}
            row.update({f"fold_{i}": a for i, a in enumerate(accs)})
            table.append(row)
            if mean > best_acc:
                best, best_acc = (C, g), mean
    return best[0], best[1], table


# ------------------------------------------------------------ persistence
MODEL_FORMAT = "evade-bench-model/1"


def save_model(clf: OneVsAllSVM, path):
    """Write ``path`` (JSON header) and ``path`` with a ``.bin`` suffix.

    Blob layout, float64 little-endian row-major: support vectors (n_sv x m),
    dual coefficients (c x n_sv), then feature-map parameters.
    """
    check_is_fitted(clf, "dual_coef_")
    blob_path = os.path.splitext(path)[0] + ".bin"
    sv = np.ascontiguousarray(clf.support_vectors_, dtype="<f8")
    dual = np.ascontiguousarray(clf.dual_coef_, dtype="<f8")
    fm = params_to_bytes(clf.feature_map_)
    header = {
        "format": MODEL_FORMAT,
        "c": clf.num_classes,
        "d": clf.n_features_in_,
        "m": clf.feature_map_.output_dim,
        "kernel": clf.kernel_.kind,
        "gamma": clf.kernel_.gamma,
        "C": clf.C,
        "reject": bool(clf.reject),
        "standardize": bool(clf.standardize),
        "bias": [float(v) for v in clf.intercept_],
        "threshold": [float(v) for v in clf.thresholds_],
        "feature_map": clf.feature_map_.to_config(),
        "blob": os.path.basename(blob_path),
        "manifest": {
            "n_sv": int(sv.shape[0]),
            "n_support_per_class": [int(v) for v in np.count_nonzero(dual, axis=1)],
            "sv_values": int(sv.size),
            "dual_values": int(dual.size),
            "feature_map_values": len(fm) // 8,
        },
    }
    with open(blob_path, "wb") as fh:
        fh.write(sv.tobytes())
        fh.write(dual.tobytes())
        fh.write(fm)
    with open(path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> OneVsAllSVM:
    with open(path) as fh:
        h = json.load(fh)
    if h.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a model header")
    with open(os.path.join(os.path.dirname(os.path.abspath(path)), h["blob"]), "rb") as fh:
        raw = fh.read()
    man = h["manifest"]
    n_sv, c, m = man["n_sv"], h["c"], h["m"]
    nsv_b = man["sv_values"] * 8
    ndu_b = man["dual_values"] * 8
    if len(raw) != nsv_b + ndu_b + man["feature_map_values"] * 8:
        raise ValueError(f"{path}: blob size does not match manifest")
    sv = np.frombuffer(raw[:nsv_b], dtype="<f8").reshape(n_sv, m).astype(np.float64)
    dual = np.frombuffer(raw[nsv_b:nsv_b + ndu_b], dtype="<f8").reshape(c, n_sv).astype(np.float64)
    fmap = params_from_bytes(h["feature_map"], raw[nsv_b + ndu_b:], h["d"])
    clf = OneVsAllSVM(kernel=h["kernel"], C=h["C"], gamma=h["gamma"] if h["gamma"] else 1.0,
                      reject=h["reject"], standardize=h["standardize"])
    clf.kernel_ = KernelSpec(h["kernel"], h["gamma"])
    clf.n_features_in_ = h["d"]
    clf._set_state(fmap, sv, dual, h["bias"], h["threshold"])
    return clf


