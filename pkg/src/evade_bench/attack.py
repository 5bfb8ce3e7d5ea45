"""Projected-gradient evasion attacks on :class:`OneVsAllSVM`.

The attack objective is the margin ``omega(x) = f_k(x) - max_{l != k} f_l(x)``
on the uncalibrated discriminants.  Error-generic attacks minimize it with
``k`` the source class, error-specific attacks maximize it with ``k`` the
target class.  Each step is ``x' = project(x + r * eta * grad omega(x))``
with ``r = -1`` / ``+1`` and stops once ``|omega(x') - omega(x)| <= epsilon``;
the best feasible iterate is returned.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .validation import check_bounds, check_vector

__all__ = [
    "GENERIC",
    "SPECIFIC",
    "AttackSpec",
    "AttackResult",
    "omega",
    "grad_omega",
    "project",
    "run_attack",
    "roi_from_rect",
]

GENERIC = "error-generic"
SPECIFIC = "error-specific"
_TIE = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    mode: str
    k: int
    d_max: float
    x_lb: object = -np.inf
    x_ub: object = np.inf
    roi_mask: object = None
    eta: float | None = None
    epsilon: float = 1e-6
    max_iters: int = 5000

    def __post_init__(self):
        if self.mode not in (GENERIC, SPECIFIC):
            raise ValueError(f"mode must be {GENERIC!r} or {SPECIFIC!r}, got {self.mode!r}")
        if not self.d_max >= 0:
            raise ValueError("d_max must be non-negative")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def step(self) -> float:
        return self.d_max / 100.0 if self.eta is None else float(self.eta)

    def bounds(self, x0):
        """Box bounds with components outside the ROI pinned to ``x0``."""
        lb, ub = check_bounds(self.x_lb, self.x_ub, x0.size)
        if self.roi_mask is not None:
            mask = np.asarray(self.roi_mask, dtype=bool).reshape(-1)
            if mask.size != x0.size:
                raise ValueError(f"roi mask has {mask.size} entries, expected {x0.size}")
            lb = np.where(mask, lb, x0)
            ub = np.where(mask, ub, x0)
        return lb, ub

    def replace(self, **kw) -> "AttackSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return AttackSpec(**d)

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            a = np.asarray(v)
            if a.ndim == 0:
                v = float(a) if a.dtype.kind == "f" else a.item()
                if isinstance(v, float) and not np.isfinite(v):
                    return "inf" if v > 0 else "-inf"
                return v
            return [enc(t) for t in a.tolist()]

        return {
            "mode": self.mode, "k": int(self.k), "d_max": float(self.d_max),
            "x_lb": enc(self.x_lb), "x_ub": enc(self.x_ub),
            "roi_mask": None if self.roi_mask is None else [bool(b) for b in np.ravel(self.roi_mask)],
            "eta": self.step, "epsilon": self.epsilon, "max_iters": self.max_iters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        def dec(v):
            if isinstance(v, list):
                return np.array([dec(t) for t in v], dtype=np.float64)
            if v == "inf":
                return np.inf
            if v == "-inf":
                return -np.inf
            return v

        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("x_lb", "x_ub"):
            if key in kw:
                kw[key] = dec(kw[key])
        if kw.get("roi_mask") is not None:
            kw["roi_mask"] = np.asarray(kw["roi_mask"], dtype=bool)
        return cls(**kw)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    omega_trace: np.ndarray
    distance_trace: np.ndarray
    iterations: int
    termination: str
    success: bool
    distance: float
    best_omega: float
    best_iteration: int
    predicted: int
    spec: AttackSpec = field(repr=False, default=None)

    def to_dict(self) -> dict:
        """JSON-ready scalars and termination metadata (no arrays)."""
        out = {k: v for k, v in asdict(self).items()
               if k not in ("x_adv", "omega_trace", "distance_trace", "spec")}
        out["success"] = bool(self.success)
        if self.spec is not None:
            out["spec"] = self.spec.to_dict()
            out["spec"].pop("roi_mask", None)
        return out

    def write_trajectory(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "omega", "distance"])
            for i, (o, dist) in enumerate(zip(self.omega_trace, self.distance_trace)):
                w.writerow([i, repr(float(o)), repr(float(dist))])


# ---------------------------------------------------------------- objective
def _omega_from_scores(f, k):
    others = f.copy()
    others[k] = -np.inf
    competitor = int(np.flatnonzero(others >= others.max() - _TIE)[0])
    return float(f[k] - f[competitor]), competitor


def omega(clf, x, k):
    """Return ``(omega, competitor)`` for class ``k`` at input ``x``."""
    if clf.num_classes < 2 or not 0 <= k < clf.num_classes:
        raise ValueError(f"class index {k} invalid for {clf.num_classes} classes")
    f = clf.discriminants(x, calibrated=False)
    return _omega_from_scores(f, k)


def _omega_and_grad(clf, x, k):
    fmap = clf.feature_map_
    z = fmap._forward(x)
    if clf.kernel_.kind == "linear":
        f = clf.coef_ @ z + clf.intercept_
        val, l = _omega_from_scores(f, k)
        g_z = clf.coef_[k] - clf.coef_[l]
    else:
        kv = clf._kernel_vec(z)
        f = clf.dual_coef_ @ kv + clf.intercept_
        val, l = _omega_from_scores(f, k)
        g_z = clf._grad_z_coef(z, clf.dual_coef_[k] - clf.dual_coef_[l], kv)
    return val, fmap._pullback(x, g_z)


def grad_omega(clf, x, k):
    """Input-space gradient of omega using the current (lowest-index) competitor."""
    x = check_vector(x, clf.n_features_in_)
    if clf.num_classes < 2 or not 0 <= k < clf.num_classes:
        raise ValueError(f"class index {k} invalid for {clf.num_classes} classes")
    return _omega_and_grad(clf, x, k)[1]


# --------------------------------------------------------------- projection
def project(x, x0, d_max, x_lb=-np.inf, x_ub=np.inf):
    """Euclidean projection of ``x`` onto ``{||v - x0|| <= d_max} ∩ [x_lb, x_ub]``.

    With ``x0`` inside the box the solution is ``clip(x0 + s (x - x0))`` for
    the scalar ``s in (0, 1]`` that puts it on the sphere (or s = 1 when the
    clipped point is already inside the ball).  ``s`` is found exactly by
    walking the sorted breakpoints where components reach their bounds.
    """
    x = check_vector(x, name="x")
    x0 = check_vector(x0, x.size, name="x0")
    lb, ub = check_bounds(x_lb, x_ub, x.size)
    if not d_max >= 0:
        raise ValueError("d_max must be non-negative")
    if np.any(x0 < lb) or np.any(x0 > ub):
        raise ValueError("x0 lies outside the box")
    return _project(x, x0, float(d_max), lb, ub)


def _project(x, x0, d_max, lb, ub):
    v = np.clip(x, lb, ub)
    slack = 1e-12 * max(1.0, d_max)
    if np.linalg.norm(v - x0) <= d_max + slack:
        return v
    if d_max == 0:
        return x0.copy()

    delta = x - x0
    room = np.where(delta > 0, ub - x0, lb - x0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cap = np.where(delta != 0, room / delta, np.inf)   # s at which component j saturates
    order = np.argsort(cap, kind="stable")
    caps = cap[order]
    d2 = (delta * delta)[order]
    fixed2 = (room * room)[order]
    free = d2.sum()
    clipped = 0.0
    target = d_max * d_max
    s = 1.0
    lo = 0.0
    for j in range(caps.size + 1):
        hi = caps[j] if j < caps.size else np.inf
        if free > 0:
            s = np.sqrt(max(target - clipped, 0.0) / free)
            if lo <= s <= hi:
                break
        if j == caps.size:
            break
        free -= d2[j]
        clipped += fixed2[j]
        lo = hi
    p = np.clip(x0 + min(s, 1.0) * delta, lb, ub)
    r = np.linalg.norm(p - x0)
    if r > d_max:
        p = x0 + (p - x0) * (d_max / r)
    return p


# ------------------------------------------------------------------ attack
def run_attack(clf, x0, spec: AttackSpec, x_init=None) -> AttackResult:
    """Run the projected-gradient evasion attack from ``x0``.

    ``x_init`` warm-starts the iterations (it is projected onto the feasible
    set of ``x0`` first); the constraints stay centred on ``x0``.
    """
    x0 = check_vector(x0, clf.n_features_in_, name="x0")
    c = clf.num_classes
    if not 0 <= spec.k < c:
        raise ValueError(f"class index {spec.k} invalid for {c} classes")
    lb, ub = spec.bounds(x0)
    if np.any(x0 < lb) or np.any(x0 > ub):
        raise ValueError("x0 is infeasible for the box constraint")
    clean = int(np.argmax(clf.discriminants(x0)))
    if spec.mode == GENERIC and spec.k != clean:
        raise ValueError(f"error-generic attack needs k = predicted class {clean}, got {spec.k}")

    r = -1.0 if spec.mode == GENERIC else 1.0
    eta = spec.step
    better = (lambda a, b: a < b) if spec.mode == GENERIC else (lambda a, b: a > b)

    d_max = float(spec.d_max)
    if x_init is None:
        xp = x0.copy()
    else:
        xp = _project(check_vector(x_init, x0.size, name="x_init"), x0, d_max, lb, ub)
    om_p, g = _omega_and_grad(clf, xp, spec.k)
    trace = [om_p]
    dists = [float(np.linalg.norm(xp - x0))]
    best_x, best_om, best_it = xp, om_p, 0
    termination = "iteration-cap"
    it = 0
    for it in range(1, spec.max_iters + 1):
        om_x = om_p
        xp = _project(xp + r * eta * g, x0, d_max, lb, ub)
        om_p, g = _omega_and_grad(clf, xp, spec.k)
        trace.append(om_p)
        dists.append(float(np.linalg.norm(xp - x0)))
        if better(om_p, best_om):
            best_x, best_om, best_it = xp, om_p, it
        if abs(om_p - om_x) <= spec.epsilon:
            termination = "tolerance"
            break

    pred = int(np.argmax(clf.discriminants(best_x)))
    success = pred != spec.k if spec.mode == GENERIC else pred == spec.k
    return AttackResult(
        x_adv=best_x, omega_trace=np.array(trace), distance_trace=np.array(dists),
        iterations=it, termination=termination, success=bool(success),
        distance=float(np.linalg.norm(best_x - x0)), best_omega=float(best_om),
        best_iteration=best_it, predicted=pred, spec=spec,
    )


def roi_from_rect(shape, rect):
    """Boolean mask (raster-scan order, all channels) that is True inside
    ``rect = (row, col, height, width)``."""
    h, w = int(shape[0]), int(shape[1])
    ch = int(shape[2]) if len(shape) > 2 else 1
    r0, c0, rh, rw = (int(v) for v in rect)
    if rh < 0 or rw < 0 or r0 < 0 or c0 < 0 or r0 + rh > h or c0 + rw > w:
        raise ValueError(f"rect {rect} is outside a {h}x{w} image")
    mask = np.zeros((h, w, ch), dtype=bool)
    mask[r0:r0 + rh, c0:c0 + rw, :] = True
    return mask.reshape(-1)
