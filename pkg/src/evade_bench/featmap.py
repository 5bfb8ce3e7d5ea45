"""Differentiable feature maps with exact vector pullbacks.

Every map exposes ``forward`` (x -> z), ``pullback`` (x, g_z -> J(x)^T g_z)
and ``jvp`` (x, v -> J(x) v).  Jacobians are never materialized.  The maps
are also scikit-learn transformers (``fit`` is a no-op, ``transform`` maps
row-wise) so they compose with pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_vector

__all__ = [
    "FeatureMap",
    "IdentityMap",
    "AffineMap",
    "TanhRandomMap",
    "ComposedMap",
    "map_from_config",
    "params_to_bytes",
    "params_from_bytes",
]


def _gaussian_weights(d, m, seed, scale):
    # entries ~ N(0, scale^2 / d)
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, d)) * (scale / np.sqrt(d))


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class FeatureMap(TransformerMixin, BaseEstimator):
    """Base class. Subclasses implement ``_forward``, ``_pullback`` and ``_jvp``
    on validated 1-D inputs, and ``_forward_batch`` on 2-D inputs."""

    kind = "abstract"

    @property
    def input_dim(self) -> int:
        raise NotImplementedError

    @property
    def output_dim(self) -> int:
        raise NotImplementedError

    def forward(self, x):
        x = check_vector(x, self.input_dim, name="x")
        return self._forward(x)

    def pullback(self, x, g_z):
        x = check_vector(x, self.input_dim, name="x")
        g_z = check_vector(g_z, self.output_dim, name="g_z")
        return self._pullback(x, g_z)

    def jvp(self, x, v):
        x = check_vector(x, self.input_dim, name="x")
        v = check_vector(v, self.input_dim, name="v")
        return self._jvp(x, v)

    # sklearn transformer surface
    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(
                f"expected 2-D input with {self.input_dim} columns, got shape {X.shape}"
            )
        return self._forward_batch(X)

    def _forward_batch(self, X):
        return np.array([self._forward(x) for x in X])

    def operator_norm(self, n_iter=200, seed=0):
        """Power-iteration estimate of the spectral norm of the linear part
        (affine and tanh-random maps only)."""
        W = getattr(self, "W_", None)
        if W is None:
            raise TypeError(f"{self.kind} map has no weight matrix")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(W.shape[1])
        v /= np.linalg.norm(v)
        for _ in range(n_iter):
            u = W.T @ (W @ v)
            nu = np.linalg.norm(u)
            if nu == 0.0:
                return 0.0
            v = u / nu
        return float(np.linalg.norm(W @ v))

    def to_config(self) -> dict:
        raise NotImplementedError


class IdentityMap(FeatureMap):
    kind = "identity"

    def __init__(self, d=1):
        self.d = d

    @property
    def input_dim(self):
        return int(self.d)

    @property
    def output_dim(self):
        return int(self.d)

    def _forward(self, x):
        return x.copy()

    def _forward_batch(self, X):
        return X.copy()

    def _pullback(self, x, g_z):
        return g_z.copy()

    def _jvp(self, x, v):
        return v.copy()

    def to_config(self):
        return {"kind": "identity", "d": self.input_dim}


class AffineMap(FeatureMap):
    """z = W x + b.

    Either pass ``weights`` (m x d) and ``bias`` explicitly or pass ``d``,
    ``m`` and ``seed`` to draw W with N(0, scale^2/d) entries and b = 0.
    """

    kind = "affine"

    def __init__(self, d=None, m=None, seed=0, scale=1.0, weights=None, bias=None):
        self.d = d
        self.m = m
        self.seed = seed
        self.scale = scale
        self.weights = weights
        self.bias = bias
        self._build()

    def _build(self):
        if self.weights is not None:
            W = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        else:
            if self.d is None or self.m is None:
                raise ValueError("affine map needs either weights or (d, m, seed)")
            W = _gaussian_weights(int(self.d), int(self.m), self.seed, self.scale)
        b = np.zeros(W.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ValueError(f"bias must have length {W.shape[0]}, got {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("affine parameters must be finite")
        self.W_ = _frozen(W)
        self.b_ = _frozen(b)

    @classmethod
    def standardizer(cls, Z, eps=1e-12):
        """Per-feature standardization z -> (z - mean) / std fitted on rows of Z."""
        Z = np.asarray(Z, dtype=np.float64)
        mu = Z.mean(axis=0)
        sd = Z.std(axis=0)
        sd = np.where(sd > eps, sd, 1.0)
        return cls(weights=np.diag(1.0 / sd), bias=-mu / sd)

    @property
    def input_dim(self):
        return self.W_.shape[1]

    @property
    def output_dim(self):
        return self.W_.shape[0]

    def _forward(self, x):
        return self.W_ @ x + self.b_

    def _forward_batch(self, X):
        return X @ self.W_.T + self.b_

    def _pullback(self, x, g_z):
        return self.W_.T @ g_z

    def _jvp(self, x, v):
        return self.W_ @ v

    def to_config(self):
        if self.weights is not None:
            return {"kind": "affine", "d": self.input_dim, "m": self.output_dim,
                    "explicit": True}
        return {"kind": "affine", "d": self.input_dim, "m": self.output_dim,
                "seed": self.seed, "scale": self.scale}


class TanhRandomMap(AffineMap):
    """z = tanh(W x + b) with seeded Gaussian W (random-feature layer)."""

    kind = "tanh-random"

    def _forward(self, x):
        return np.tanh(self.W_ @ x + self.b_)

    def _forward_batch(self, X):
        return np.tanh(X @ self.W_.T + self.b_)

    def _pullback(self, x, g_z):
        z = self._forward(x)
        return self.W_.T @ ((1.0 - z * z) * g_z)

    def _jvp(self, x, v):
        z = self._forward(x)
        return (1.0 - z * z) * (self.W_ @ v)

    def to_config(self):
        cfg = super().to_config()
        cfg["kind"] = "tanh-random"
        return cfg


class ComposedMap(FeatureMap):
    """Sequential composition; ``stages[0]`` is applied first."""

    kind = "composition"

    def __init__(self, stages=()):
        self.stages = list(stages)
        if not self.stages:
            raise ValueError("composition needs at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.output_dim != b.input_dim:
                raise ValueError(
                    f"stage dims do not chain: {a.output_dim} -> {b.input_dim}"
                )

    @property
    def input_dim(self):
        return self.stages[0].input_dim

    @property
    def output_dim(self):
        return self.stages[-1].output_dim

    def _trace(self, x):
        xs = [x]
        for s in self.stages[:-1]:
            xs.append(s._forward(xs[-1]))
        return xs

    def _forward(self, x):
        for s in self.stages:
            x = s._forward(x)
        return x

    def _forward_batch(self, X):
        for s in self.stages:
            X = s._forward_batch(X)
        return X

    def _pullback(self, x, g_z):
        xs = self._trace(x)
        g = g_z
        for s, xi in zip(reversed(self.stages), reversed(xs)):
            g = s._pullback(xi, g)
        return g

    def _jvp(self, x, v):
        for s in self.stages:
            v = s._jvp(x, v)
            x = s._forward(x)
        return v

    def to_config(self):
        return {"kind": "composition", "stages": [s.to_config() for s in self.stages]}


_MAP_KEYS = {
    "identity": {"kind", "d"},
    "affine": {"kind", "d", "m", "seed", "scale", "explicit"},
    "tanh-random": {"kind", "d", "m", "seed", "scale", "explicit"},
    "composition": {"kind", "stages"},
}


def map_from_config(cfg: dict, d: int | None = None) -> FeatureMap:
    """Build a map from ``{kind, d, m, seed[, scale]}`` or
    ``{kind: "composition", stages: [...]}``.  ``d`` fills a missing input dim."""
    kind = cfg.get("kind")
    if kind not in _MAP_KEYS:
        raise ValueError(f"unknown feature map kind {kind!r}")
    unknown = set(cfg) - _MAP_KEYS[kind]
    if unknown:
        raise ValueError(f"unknown keys for {kind} map: {sorted(unknown)}")
    if kind == "identity":
        return IdentityMap(int(cfg.get("d", d)))
    if kind == "composition":
        stages = []
        din = d
        for sc in cfg["stages"]:
            st = map_from_config(sc, din)
            stages.append(st)
            din = st.output_dim
        return ComposedMap(stages)
    if cfg.get("explicit"):
        raise ValueError("explicit affine parameters must be loaded from a parameter blob")
    cls = AffineMap if kind == "affine" else TanhRandomMap
    din = int(cfg.get("d", d))
    return cls(d=din, m=int(cfg.get("m", din)), seed=int(cfg.get("seed", 0)),
               scale=float(cfg.get("scale", 1.0)))


def _leaves(fmap):
    if isinstance(fmap, ComposedMap):
        for s in fmap.stages:
            yield from _leaves(s)
    else:
        yield fmap


def params_to_bytes(fmap: FeatureMap) -> bytes:
    """Flat little-endian float64 dump of every weight matrix (row-major)
    followed by its offset vector, stage by stage."""
    out = []
    for leaf in _leaves(fmap):
        if isinstance(leaf, AffineMap):
            out.append(np.ascontiguousarray(leaf.W_, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(leaf.b_, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(cfg: dict, blob: bytes, d: int | None = None) -> FeatureMap:
    """Inverse of :func:`params_to_bytes` given the map config (dims required)."""
    values = np.frombuffer(blob, dtype="<f8")
    pos = 0

    def build(c, din):
        nonlocal pos
        kind = c["kind"]
        if kind == "identity":
            return IdentityMap(int(c.get("d", din)))
        if kind == "composition":
            stages = []
            for sc in c["stages"]:
                st = build(sc, din)
                stages.append(st)
                din = st.output_dim
            return ComposedMap(stages)
        di, mi = int(c.get("d", din)), int(c["m"])
        n = mi * di + mi
        if pos + n > values.size:
            raise ValueError("parameter blob too short for map config")
        W = values[pos:pos + mi * di].reshape(mi, di)
        b = values[pos + mi * di:pos + n]
        pos += n
        cls = AffineMap if kind == "affine" else TanhRandomMap
        return cls(weights=W, bias=b)

    fmap = build(cfg, d)
    if pos != values.size:
        raise ValueError(
            f"parameter blob has {values.size - pos} trailing values"
        )
    return fmap
