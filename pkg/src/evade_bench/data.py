"""Datasets: CSV and portable-anymap ingestion, synthetic blobs, splits."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .pnm import read_pnm, write_pnm

__all__ = [
    "DatasetError",
    "Sample",
    "Dataset",
    "load_csv",
    "write_csv",
    "load_raster",
    "load_manifest",
    "make_blobs",
    "make_blob_images",
    "split",
    "stratified_kfold",
]


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    label: int
    shape: tuple | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled sample matrix.

    ``X`` is (n, d), ``y`` holds dense labels in ``[0, num_classes)``.
    ``x_lb``/``x_ub`` are the global box bounds used by attacks (infinite
    for CSV data unless declared).
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    shape: tuple | None = None
    x_lb: float = -np.inf
    x_ub: float = np.inf
    class_names: tuple = field(default=())

    def __post_init__(self):
        X = _readonly(self.X, np.float64)
        y = _readonly(self.y, np.int64)
        if X.ndim != 2:
            raise DatasetError(f"X must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DatasetError("X and y disagree on sample count")
        if not np.all(np.isfinite(X)):
            raise DatasetError("non-finite feature values")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.shape is not None and int(np.prod(self.shape)) != X.shape[1]:
            raise DatasetError(f"raster shape {self.shape} does not match d={X.shape[1]}")
        if self.x_lb > self.x_ub:
            raise DatasetError("x_lb exceeds x_ub")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.n_samples

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.y[i]), self.shape)

    @property
    def samples(self):
        return [self[i] for i in range(self.n_samples)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.shape,
                       self.x_lb, self.x_ub, self.class_names)


def load_csv(path, has_header=False, num_classes=None, shape=None,
             x_lb=-np.inf, x_ub=np.inf) -> Dataset:
    """Read rows ``label, v0, ..., v_{d-1}``; row numbers in errors are 1-based."""
    labels, rows = [], []
    arity = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rowno, row in enumerate(reader, start=1):
            if has_header and rowno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if arity is None:
                arity = len(row)
                if arity < 2:
                    raise DatasetError(f"row {rowno}: need a label and at least one value")
            elif len(row) != arity:
                raise DatasetError(
                    f"row {rowno}: ragged arity {len(row)} (expected {arity})"
                )
            try:
                lab = float(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise DatasetError(f"row {rowno}: non-numeric value") from None
            if lab != int(lab) or lab < 0:
                raise DatasetError(f"row {rowno}: label must be a non-negative integer")
            labels.append(int(lab))
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    c = max(labels) + 1 if num_classes is None else int(num_classes)
    return Dataset(np.array(rows), np.array(labels), c, shape, x_lb, x_ub)


def write_csv(ds: Dataset, path, header=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["label"] + [f"v{j}" for j in range(ds.dim)])
        for x, lab in zip(ds.X, ds.y):
            w.writerow([int(lab)] + [repr(float(v)) for v in x])


def load_raster(paths, labels, num_classes=None) -> Dataset:
    """Load PGM/PPM images; all must share one (h, w, channels) shape."""
    paths = list(paths)
    labels = [int(v) for v in labels]
    if len(paths) != len(labels):
        raise DatasetError("paths and labels differ in length")
    if not paths:
        raise DatasetError("no images given")
    shape = None
    rows = []
    for p in paths:
        pix, _ = read_pnm(p)
        if shape is None:
            shape = pix.shape
        elif pix.shape != shape:
            raise DatasetError(f"{p}: shape {pix.shape} differs from {shape}")
        rows.append(pix.reshape(-1).astype(np.float64))
    c = max(labels) + 1 if num_classes is None else int(num_classes)
    return Dataset(np.array(rows), np.array(labels), c, shape, 0.0, 255.0)


def write_raster_dir(ds: Dataset, directory):
    """Write every sample as a PNM plus an ``index.csv`` of ``label,filename``."""
    if ds.shape is None:
        raise DatasetError("dataset has no raster shape")
    os.makedirs(directory, exist_ok=True)
    ext = "pgm" if ds.shape[2] == 1 else "ppm"
    with open(os.path.join(directory, "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        for i, (x, lab) in enumerate(zip(ds.X, ds.y)):
            name = f"img{i:05d}.{ext}"
            write_pnm(os.path.join(directory, name), x.reshape(ds.shape))
            w.writerow([int(lab), name])


_MANIFEST_KEYS = {"path", "format", "num_classes", "bounds", "has_header", "shape",
                  "class_names", "params"}


def load_manifest(manifest) -> Dataset:
    """Load a dataset from a manifest dict or JSON file.

    ``format`` is ``csv`` (label-first rows), ``pnm`` (``path`` is an index
    CSV of ``label,image`` rows, images relative to it) or ``blobs``
    (``params`` are :func:`make_blobs` keyword arguments) or ``blob-images``
    (:func:`make_blob_images` keyword arguments).
    """
    base = ""
    if not isinstance(manifest, dict):
        base = os.path.dirname(os.path.abspath(manifest))
        with open(manifest) as fh:
            manifest = json.load(fh)
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise DatasetError(f"unknown manifest keys: {sorted(unknown)}")
    fmt = manifest.get("format", "csv")
    bounds = manifest.get("bounds")
    if fmt == "blobs":
        ds = make_blobs(**manifest.get("params", {}))
    elif fmt == "blob-images":
        params = dict(manifest.get("params", {}))
        if "shape" in params:
            params["shape"] = tuple(params["shape"])
        ds = make_blob_images(**params)
    else:
        path = os.path.join(base, manifest["path"])
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        if fmt == "csv":
            shape = manifest.get("shape")
            ds = load_csv(path, bool(manifest.get("has_header", False)),
                          manifest.get("num_classes"), tuple(shape) if shape else None)
        elif fmt == "pnm":
            root = os.path.dirname(path)
            labels, paths = [], []
            with open(path, newline="") as fh:
                for row in csv.reader(fh):
                    if row:
                        labels.append(int(row[0]))
                        paths.append(os.path.join(root, row[1]))
            ds = load_raster(paths, labels, manifest.get("num_classes"))
        else:
            raise DatasetError(f"unsupported dataset format {fmt!r}")
    if manifest.get("num_classes") is not None and ds.num_classes != manifest["num_classes"]:
        ds = Dataset(ds.X, ds.y, int(manifest["num_classes"]), ds.shape, ds.x_lb, ds.x_ub)
    if bounds is not None:
        ds = Dataset(ds.X, ds.y, ds.num_classes, ds.shape, float(bounds[0]), float(bounds[1]),
                     ds.class_names)
    if manifest.get("class_names"):
        ds = Dataset(ds.X, ds.y, ds.num_classes, ds.shape, ds.x_lb, ds.x_ub,
                     manifest["class_names"])
    return ds


def make_blobs(c=3, d=2, n_per_class=50, centers=None, spread=1.0, seed=0) -> Dataset:
    """Isotropic Gaussian clusters, ordered class by class."""
    if c < 2 or d < 1:
        raise DatasetError("need c >= 2 and d >= 1")
    if spread < 0:
        raise DatasetError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.standard_normal((c, d)) * 5.0
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (c, d):
        raise DatasetError(f"expected {c} centers of dimension {d}, got shape {centers.shape}")
    noise = rng.standard_normal((c, n_per_class, d))
    X = (centers[:, None, :] + spread * noise).reshape(c * n_per_class, d)
    y = np.repeat(np.arange(c), n_per_class)
    return Dataset(X, y, c)


def make_blob_images(c=3, shape=(8, 8, 1), n_per_class=40, spread=12.0, seed=0,
                     contrast=90.0) -> Dataset:
    """Raster testbed: each class is a random smooth prototype image around
    mid-gray plus pixel noise, clipped to 0..255."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    protos = np.clip(127.5 + contrast * rng.uniform(-1.0, 1.0, size=(c, d)), 0.0, 255.0)
    noise = rng.standard_normal((c, n_per_class, d)) * spread
    X = np.clip(protos[:, None, :] + noise, 0.0, 255.0).reshape(c * n_per_class, d)
    y = np.repeat(np.arange(c), n_per_class)
    return Dataset(X, y, c, tuple(shape), 0.0, 255.0)


def _labels_of(ds_or_y):
    return ds_or_y.y if isinstance(ds_or_y, Dataset) else np.asarray(ds_or_y, dtype=np.int64)


def split(ds, fractions, seed=0, stratified=True):
    """Disjoint (train, validation, test) index arrays, each sorted.

    With ``stratified`` each class contributes ``round(f * n_class)`` samples
    to every part (the test part absorbs rounding so parts never overlap).
    """
    y = _labels_of(ds)
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or fr.sum() > 1.0 + 1e-12:
        raise ValueError(f"fractions must be three non-negative values summing to <= 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    groups = [np.flatnonzero(y == k) for k in np.unique(y)] if stratified else [np.arange(y.size)]
    needed = int(np.count_nonzero(fr))
    for idx in groups:
        n = idx.size
        if stratified and n < needed:
            raise DatasetError(f"class with {n} samples cannot fill {needed} parts")
        perm = idx[rng.permutation(n)]
        counts = [int(round(f * n)) for f in fr]
        while sum(counts) > n:
            j = int(np.argmax(counts))
            counts[j] -= 1
        start = 0
        for p, cnt in zip(parts, counts):
            p.append(perm[start:start + cnt])
            start += cnt
    return tuple(np.sort(np.concatenate(p)).astype(np.int64) for p in parts)


def stratified_kfold(ds, folds, seed=0):
    """List of (train_idx, test_idx) pairs; every class spread across folds."""
    y = _labels_of(ds)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    assign = np.empty(y.size, dtype=np.int64)
    for k in np.unique(y):
        idx = np.flatnonzero(y == k)
        if idx.size < folds:
            raise DatasetError(f"class {k} has {idx.size} samples, fewer than {folds} folds")
        perm = idx[rng.permutation(idx.size)]
        assign[perm] = np.arange(idx.size) % folds
    return [(np.flatnonzero(assign != f), np.flatnonzero(assign == f)) for f in range(folds)]
