"""Synthetic two-domain benchmark, label-noise injection, CSV I/O and batching."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

# class ratios of the WSI source / MSI target training sets (normal, adenoma, adenocarcinoma)
SOURCE_COUNTS = (36094, 3626, 3081)
TARGET_COUNTS = (2696, 1042, 1091)
SOURCE_PRIORS = (0.843, 0.085, 0.072)
TARGET_PRIORS = (0.558, 0.216, 0.226)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Rows of one domain. ``z`` is None for unlabeled (target) data."""

    x: np.ndarray  # (n, d_x)
    y_clean: np.ndarray | None  # (n,) int
    z: np.ndarray | None = None  # (n,) int, observed noisy labels
    domain: str = "source"
    n_classes: int = 3

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"x must be 2-D, got shape {self.x.shape}")
        n = self.x.shape[0]
        for name in ("y_clean", "z"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.int64)
            if v.shape != (n,):
                raise DataError(f"{name} has shape {v.shape}, expected ({n},)")
            if np.any(v < 0) or np.any(v >= self.n_classes):
                raise DataError(f"{name} out of range [0, {self.n_classes})")
            setattr(self, name, v)
        if self.domain not in ("source", "target"):
            raise DataError(f"unknown domain {self.domain!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            x=self.x[idx],
            y_clean=None if self.y_clean is None else self.y_clean[idx],
            z=None if self.z is None else self.z[idx],
            domain=self.domain,
            n_classes=self.n_classes,
        )


@dataclass
class NoiseSpec:
    T_true: list[list[float]]
    seed: int = 0

    def matrix(self) -> np.ndarray:
        T = np.asarray(self.T_true, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise DataError(f"transition matrix must be square, got {T.shape}")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("transition matrix must be row-stochastic")
        return T

    @classmethod
    def uniform(cls, n_classes: int, rate: float, seed: int = 0) -> "NoiseSpec":
        if not 0 <= rate <= 1:
            raise DataError("noise rate must lie in [0, 1]")
        off = rate / (n_classes - 1) if n_classes > 1 else 0.0
        T = np.full((n_classes, n_classes), off)
        np.fill_diagonal(T, 1.0 - rate)
        return cls(T.tolist(), seed)


@dataclass
class BenchmarkSpec:
    n_classes: int = 3
    d_x: int = 2
    radius: float = 4.0
    cluster_std: float = 1.0
    n_source: int = 3000
    n_target: int = 1500
    source_priors: tuple[float, ...] = SOURCE_PRIORS
    target_priors: tuple[float, ...] = TARGET_PRIORS
    theta_deg: float = 30.0
    shift: tuple[float, ...] = (0.0, -3.0)
    noise_rate: float = 0.3
    T_true: list[list[float]] | None = None
    test_fraction: float = 0.2

    def validate(self) -> None:
        K = self.n_classes
        if K < 2:
            raise DataError("need at least 2 classes")
        if self.d_x != 2:
            raise DataError("the synthetic generator is 2-D (d_x = 2)")
        for name in ("source_priors", "target_priors"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != (K,) or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-6:
                raise DataError(f"{name} must be {K} positive values summing to 1")
        if self.n_source < K or self.n_target < K:
            raise DataError("counts must be at least the number of classes")
        if len(self.shift) != self.d_x:
            raise DataError("shift must have d_x components")
        if not 0 < self.test_fraction < 1:
            raise DataError("test_fraction must lie in (0, 1)")
        self.noise_spec(0).matrix()

    def noise_spec(self, seed: int) -> NoiseSpec:
        if self.T_true is not None:
            return NoiseSpec(self.T_true, seed)
        return NoiseSpec.uniform(self.n_classes, self.noise_rate, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_priors"] = list(self.source_priors)
        d["target_priors"] = list(self.target_priors)
        d["shift"] = list(self.shift)
        return d


def class_counts(priors, n: int) -> np.ndarray:
    """Deterministic per-class counts summing to n (largest remainder rounding)."""
    p = np.asarray(priors, dtype=np.float64)
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def cluster_means(spec: BenchmarkSpec) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def affine(x: np.ndarray, theta_deg: float, shift) -> np.ndarray:
    th = math.radians(theta_deg)
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return x @ R.T + np.asarray(shift, dtype=np.float64)


def place(labels: np.ndarray, eps: np.ndarray, spec: BenchmarkSpec, target: bool) -> np.ndarray:
    """Map class labels and unit Gaussian draws to points of a domain."""
    x = cluster_means(spec)[labels] + spec.cluster_std * eps
    return affine(x, spec.theta_deg, spec.shift) if target else x


def _draw(spec: BenchmarkSpec, priors, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    counts = class_counts(priors, n)
    labels = rng.permutation(np.repeat(np.arange(spec.n_classes), counts))
    eps = rng.standard_normal((n, spec.d_x))
    return labels, eps


def inject_label_noise(labels, noise: NoiseSpec) -> np.ndarray:
    """Resample each label k independently from row k of the transition matrix."""
    T = noise.matrix()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= T.shape[0]):
        raise DataError("label out of range")
    rng = np.random.default_rng(noise.seed)
    u = rng.random(labels.shape[0])
    cdf = np.cumsum(T, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] >= cdf[labels]).sum(axis=1).astype(np.int64)


@dataclass
class Benchmark:
    source: Dataset
    target_train: Dataset
    target_test: Dataset
    spec: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    seed: int = 0


def generate_synthetic(spec: BenchmarkSpec | None = None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Source (with noisy labels) and full target (unlabeled) datasets."""
    spec = spec or BenchmarkSpec()
    spec.validate()
    ss = np.random.SeedSequence(seed)
    rs, rt, rn = (np.random.default_rng(s) for s in ss.spawn(3))
    ys, es = _draw(spec, spec.source_priors, spec.n_source, rs)
    yt, et = _draw(spec, spec.target_priors, spec.n_target, rt)
    noise_seed = int(rn.integers(2**31))
    z = inject_label_noise(ys, spec.noise_spec(noise_seed))
    source = Dataset(place(ys, es, spec, target=False), ys, z, "source", spec.n_classes)
    target = Dataset(place(yt, et, spec, target=True), yt, None, "target", spec.n_classes)
    return source, target


def split_target(target: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    perm = rng.permutation(len(target))
    n_test = int(round(test_fraction * len(target)))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return target.subset(train_idx), target.subset(test_idx)


def make_benchmark(spec: BenchmarkSpec | None = None, seed: int = 0) -> Benchmark:
    spec = spec or BenchmarkSpec()
    source, target = generate_synthetic(spec, seed)
    train, test = split_target(target, spec.test_fraction, seed)
    return Benchmark(source, train, test, spec, seed)


# ---------------------------------------------------------------- batching


@dataclass
class DomainBatch:
    xs: np.ndarray
    zs: np.ndarray
    xt: np.ndarray
    source_idx: np.ndarray
    target_idx: np.ndarray


def make_batches(source: Dataset, target: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[DomainBatch]:
    """One epoch of paired batches; the longer domain is seen exactly once, the shorter is cycled."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if len(source) == 0 or len(target) == 0:
        raise DataError("both domains must be nonempty")
    if source.z is None:
        raise DataError("source dataset has no observed labels")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    ps = rng.permutation(len(source))
    pt = rng.permutation(len(target))
    n = max(len(source), len(target))
    for start in range(0, n, batch_size):
        pos = np.arange(start, min(start + batch_size, n))
        si = ps[pos % len(source)]
        ti = pt[pos % len(target)]
        yield DomainBatch(source.x[si], source.z[si], target.x[ti], si, ti)


# ---------------------------------------------------------------- CSV I/O


def write_csv(ds: Dataset, path) -> None:
    d = ds.d_x
    header = [f"x{i}" for i in range(d)]
    if ds.domain == "source":
        header.append("label")
    header.append("clean_label")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.x[i]]
            if ds.domain == "source":
                row.append(str(int(ds.z[i])))
            row.append("" if ds.y_clean is None else str(int(ds.y_clean[i])))
            w.writerow(row)


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read a source (``label`` column present) or target CSV.

    The class count is taken from ``n_classes`` or, failing that, from a
    ``manifest.json`` next to the file.
    """
    path = Path(path)
    if n_classes is None:
        manifest = path.parent / "manifest.json"
        if manifest.exists():
            n_classes = int(json.loads(manifest.read_text())["n_classes"])
        else:
            raise DataError(f"{path}: class count unknown (no manifest.json, none given)")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    feats = [h for h in header if h.startswith("x")]
    if feats != [f"x{i}" for i in range(len(feats))] or not feats:
        raise DataError(f"{path}:1: bad feature columns {feats}")
    has_label = "label" in header
    expected = feats + (["label"] if has_label else []) + ["clean_label"]
    if header != expected:
        raise DataError(f"{path}:1: header {header} does not match {expected}")
    d = len(feats)
    xs, zs, ys = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x = [float(v) for v in row[:d]]
            z = int(row[d]) if has_label else None
            y = int(row[-1]) if row[-1].strip() != "" else None
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
        if not all(math.isfinite(v) for v in x):
            raise DataError(f"{path}:{lineno}: non-finite feature")
        for name, v in (("label", z), ("clean_label", y)):
            if v is not None and not 0 <= v < n_classes:
                raise DataError(f"{path}:{lineno}: {name} {v} out of range [0, {n_classes})")
        xs.append(x)
        zs.append(z)
        ys.append(y)
    if not xs:
        raise DataError(f"{path}: no examples (empty dataset)")
    have_clean = [y is not None for y in ys]
    if any(have_clean) and not all(have_clean):
        raise DataError(f"{path}: clean_label must be given for all rows or none")
    return Dataset(
        x=np.array(xs, dtype=np.float64).reshape(len(xs), d),
        y_clean=np.array(ys, dtype=np.int64) if all(have_clean) else None,
        z=np.array(zs, dtype=np.int64) if has_label else None,
        domain="source" if has_label else "target",
        n_classes=n_classes,
    )
