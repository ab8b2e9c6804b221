"""Synthetic domain families, splits and deterministic batch streams.

Domains form rotation families: a base cloud is generated once per seed
and rigidly rotated about its centroid, so labels travel with the points
and pairwise distances are preserved.  Two families are provided:
two-moons (binary) and a three-blob Gaussian mixture (multi-class).
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32


class DataError(ValueError):
    """Dataset contents violate the contract."""


class ParseError(ValueError):
    """CSV file could not be parsed; message carries the 1-based line number."""


@dataclass
class DomainDataset:
    """Feature matrix with optional labels and a stable domain identity."""

    features: np.ndarray              # [n, d] float32
    labels: np.ndarray | None         # [n] int64, None when unlabeled
    domain_id: int
    num_classes: int | None = None
    angle_deg: float | None = None
    name: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=F32)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DataError("features must be a non-empty [n, d] array")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DataError("labels must be 1-d and match the feature count")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise DataError("label out of range")
            present = np.unique(self.labels)
            if len(present) != self.num_classes:
                raise DataError("every class needs at least one sample")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray, name_suffix: str = "") -> "DomainDataset":
        return DomainDataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            domain_id=self.domain_id,
            num_classes=self.num_classes,
            angle_deg=self.angle_deg,
            name=self.name + name_suffix,
        )

    def without_labels(self) -> "DomainDataset":
        return DomainDataset(
            features=self.features,
            labels=None,
            domain_id=self.domain_id,
            num_classes=self.num_classes,
            angle_deg=self.angle_deg,
            name=self.name,
        )


def _rotate_about_centroid(points: np.ndarray, angle_deg: float) -> np.ndarray:
    theta = np.deg2rad(float(angle_deg))
    rot = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]],
        dtype=np.float64,
    )
    center = points.mean(axis=0)
    return ((points - center) @ rot.T + center).astype(F32)


def make_rotated_moons(angle_deg: float, n: int = 600, noise_sd: float = 0.12,
                       seed: int = 0, domain_id: int = 0) -> DomainDataset:
    """Two interleaved half-moons, rigidly rotated about the cloud centroid.

    The base cloud depends only on (n, noise_sd, seed); the same seed at a
    different angle yields the same points rotated, labels riding along.
    """
    if n < 2 or n % 2:
        raise DataError("n must be an even number >= 2")
    if noise_sd < 0:
        raise DataError("noise_sd must be >= 0")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    base = np.concatenate([outer, inner], axis=0)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x110011, n])
    base = base + rng.normal(0.0, noise_sd, size=base.shape)
    features = _rotate_about_centroid(base, angle_deg)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return DomainDataset(
        features=features, labels=labels, domain_id=domain_id,
        num_classes=2, angle_deg=float(angle_deg), name=f"moons@{angle_deg:g}",
    )


_BLOB_ANGLES = np.deg2rad([90.0, 210.0, 330.0])


def make_rotated_blobs(angle_deg: float, n: int = 600, noise_sd: float = 0.25,
                       seed: int = 0, domain_id: int = 0) -> DomainDataset:
    """Three Gaussian blobs on a ring, rotated about the cloud centroid."""
    if n < 3 or n % 3:
        raise DataError("n must be a multiple of 3 and >= 3")
    if noise_sd < 0:
        raise DataError("noise_sd must be >= 0")
    per = n // 3
    centers = 1.5 * np.stack([np.cos(_BLOB_ANGLES), np.sin(_BLOB_ANGLES)], axis=1)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x220022, n])
    parts = [centers[k] + rng.normal(0.0, noise_sd, size=(per, 2)) for k in range(3)]
    base = np.concatenate(parts, axis=0)
    features = _rotate_about_centroid(base, angle_deg)
    labels = np.repeat(np.arange(3, dtype=np.int64), per)
    return DomainDataset(
        features=features, labels=labels, domain_id=domain_id,
        num_classes=3, angle_deg=float(angle_deg), name=f"blobs@{angle_deg:g}",
    )


FAMILIES = {"moons": make_rotated_moons, "blobs": make_rotated_blobs}


@dataclass
class Split:
    """Index sets of one stratified split; empty arrays where not requested."""

    train: np.ndarray
    validation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def split_dataset(dataset: DomainDataset, fractions: tuple[float, ...], seed: int = 0) -> Split:
    """Stratified deterministic split into up to train/validation/test parts.

    Fractions must be positive and sum to 1 within 1e-9.  When a validation
    part is requested, every class must land at least one sample in it.
    """
    if not 1 <= len(fractions) <= 3:
        raise DataError("fractions must have 1 to 3 entries")
    if any(f <= 0 for f in fractions):
        raise DataError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must sum to 1")
    if dataset.labels is None:
        raise DataError("split_dataset needs labels for stratification")
    parts: list[list[int]] = [[] for _ in fractions]
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5B117])
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        counts = [int(np.floor(f * len(idx))) for f in fractions]
        short = len(idx) - sum(counts)
        for k in range(short):
            counts[k % len(counts)] += 1
        pos = 0
        for part, cnt in zip(parts, counts):
            part.extend(idx[pos:pos + cnt].tolist())
            pos += cnt
    arrays = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    while len(arrays) < 3:
        arrays.append(np.zeros(0, dtype=np.int64))
    split = Split(train=arrays[0], validation=arrays[1], test=arrays[2])
    if len(fractions) >= 2:
        val_labels = dataset.labels[split.validation]
        if len(np.unique(val_labels)) != dataset.num_classes:
            raise DataError("validation split is missing a class; not enough samples")
    return split


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic batch for (seed, step): shuffled epochs with wraparound.

    The sample stream is the concatenation of per-epoch permutations; batch
    `step` covers stream positions [step*b, (step+1)*b).  Within one epoch
    every sample appears exactly once.
    """
    if batch_size < 1 or batch_size > n:
        raise DataError(f"batch_size must be in [1, {n}]")
    if step < 0:
        raise DataError("step must be >= 0")
    start = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    pos = 0
    while pos < batch_size:
        epoch, offset = divmod(start + pos, n)
        perm = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xEB0C, epoch]).permutation(n)
        take = min(batch_size - pos, n - offset)
        out[pos:pos + take] = perm[offset:offset + take]
        pos += take
    return out


def batch_iter(dataset: DomainDataset, batch_size: int, seed: int, step: int):
    """Feature/label batch for a deterministic (seed, step) pair."""
    idx = batch_indices(dataset.n, batch_size, seed, step)
    labels = None if dataset.labels is None else dataset.labels[idx]
    return dataset.features[idx], labels


_HEADER_FEATURE = re.compile(r"^f(\d+)$")


def save_csv(dataset: DomainDataset, path) -> None:
    """Write `f0,...,f{d-1}[,label]` rows; floats use shortest exact repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{i}" for i in range(dataset.dim)]
        if dataset.labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            writer.writerow(row)


def load_csv(path, domain_id: int = 0, name: str = "") -> DomainDataset:
    """Read a dataset written by save_csv; malformed input carries line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("line 1: empty file")
        has_label = header and header[-1] == "label"
        feat_names = header[:-1] if has_label else header
        for i, col in enumerate(feat_names):
            m = _HEADER_FEATURE.match(col)
            if not m or int(m.group(1)) != i:
                raise ParseError(f"line 1: bad column name {col!r}, expected f{i}")
        dim = len(feat_names)
        if dim == 0:
            raise ParseError("line 1: no feature columns")
        feats: list[list[float]] = []
        labels: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + (1 if has_label else 0):
                raise ParseError(f"line {lineno}: expected {dim + has_label} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[:dim]]
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric feature value")
            if not all(np.isfinite(values)):
                raise ParseError(f"line {lineno}: non-finite feature value")
            feats.append(values)
            if has_label:
                try:
                    labels.append(int(row[dim]))
                except ValueError:
                    raise ParseError(f"line {lineno}: non-integer label")
        if not feats:
            raise ParseError("line 2: no data rows")
    return DomainDataset(
        features=np.asarray(feats, dtype=F32),
        labels=np.asarray(labels, dtype=np.int64) if has_label else None,
        domain_id=domain_id,
        name=name,
    )
