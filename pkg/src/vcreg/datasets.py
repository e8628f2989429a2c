"""Deterministic synthetic datasets, CSV I/O and stratified splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import rng


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    super_labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {x.shape} and labels {y.shape} disagree")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        if self.super_labels is not None:
            s = np.asarray(self.super_labels, dtype=np.int64)
            if s.shape != y.shape:
                raise ValueError("super_labels must align with labels")
            if s.size and s.min() < 0:
                raise ValueError("super_labels must be non-negative")
            mapping = sub_to_super(y, s)
            if mapping is None:
                raise ValueError("a subclass maps to more than one superclass")
            object.__setattr__(self, "super_labels", s)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx) -> "LabeledSet":
        sup = None if self.super_labels is None else self.super_labels[idx]
        return LabeledSet(self.inputs[idx], self.labels[idx], sup)

    def target(self, level: str) -> np.ndarray:
        if level == "label":
            return self.labels
        if level == "super_label":
            if self.super_labels is None:
                raise SchemaError("dataset has no super_labels")
            return self.super_labels
        raise SchemaError(f"unknown label level {level!r}")


def sub_to_super(labels: np.ndarray, super_labels: np.ndarray) -> dict[int, int] | None:
    """Subclass -> superclass map, or None when it is not a function."""
    mapping: dict[int, int] = {}
    for a, b in zip(labels.tolist(), super_labels.tolist()):
        if mapping.setdefault(a, b) != b:
            return None
    return mapping


def moon_curves(t: np.ndarray, gap: float) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free points on both moons for parameters t in [0, pi].

    The upper moon is the unit half-circle; the lower one is its reflection
    shifted right by 1 and down so that its highest point sits ``gap`` below
    the upper moon's lowest point.
    """
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), -np.sin(t) - gap], axis=1)
    return upper, lower


def two_moons(n: int = 400, gap: float = 0.5, noise_sd: float = 0.05, seed: int = 0) -> LabeledSet:
    if n <= 0 or n % 2:
        raise ValueError(f"n must be a positive even number, got {n}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper, lower = moon_curves(t, gap)
    x = np.concatenate([upper, lower])
    if noise_sd > 0:
        x = x + noise_sd * rng(seed).standard_normal(x.shape)
    y = np.repeat([0, 1], half)
    return LabeledSet(x, y)


def hierarchical_gaussians(
    n_super: int = 4,
    subs_per_super: int = 3,
    n_per_sub: int = 200,
    d: int = 16,
    super_spread: float = 3.0,
    sub_spread: float = 1.5,
    within_sd: float = 0.5,
    seed: int = 0,
) -> LabeledSet:
    """Gaussian blobs nested two levels deep.

    ``labels`` are subclass ids (super * subs_per_super + k); ``super_labels``
    the superclass ids.
    """
    for name, v in (("n_super", n_super), ("subs_per_super", subs_per_super),
                    ("n_per_sub", n_per_sub), ("d", d)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    gen = rng(seed)
    sub_centers = _draw_centers(gen, n_super, subs_per_super, d, super_spread, sub_spread)
    n_sub = n_super * subs_per_super
    labels = np.repeat(np.arange(n_sub), n_per_sub)
    x = sub_centers[labels] + within_sd * gen.standard_normal((labels.size, d))
    return LabeledSet(x, labels, labels // subs_per_super)


def _draw_centers(gen, n_super, subs_per_super, d, super_spread, sub_spread):
    super_centers = super_spread * gen.standard_normal((n_super, d))
    return (np.repeat(super_centers, subs_per_super, axis=0)
            + sub_spread * gen.standard_normal((n_super * subs_per_super, d)))


def hierarchical_centers(n_super, subs_per_super, d, super_spread, sub_spread, seed):
    """Subclass centers exactly as ``hierarchical_gaussians`` draws them."""
    return _draw_centers(rng(seed), n_super, subs_per_super, d, super_spread, sub_spread)


# --------------------------------------------------------------------------
# CSV


def load_csv(path: str | Path, features: Sequence[str], label: str,
             super_label: str | None = None) -> LabeledSet:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        index = {name: i for i, name in enumerate(header)}
        wanted = list(features) + [label] + ([super_label] if super_label else [])
        for name in wanted:
            if name not in index:
                raise SchemaError(f"{path}: missing column {name!r}")
        rows_x, rows_y, rows_s = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows_x.append([float(row[index[f]]) for f in features])
            except ValueError:
                bad = next(f for f in features if not _is_float(row[index[f]]))
                raise SchemaError(f"{path}:{lineno}: column {bad!r}: not a number: {row[index[bad]]!r}") from None
            rows_y.append(_parse_int(row[index[label]], path, lineno, label))
            if super_label:
                rows_s.append(_parse_int(row[index[super_label]], path, lineno, super_label))
    x = np.array(rows_x, dtype=np.float64).reshape(len(rows_x), len(features))
    return LabeledSet(x, np.array(rows_y, dtype=np.int64),
                      np.array(rows_s, dtype=np.int64) if super_label else None)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _parse_int(s: str, path, lineno, column) -> int:
    try:
        v = float(s)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: column {column!r}: not a number: {s!r}") from None
    if v != int(v):
        raise SchemaError(f"{path}:{lineno}: column {column!r}: not an integer label: {s!r}")
    return int(v)


def save_csv(data: LabeledSet, path: str | Path) -> list[str]:
    """Write ``x0..x{d-1},label[,super_label]``; floats use repr so reloads are exact."""
    x = data.inputs.reshape(len(data), -1)
    features = [f"x{i}" for i in range(x.shape[1])]
    header = features + ["label"] + (["super_label"] if data.super_labels is not None else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(float(v)) for v in x[i]] + [int(data.labels[i])]
            if data.super_labels is not None:
                row.append(int(data.super_labels[i]))
            w.writerow(row)
    return features


# --------------------------------------------------------------------------
# splits


def split(data: LabeledSet, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
          stratify: np.ndarray | None = None) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    """Stratified train/validation/test split, deterministic per seed.

    Per class, counts are allocated by largest remainder so each split gets
    its share of every class.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    strata = data.labels if stratify is None else np.asarray(stratify)
    gen = rng(seed)
    parts: list[list[int]] = [[], [], []]
    n_nonzero = int((fr > 0).sum())
    for c in np.unique(strata):
        idx = np.flatnonzero(strata == c)
        if idx.size < n_nonzero:
            raise ValueError(f"class {c} has {idx.size} samples, fewer than {n_nonzero} splits")
        idx = gen.permutation(idx)
        raw = fr * idx.size
        counts = np.floor(raw).astype(int)
        for k in np.argsort(-(raw - counts), kind="stable")[: idx.size - counts.sum()]:
            counts[k] += 1
        bounds = np.cumsum(counts)[:-1]
        for k, chunk in enumerate(np.split(idx, bounds)):
            parts[k].extend(chunk.tolist())
    return tuple(data.subset(np.sort(np.array(p, dtype=np.int64))) for p in parts)  # type: ignore[return-value]
