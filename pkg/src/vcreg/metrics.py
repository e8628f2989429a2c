"""Representation diagnostics: CDNV, nearest-class-center agreement, linear
probes and decision-boundary margins."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.special import logsumexp


class DegenerateMetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# collapse metrics


def total_variance(s: np.ndarray) -> float:
    """Mean squared distance of rows to their mean (trace of the covariance
    with a 1/n normalizer)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise DegenerateMetricError("feature set must be a non-empty 2-D matrix")
    return float(np.mean(np.sum((s - s.mean(axis=0)) ** 2, axis=1)))


def cdnv(s1: np.ndarray, s2: np.ndarray) -> float:
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if s1.ndim != 2 or s2.ndim != 2 or s1.shape[1] != s2.shape[1]:
        raise ValueError(f"feature sets must share a width, got {s1.shape} and {s2.shape}")
    dist2 = float(np.sum((s1.mean(axis=0) - s2.mean(axis=0)) ** 2))
    if dist2 == 0.0:
        raise DegenerateMetricError("class means coincide; CDNV is undefined")
    return (total_variance(s1) + total_variance(s2)) / (2.0 * dist2)


def class_sets(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): features[labels == c] for c in np.unique(labels)}


def cdnv_aggregate(sets: dict[int, np.ndarray]) -> float:
    """Mean CDNV over all unordered class pairs."""
    keys = sorted(sets)
    if len(keys) < 2:
        raise DegenerateMetricError("need at least 2 classes")
    vals = [cdnv(sets[a], sets[b]) for a, b in itertools.combinations(keys, 2)]
    return float(np.mean(vals))


def class_means(features: np.ndarray, labels: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    means = np.empty((k, features.shape[1]))
    for c in range(k):
        rows = features[labels == c]
        if rows.shape[0] == 0:
            raise DegenerateMetricError(f"class {c} has no samples")
        means[c] = rows.mean(axis=0)
    return means


def ncc_predict(features: np.ndarray, means: np.ndarray) -> np.ndarray | int:
    """Index of the nearest class mean; ties go to the lowest index."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    d2 = ((f[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)  # argmin returns the first minimum
    return int(pred[0]) if single else pred


def ncc_agreement(network_pred: np.ndarray, features: np.ndarray, means: np.ndarray) -> float:
    """Fraction of samples where the network's argmax matches the NCC."""
    return float(np.mean(ncc_predict(features, means) == np.asarray(network_pred)))


def ncc_accuracy(features: np.ndarray, labels: np.ndarray, means: np.ndarray) -> float:
    return float(np.mean(ncc_predict(features, means) == np.asarray(labels)))


# --------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    accuracy: float
    l2: float
    accuracies: dict[float, float]


def _fit_softmax(x: np.ndarray, y: np.ndarray, k: int, l2: float, max_iter: int) -> np.ndarray:
    n, p = x.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    xb = np.hstack([x, np.ones((n, 1))])

    def objective(w_flat):
        w = w_flat.reshape(p + 1, k)
        z = xb @ w
        lse = logsumexp(z, axis=1)
        loss = np.mean(lse - np.sum(z * onehot, axis=1)) + 0.5 * l2 * np.sum(w[:-1] ** 2)
        prob = np.exp(z - lse[:, None])
        grad = xb.T @ (prob - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros((p + 1) * k), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    return res.x.reshape(p + 1, k)


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    l2_grid: Sequence[float] = (1e-4, 1e-3, 1e-2, 1e-1),
    held_out: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
    max_iter: int = 500,
) -> ProbeResult:
    """Multinomial logistic regression on frozen features.

    Fits one probe per L2 strength and returns the best held-out accuracy.
    Without ``held_out`` a stratified 80/20 split of the inputs is used.
    Features are standardized with training-split statistics.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    if held_out is None:
        from .datasets import LabeledSet, split

        tr, _, te = split(LabeledSet(x, y), (0.8, 0.0, 0.2), seed=seed)
        x_tr, y_tr, x_te, y_te = tr.inputs, tr.labels, te.inputs, te.labels
    else:
        x_tr, y_tr = x, y
        x_te, y_te = np.asarray(held_out[0], dtype=np.float64), np.asarray(held_out[1])
    k = int(max(y_tr.max(), y_te.max())) + 1
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    accs = {}
    for l2 in l2_grid:
        w = _fit_softmax(x_tr, y_tr, k, float(l2), max_iter)
        pred = (np.hstack([x_te, np.ones((len(x_te), 1))]) @ w).argmax(axis=1)
        accs[float(l2)] = float(np.mean(pred == y_te))
    best = max(accs, key=lambda l2: (accs[l2], -l2))
    return ProbeResult(accuracy=accs[best], l2=best, accuracies=accs)


# --------------------------------------------------------------------------
# decision boundaries


@dataclass
class BoundaryGrid:
    xs: np.ndarray
    ys: np.ndarray
    pred: np.ndarray  # (len(ys), len(xs)) class ids
    logit_margin: np.ndarray  # top1 - top2 logit per cell

    @property
    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    @property
    def step(self) -> float:
        return float(max(self.xs[1] - self.xs[0], self.ys[1] - self.ys[0]))

    def to_csv(self, path: str | Path) -> None:
        pts = self.points
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "pred_class", "margin"])
            for (x, y), c, m in zip(pts, self.pred.ravel(), self.logit_margin.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), int(c), repr(float(m))])


def decision_boundary_grid(
    logits_fn: Callable[[np.ndarray], np.ndarray],
    extents: tuple[float, float, float, float],
    resolution: int | tuple[int, int] = 200,
) -> BoundaryGrid:
    """Evaluate a 2-D classifier on a regular grid covering
    ``(x_min, x_max, y_min, y_max)`` inclusive of the edges."""
    rx, ry = (resolution, resolution) if np.isscalar(resolution) else resolution
    if rx < 2 or ry < 2:
        raise ValueError("grid resolution must be >= 2 per axis")
    x0, x1, y0, y1 = extents
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate extents {extents}")
    xs, ys = np.linspace(x0, x1, int(rx)), np.linspace(y0, y1, int(ry))
    gx, gy = np.meshgrid(xs, ys)
    logits = np.asarray(logits_fn(np.stack([gx.ravel(), gy.ravel()], axis=1)))
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("logits_fn must return (n, K>=2) logits")
    top2 = np.sort(logits, axis=1)[:, -2:]
    return BoundaryGrid(xs, ys, logits.argmax(axis=1).reshape(gx.shape),
                        (top2[:, 1] - top2[:, 0]).reshape(gx.shape))


def boundary_margin(grid: BoundaryGrid, points: np.ndarray, labels: np.ndarray) -> float:
    """Smallest distance from a labeled point to a grid cell predicting a
    different class. Accuracy is limited by the grid step."""
    cells = grid.points
    pred = grid.pred.ravel()
    labels = np.asarray(labels)
    best = np.inf
    for c in np.unique(labels):
        other = cells[pred != c]
        if other.shape[0] == 0:
            raise DegenerateMetricError(f"no grid cell predicts a class other than {c}")
        dist, _ = cKDTree(other).query(points[labels == c])
        best = min(best, float(dist.min()))
    return best


def default_extents(points: np.ndarray, pad: float = 0.5) -> tuple[float, float, float, float]:
    lo, hi = points.min(axis=0) - pad, points.max(axis=0) + pad
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def binomial_band(n: int, p: float, sigmas: float = 3.0) -> tuple[float, float]:
    sd = np.sqrt(p * (1 - p) / n)
    return p - sigmas * sd, p + sigmas * sd

