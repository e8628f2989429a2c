"""Variance-covariance regularization: statistics, losses and gradients.

Two routes compute the same objective. ``vcreg_terms_graph`` builds the loss
out of autodiff ops (the naive path); ``vcreg_gradient`` returns the
closed-form gradient with respect to the representation, which the fast path
injects during backward without ever forming the loss in the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import Tensor

Penalty = Literal["squared", "smooth_l1"]
Placement = Literal["final_only", "every_block", "every_downsample", "blocks_and_downsamples"]

ALPHA_GRID = (1.28, 0.64, 0.32, 0.16)
BETA_GRID = (0.16, 0.08, 0.04, 0.02, 0.01)


@dataclass(frozen=True)
class VCRegConfig:
    """Regularizer settings.

    ``penalty="auto"`` picks smooth-L1 for spatial sites and squared for
    vector sites.
    """

    alpha: float = 0.0
    beta: float = 0.0
    delta: float = 1.0
    epsilon: float = 1e-4
    penalty: Literal["auto", "squared", "smooth_l1"] = "auto"
    path: Literal["naive", "fast"] = "fast"
    placement: Placement = "every_block"
    mean_removal: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.penalty not in ("auto", "squared", "smooth_l1"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.path not in ("naive", "fast"):
            raise ValueError(f"unknown path {self.path!r}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")

    def penalty_for(self, spatial: bool) -> Penalty:
        if self.penalty == "auto":
            return "smooth_l1" if spatial else "squared"
        return self.penalty


PLACEMENTS = ("final_only", "every_block", "every_downsample", "blocks_and_downsamples")


@dataclass(frozen=True)
class FeatureBatch:
    """An N x D matrix of samples; ``origin`` is the (N0, C, H, W) source shape
    when the rows came from spatial flattening."""

    matrix: np.ndarray
    origin: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"feature batch must be 2-D, got shape {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def samples(self) -> int:
        return self.matrix.shape[0]

    @property
    def dims(self) -> int:
        return self.matrix.shape[1]

    @property
    def spatial(self) -> bool:
        return self.origin is not None


@dataclass(frozen=True)
class CovarianceStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dims(self) -> int:
        return self.cov.shape[0]


def _matrix(batch) -> np.ndarray:
    if isinstance(batch, FeatureBatch):
        return batch.matrix
    m = np.asarray(batch, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected an N x D matrix, got shape {m.shape}")
    return m


def _check_samples(n: int) -> None:
    if n < 2:
        raise ValueError(f"covariance needs at least 2 samples, got {n}")


def covariance_stats(batch) -> CovarianceStats:
    h = _matrix(batch)
    _check_samples(h.shape[0])
    mean = h.mean(axis=0)
    hc = h - mean
    cov = hc.T @ hc / (h.shape[0] - 1)
    return CovarianceStats(mean=mean, cov=cov)


def variance_loss(stats: CovarianceStats, epsilon: float) -> float:
    std = np.sqrt(np.diag(stats.cov) + epsilon)
    return float(np.maximum(0.0, 1.0 - std).mean())


def smooth_l1(x, delta: float):
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    ax = np.abs(x)
    out = np.where(ax <= delta, np.square(x), 2.0 * delta * ax - delta * delta)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x, delta: float):
    out = np.where(np.abs(x) <= delta, 2.0 * np.asarray(x, dtype=np.float64),
                   2.0 * delta * np.sign(x))
    return float(out) if np.ndim(out) == 0 else out


def _penalty_grad(cov: np.ndarray, penalty: Penalty, delta: float) -> np.ndarray:
    p = 2.0 * cov if penalty == "squared" else np.clip(2.0 * cov, -2.0 * delta, 2.0 * delta)
    np.fill_diagonal(p, 0.0)
    return p


def covariance_loss(stats: CovarianceStats, penalty: Penalty = "squared", delta: float = 1.0) -> float:
    d = stats.dims
    if d < 2:
        raise ValueError(f"covariance loss needs D >= 2, got {d}")
    off = stats.cov[~np.eye(d, dtype=bool)]
    vals = np.square(off) if penalty == "squared" else smooth_l1(off, delta)
    return float(np.sum(vals) / (d * (d - 1)))


def vcreg_loss(batch, cfg: VCRegConfig) -> float:
    spatial = isinstance(batch, FeatureBatch) and batch.spatial
    stats = covariance_stats(batch)
    return (cfg.alpha * variance_loss(stats, cfg.epsilon)
            + cfg.beta * covariance_loss(stats, cfg.penalty_for(spatial), cfg.delta))


def vcreg_value_and_gradient(batch, cfg: VCRegConfig, penalty: Penalty | None = None,
                             centered: bool = False):
    """Return ``(var_loss, cov_loss, grad)`` where ``grad`` is
    d(alpha * var + beta * cov)/dH for the N x D batch H.

    With the squared penalty and N < D the D x D covariance is never formed:
    H_c C = (H_c H_c^T) H_c / (N - 1), and the Frobenius norm of C equals that
    of the N x N Gram matrix over (N - 1). ``centered=True`` skips the
    column-mean subtraction for input that is already zero-mean.
    """
    h = _matrix(batch)
    n, d = h.shape
    _check_samples(n)
    if d < 2:
        raise ValueError(f"covariance loss needs D >= 2, got {d}")
    if penalty is None:
        penalty = cfg.penalty_for(isinstance(batch, FeatureBatch) and batch.spatial)
    hc = h if centered else h - h.mean(axis=0)
    var = np.einsum("ij,ij->j", hc, hc) / (n - 1)
    std = np.sqrt(var + cfg.epsilon)
    var_loss = float(np.maximum(0.0, 1.0 - std).mean())

    # per-column factor of the variance gradient; hinge subgradient is 0 at std == 1
    col = np.where(std < 1.0, -(cfg.alpha / (d * (n - 1))) / std, 0.0)
    scale = cfg.beta * 2.0 / (d * (d - 1) * (n - 1))
    if penalty == "squared" and n < d:
        gram = hc @ hc.T
        frob2 = np.vdot(gram, gram) / (n - 1) ** 2
        cov_loss = float((frob2 - np.dot(var, var)) / (d * (d - 1)))
        # H_c P with P = 2 (C - diag C)
        grad = gram @ hc
        grad *= 2.0 * scale / (n - 1)
        grad += hc * (col - 2.0 * scale * var)
    else:
        cov = hc.T @ hc / (n - 1)
        off = cov[~np.eye(d, dtype=bool)]
        vals = np.square(off) if penalty == "squared" else smooth_l1(off, cfg.delta)
        cov_loss = float(np.sum(vals) / (d * (d - 1)))
        grad = hc @ _penalty_grad(cov, penalty, cfg.delta)
        grad *= scale
        grad += hc * col
    return var_loss, cov_loss, grad


def vcreg_gradient(batch, cfg: VCRegConfig, penalty: Penalty | None = None) -> np.ndarray:
    return vcreg_value_and_gradient(batch, cfg, penalty)[2]


# --------------------------------------------------------------------------
# spatial adapter and mean removal


def spatial_flatten(x) -> FeatureBatch:
    """(N0, C, H, W) -> (N0*H*W, C); rows ordered by (sample, row, column)."""
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"spatial_flatten needs a 4-D tensor, got shape {a.shape}")
    n0, c, hh, ww = a.shape
    m = a.transpose(0, 2, 3, 1).reshape(n0 * hh * ww, c)
    return FeatureBatch(m, origin=(n0, c, hh, ww))


def spatial_unflatten(batch: FeatureBatch | np.ndarray, origin=None) -> np.ndarray:
    m = _matrix(batch)
    origin = origin if origin is not None else batch.origin
    n0, c, hh, ww = origin
    return np.ascontiguousarray(m.reshape(n0, hh, ww, c).transpose(0, 3, 1, 2))


def spatial_flatten_graph(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"spatial_flatten needs a 4-D tensor, got shape {x.shape}")
    n0, c, hh, ww = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n0 * hh * ww, c))


def mean_removal(batch) -> FeatureBatch:
    m = _matrix(batch)
    origin = batch.origin if isinstance(batch, FeatureBatch) else None
    return FeatureBatch(m - m.mean(axis=0), origin=origin)


def mean_removal_backward(g: np.ndarray) -> np.ndarray:
    return g - g.mean(axis=0)


def mean_removal_graph(z: Tensor) -> Tensor:
    return T.sub_broadcast(z, T.mean_over_axis(z, 0, keepdims=True))


# --------------------------------------------------------------------------
# naive path: the loss expressed in autodiff ops


def vcreg_terms_graph(z: Tensor, cfg: VCRegConfig, penalty: Penalty) -> tuple[Tensor, Tensor]:
    """Variance and covariance losses of an N x D tensor as graph nodes."""
    n, d = z.shape
    _check_samples(n)
    if d < 2:
        raise ValueError(f"covariance loss needs D >= 2, got {d}")
    zc = T.sub_broadcast(z, T.mean_over_axis(z, 0, keepdims=True))
    cov = T.mul(T.matmul(T.transpose(zc), zc), 1.0 / (n - 1))
    std = T.sqrt(T.add(T.diagonal(cov), cfg.epsilon))
    var_term = T.mean_over_axis(T.relu(T.sub_broadcast(1.0, std)), 0)
    off = T.mul(cov, 1.0 - np.eye(d))
    pen = T.square(off) if penalty == "squared" else T.smooth_l1(off, cfg.delta)
    cov_term = T.mul(T.sum(pen), 1.0 / (d * (d - 1)))
    return var_term, cov_term
