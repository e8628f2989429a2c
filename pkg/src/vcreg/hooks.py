"""Attach VCReg sites to a model's named boundaries.

Naive sites add ``alpha * var + beta * cov`` graph terms to the training
loss. Fast sites are identity nodes whose backward adds the closed-form
gradient of the same terms to whatever gradient arrives from downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from . import tensor as T
from .core import FeatureBatch, VCRegConfig
from .models import Model
from .tensor import Tensor


class PlacementError(ValueError):
    pass


class SiteDivergedError(FloatingPointError):
    def __init__(self, site: str, cause: Exception):
        super().__init__(f"non-finite values at VCReg site {site!r}: {cause}")
        self.site = site


def resolve_sites(model: Model, placement: str) -> list[str]:
    if placement == "final_only":
        return [model.penultimate]
    if placement == "every_block":
        sites = list(model.block_names)
    elif placement == "every_downsample":
        sites = list(model.downsample_names)
    elif placement == "blocks_and_downsamples":
        if not model.downsample_names:
            raise PlacementError(f"{model.kind} has no downsample layers for placement {placement!r}")
        wanted = set(model.block_names) | set(model.downsample_names)
        sites = [b for b in model.boundaries if b in wanted]
    else:
        raise PlacementError(f"unknown placement {placement!r}")
    if not sites:
        raise PlacementError(f"{model.kind} has no boundaries for placement {placement!r}")
    return sites


@dataclass
class SiteLoss:
    var: float = 0.0
    cov: float = 0.0


class VCRegModel:
    """A model whose forward runs through VCReg sites."""

    def __init__(self, model: Model, cfg: VCRegConfig):
        self.model = model
        self.cfg = cfg
        self.sites = resolve_sites(model, cfg.placement)
        self._site_set = set(self.sites)
        self.site_losses: dict[str, SiteLoss] = {s: SiteLoss() for s in self.sites}
        self._terms: list[tuple[str, Tensor, Tensor]] = []

    @property
    def params(self):
        return self.model.params

    # hook entry point --------------------------------------------------

    def _hook(self, name: str, h: Tensor) -> Tensor:
        if name not in self._site_set:
            return h
        if self.cfg.path == "naive":
            self._naive_site(name, h)
            return h
        return self._fast_site(name, h)

    def _naive_site(self, name: str, h: Tensor) -> None:
        spatial = h.ndim == 4
        try:
            z = core.spatial_flatten_graph(h) if spatial else h
            if self.cfg.mean_removal:
                z = core.mean_removal_graph(z)
            var, cov = core.vcreg_terms_graph(z, self.cfg, self.cfg.penalty_for(spatial))
        except T.NonFiniteError as exc:
            raise SiteDivergedError(name, exc) from exc
        self.site_losses[name] = SiteLoss(var.item(), cov.item())
        self._terms.append((name, var, cov))

    def _fast_site(self, name: str, h: Tensor) -> Tensor:
        cfg = self.cfg
        spatial = h.ndim == 4
        penalty = cfg.penalty_for(spatial)
        record = self.site_losses

        def inject(x: np.ndarray, g: np.ndarray) -> np.ndarray:
            batch = core.spatial_flatten(x) if spatial else FeatureBatch(x)
            if cfg.mean_removal:
                batch = core.mean_removal(batch)
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                try:
                    var, cov, gz = core.vcreg_value_and_gradient(
                        batch, cfg, penalty, centered=cfg.mean_removal)
                except FloatingPointError as exc:
                    raise SiteDivergedError(name, exc) from exc
            if not np.isfinite(gz).all():
                raise SiteDivergedError(name, FloatingPointError("gradient"))
            record[name] = SiteLoss(var, cov)
            if cfg.mean_removal:
                gz = core.mean_removal_backward(gz)
            if spatial:
                gz = core.spatial_unflatten(gz, batch.origin)
            return g + gz

        return T.custom_grad(h, inject)

    # public surface ----------------------------------------------------

    def forward_with_features(self, x):
        self._terms = []
        return self.model.forward_with_features(x, self._hook)

    def forward(self, x) -> Tensor:
        return self.forward_with_features(x)[0]

    __call__ = forward

    def regularizer(self) -> Tensor | None:
        """Sum over sites of the naive-path terms from the last forward."""
        total = None
        for _, var, cov in self._terms:
            term = T.add(T.mul(var, self.cfg.alpha), T.mul(cov, self.cfg.beta))
            total = term if total is None else T.add(total, term)
        return total

    def loss(self, logits: Tensor, labels) -> Tensor:
        sup = T.softmax_cross_entropy(logits, labels)
        reg = self.regularizer()
        return sup if reg is None else T.add(sup, reg)


def attach_vcreg_hooks(model: Model, cfg: VCRegConfig) -> VCRegModel:
    return VCRegModel(model, cfg)
