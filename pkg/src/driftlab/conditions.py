"""Ablation conditions: which feature map the drift sees and which loss terms are on.

Every condition maps to exactly one feature function over generated
latents. The decoder-feature family differs only in where (if anywhere) the
gradient path from the drift loss back to the latent is cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .drift import DEFAULT_TAUS
from .models import Adam, Module, _glorot

FEATURE_KINDS = ("decoder", "latent", "random", "external", "external-guided")
GRADIENT_PATHS = ("open", "detached", "stopgrad")


@dataclass(frozen=True)
class AblationCondition:
    id: str
    feature: str = "decoder"
    gradient: str = "open"
    taus: tuple[float, ...] = DEFAULT_TAUS
    zdiv: bool = True
    cfg: bool = True
    normalization: str = "cross"
    drift: bool = True

    def __post_init__(self):
        if self.feature not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature!r}")
        if self.gradient not in GRADIENT_PATHS:
            raise ValueError(f"unknown gradient path {self.gradient!r}")

    @property
    def family(self) -> str:
        if not self.drift or self.gradient != "open":
            return "severed"
        return "coupled" if self.feature == "decoder" else "proxy"


_BASE = AblationCondition("coupled-default")
CONDITIONS: dict[str, AblationCondition] = {
    c.id: c
    for c in (
        _BASE,
        replace(_BASE, id="coupled-single-tau", taus=(1.0,)),
        replace(_BASE, id="coupled-no-zdiv", zdiv=False),
        replace(_BASE, id="latent-space", feature="latent"),
        replace(_BASE, id="random-feature", feature="random"),
        replace(_BASE, id="external-feature", feature="external"),
        replace(_BASE, id="external-feature-guided", feature="external-guided"),
        replace(_BASE, id="detached-decoder", gradient="detached"),
        replace(_BASE, id="stop-grad-decoder", gradient="stopgrad"),
        replace(_BASE, id="no-cfg", cfg=False),
        replace(_BASE, id="y-only-norm", normalization="row"),
        replace(_BASE, id="no-cross-norm", normalization="none"),
        replace(_BASE, id="no-drift", drift=False),
    )
}


def get_condition(name: str) -> AblationCondition:
    try:
        return CONDITIONS[name]
    except KeyError:
        raise KeyError(f"unknown condition {name!r}; choose from {sorted(CONDITIONS)}") from None


class RandomFeatureMap(Module):
    """Fixed random tanh projection of the standardized latent."""

    name = "random-feature"

    def __init__(self, d_z: int, d_out: int, z_mean, z_std, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__({"w": rng.normal(0.0, 1.0 / math.sqrt(d_z), (d_z, d_out)), "b": rng.normal(0.0, 0.1, d_out)})
        self.z_mean, self.z_std = np.asarray(z_mean), np.asarray(z_std)
        self.freeze()

    def __call__(self, z) -> Tensor:
        x = (ad.as_tensor(z) - self.z_mean) / self.z_std
        return ad.tanh(x @ self["w"] + self["b"])


class ExternalFeatureNet(Module):
    """Two-layer net on the standardized latent; its hidden layer is the feature map.

    The property head regresses the standardized surrogate property. The
    guided variant also reconstructs the full latent from a randomly masked
    copy, so the hidden layer carries general latent information as well.
    """

    name = "external-feature"

    def __init__(self, d_z: int, d_hidden: int, z_mean, z_std, seed: int = 0, reconstruct: bool = False):
        rng = np.random.default_rng(seed)
        params = {
            "w1": _glorot(rng, d_z, d_hidden),
            "b1": np.zeros(d_hidden),
            "w_prop": _glorot(rng, d_hidden, 1),
            "b_prop": np.zeros(1),
        }
        if reconstruct:
            params["w_rec"] = _glorot(rng, d_hidden, d_z)
            params["b_rec"] = np.zeros(d_z)
        super().__init__(params)
        self.reconstruct = reconstruct
        self.z_mean, self.z_std = np.asarray(z_mean), np.asarray(z_std)

    def __call__(self, z) -> Tensor:
        x = (ad.as_tensor(z) - self.z_mean) / self.z_std
        return ad.tanh(x @ self["w1"] + self["b1"])

    def fit(self, z: np.ndarray, prop: np.ndarray, rng: np.random.Generator, steps: int = 600, batch: int = 128, lr: float = 3e-3):
        """Train on cached latents, then freeze. Returns the final training loss."""
        y = (prop - prop.mean()) / (prop.std() or 1.0)
        opt = Adam(self.parameters(), lr)
        loss_value = math.nan
        for _ in range(steps):
            idx = rng.integers(0, len(z), size=batch)
            zb = z[idx]
            if self.reconstruct:
                keep = rng.random(zb.shape) > 0.3
                zin = np.where(keep, zb, self.z_mean)
            else:
                zin = zb
            h = self(zin)
            err = h @ self["w_prop"] + self["b_prop"] - y[idx, None]
            loss = ad.mean(err * err)
            if self.reconstruct:
                rec = h @ self["w_rec"] + self["b_rec"] - (zb - self.z_mean) / self.z_std
                loss = loss + ad.mean(rec * rec)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            loss_value = loss.item()
        self.freeze()
        return loss_value


def gradient_path(feature_fn: Callable[[Tensor], Tensor], path: str) -> Callable[[Tensor], Tensor]:
    """Wrap a feature map so the drift gradient is open, cut before it, or cut after it."""
    if path == "open":
        return feature_fn
    if path == "detached":
        return lambda z: feature_fn(ad.stop_gradient(z))
    if path == "stopgrad":
        return lambda z: ad.stop_gradient(feature_fn(z))
    raise ValueError(f"unknown gradient path {path!r}")
