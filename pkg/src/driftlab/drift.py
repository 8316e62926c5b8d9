"""Kernel drift objective: scores, cross-normalized weights, drift field, losses.

Feature arrays are ``(rows, D)``. Generated features may be :class:`Tensor`
objects inside a differentiation graph; reference features are constants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

DEFAULT_TAUS = (0.5, 1.0, 2.0)
D_GLOBAL_FLOOR = 1e-8
LAMBDA_FLOOR = 1e-8
NORMALIZATIONS = ("cross", "row", "none")


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def d_global(positives, generated, uncond=None) -> float:
    """Mean Euclidean distance over all unordered pairs of the pooled feature rows."""
    parts = [np.atleast_2d(_values(p)) for p in (positives, generated, uncond) if p is not None and len(p)]
    if not parts:
        raise ValueError("d_global: empty drift group")
    pooled = np.concatenate(parts, axis=0)
    n = len(pooled)
    if n < 2:
        raise ValueError("d_global: need at least two feature rows")
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    iu = np.triu_indices(n, k=1)
    value = float(dist[iu].mean())
    return value if value > 0 else D_GLOBAL_FLOOR


def pairwise_distances(a, b) -> Tensor:
    """Differentiable (N, M) Euclidean distance matrix."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    n, m, d = a.shape[0], b.shape[0], a.shape[1]
    diff = ad.broadcast(a.reshape(n, 1, d), (n, m, d)) - ad.broadcast(b.reshape(1, m, d), (n, m, d))
    return ad.norm(diff, axis=-1)


def score_matrix(gen_feats, ref_feats, d_glob: float) -> Tensor:
    if not d_glob > 0:
        raise ValueError("score_matrix: d_global must be positive")
    return ad.scale(pairwise_distances(gen_feats, ref_feats), -1.0 / d_glob)


def normalize_logits(logits, mode: str = "cross") -> Tensor:
    """Kernel weights from temperature-scaled logits.

    ``cross`` is the geometric mean of row- and column-softmax; ``row`` keeps
    the row softmax only; ``none`` is ``exp(logits) / M`` with no normalization.
    """
    logits = ad.as_tensor(logits)
    if mode == "cross":
        return ad.sqrt(ad.softmax(logits, axis=1) * ad.softmax(logits, axis=0))
    if mode == "row":
        return ad.softmax(logits, axis=1)
    if mode == "none":
        return ad.scale(ad.exp(logits), 1.0 / logits.shape[1])
    raise ValueError(f"unknown normalization {mode!r}")


def cross_normalize(S, tau: float, mode: str = "cross") -> Tensor:
    if not tau > 0:
        raise ValueError("cross_normalize: tau must be positive")
    return normalize_logits(ad.scale(S, 1.0 / tau), mode)


def drift_field(W, gen_feats, ref_feats) -> Tensor:
    """V_i = sum_j W_ij (ref_j - gen_i)."""
    W, gen = ad.as_tensor(W), ad.as_tensor(gen_feats)
    return W @ ad.as_tensor(ref_feats) - ad.broadcast(W.sum(axis=1, keepdims=True), gen.shape) * gen


def guidance_weight(alpha: float, n_gen: int, n_unc: int) -> float:
    if n_unc < 1 or n_gen < 1:
        raise ValueError("guidance_weight: group sizes must be >= 1")
    return max(0.0, (alpha - 1.0) * (n_gen - 1) / n_unc)


def uncond_logits(gen_feats, uncond_feats, tau: float, d_glob: float, w_alpha: float) -> Tensor:
    """Distance logits for unconditional negatives, shifted by log of the guidance weight."""
    if not w_alpha > 0:
        raise ValueError("uncond_logits: w_alpha must be positive; omit the branch when it is zero")
    dist = pairwise_distances(gen_feats, uncond_feats)
    return ad.scale(dist, -1.0 / (tau * d_glob)) + math.log(w_alpha)


def sample_alpha(u: float, alpha_max: float = 4.0) -> float:
    """Inverse CDF of p(alpha) proportional to alpha^-3 on [1, alpha_max]."""
    if not 0.0 <= u <= 1.0:
        raise ValueError("sample_alpha: u must lie in [0, 1]")
    return (1.0 - u * (1.0 - alpha_max**-2)) ** -0.5


@dataclass
class DriftSettings:
    taus: tuple[float, ...] = DEFAULT_TAUS
    normalization: str = "cross"
    cfg: bool = True
    uncond_repel: bool = False
    lambda_mode: str = "fixed"

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        if not self.taus:
            raise ValueError("at least one temperature is required")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.lambda_mode not in ("fixed", "batch"):
            raise ValueError(f"unknown lambda mode {self.lambda_mode!r}")


@dataclass
class DriftScales:
    lambdas: dict[float, float] = field(default_factory=dict)
    mode: str = "fixed"

    def __post_init__(self):
        for tau, lam in self.lambdas.items():
            if not (math.isfinite(lam) and lam > 0):
                raise ValueError(f"lambda for tau={tau} must be finite and positive, got {lam}")

    def __getitem__(self, tau: float) -> float:
        return self.lambdas[float(tau)]


@dataclass
class DriftGroup:
    """One conditioning group.

    ``generated`` holds the generated latents (a tensor in the training graph);
    ``positives`` and ``uncond`` are reference rows already mapped into the
    drift feature space.
    """

    generated: Tensor | np.ndarray
    positives: np.ndarray
    uncond: np.ndarray | None = None
    alpha: float = 1.0
    taus: tuple[float, ...] = DEFAULT_TAUS

    def __post_init__(self):
        if len(self.positives) < 1:
            raise ValueError("a drift group needs at least one positive reference")

    @property
    def n_gen(self) -> int:
        return len(self.generated)

    def weight(self, cfg: bool = True) -> float:
        if not cfg or self.alpha <= 1.0:
            return 0.0
        if self.uncond is None or len(self.uncond) == 0:
            raise ValueError("guided group (alpha > 1 with CFG on) needs unconditional references")
        return guidance_weight(self.alpha, self.n_gen, len(self.uncond))


def drift_components(gen_feats, group: DriftGroup, settings: DriftSettings) -> dict[float, Tensor]:
    """Per-temperature drift fields V_tau for generated features of one group."""
    w = group.weight(settings.cfg)
    unc = group.uncond if w > 0 else None
    d = d_global(group.positives, gen_feats, unc)
    n_pos = len(group.positives)
    refs = group.positives if unc is None else np.concatenate([group.positives, unc], axis=0)
    out = {}
    for tau in group.taus:
        logits = ad.scale(score_matrix(gen_feats, group.positives, d), 1.0 / tau)
        if unc is not None:
            logits = ad.concat([logits, uncond_logits(gen_feats, unc, tau, d, w)], axis=1)
        W = normalize_logits(logits, settings.normalization)
        if unc is not None and settings.uncond_repel:
            V = drift_field(W[:, :n_pos], gen_feats, group.positives) - drift_field(W[:, n_pos:], gen_feats, unc)
        else:
            V = drift_field(W, gen_feats, refs)
        out[tau] = V
    return out


def calibrate_lambda(cal_groups: Sequence[DriftGroup], tau: float, settings: DriftSettings | None = None) -> float:
    """lambda_tau = sqrt(mean_i ||V_tau,i||^2 / D) over every generated row of every group.

    Here each group's ``generated`` field holds feature rows (e.g. cached
    training features standing in for generated samples).
    """
    if not cal_groups:
        raise ValueError("calibrate_lambda: need at least one calibration group")
    settings = settings or DriftSettings()
    sq, dim = [], None
    for g in cal_groups:
        g = DriftGroup(_values(g.generated), g.positives, g.uncond, g.alpha, (tau,))
        V = drift_components(g.generated, g, settings)[tau].value
        dim = V.shape[1]
        sq.append((V * V).sum(axis=1))
    lam = math.sqrt(float(np.concatenate(sq).mean()) / dim)
    if not lam > 0:
        log.warning("all calibration drifts are zero for tau=%s; flooring lambda at %g", tau, LAMBDA_FLOOR)
        return LAMBDA_FLOOR
    return lam


def drift_target(gen_feats, group: DriftGroup, scales: DriftScales, settings: DriftSettings) -> np.ndarray:
    """Sum over temperatures of V_tau / lambda_tau (values only)."""
    comps = drift_components(gen_feats, group, settings)
    total = np.zeros(_values(gen_feats).shape)
    for tau in group.taus:
        V = comps[tau].value
        if settings.lambda_mode == "batch":
            lam = math.sqrt(float((V * V).sum(axis=1).mean()) / V.shape[1])
            lam = lam if lam > 0 else LAMBDA_FLOOR
        else:
            lam = scales[tau]
        total = total + V / lam
    return total


def drift_loss(
    group: DriftGroup,
    scales: DriftScales,
    feature_fn: Callable[[Tensor], Tensor],
    settings: DriftSettings | None = None,
) -> Tensor:
    """||phi(z) - sg(phi(z) + sum_tau V_tau / lambda_tau)||^2 summed over rows, divided by N_g."""
    settings = settings or DriftSettings()
    if not group.taus:
        raise ValueError("drift_loss: empty temperature set")
    feats = feature_fn(ad.as_tensor(group.generated))
    target = ad.stop_gradient(feats + drift_target(feats, group, scales, settings))
    residual = feats - target
    return ad.scale(ad.sum_(residual * residual), 1.0 / group.n_gen)


def zdiv_loss(z, k: int = 5, margin: float = 3.0) -> Tensor:
    """Mean over samples of the average hinge max(0, m - ||z_i - z_nn||) over the K nearest neighbors."""
    z = ad.as_tensor(z)
    n = z.shape[0]
    if n < 2:
        raise ValueError("zdiv_loss: need at least two samples")
    k = min(k, n - 1)
    dist = pairwise_distances(z, z)
    d = dist.value.copy()
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n))
    np.put_along_axis(mask, nn, 1.0, axis=1)
    hinge = ad.relu(ad.scale(dist, -1.0) + margin) * mask
    return ad.scale(ad.sum_(hinge), 1.0 / (n * k))


def total_loss(drift, zdiv, lambda_z: float = 2.0) -> Tensor:
    return ad.as_tensor(drift) + ad.scale(zdiv, lambda_z)


def scales_from_mapping(lambdas: Mapping[float, float], mode: str = "fixed") -> DriftScales:
    return DriftScales({float(k): float(v) for k, v in lambdas.items()}, mode)
