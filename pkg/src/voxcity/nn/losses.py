"""Loss primitives: clamped BCE on logits, L1, diagonal-Gaussian KL."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor, as_tensor

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class LossWeights:
    """Weighting factors of the reconstruction objectives."""

    occupancy: float = 20.0
    normal: float = 50.0
    kl: float = 0.03
    color: float = 50.0

    def __post_init__(self):
        if min(self.occupancy, self.normal, self.kl, self.color) < 0:
            raise ValueError("loss weights must be non-negative")


def bce_with_logits(logits: Tensor, targets, clamp=LOGIT_CLAMP) -> Tensor:
    """Mean binary cross-entropy on logits, clamped to avoid NaN at saturation."""
    l = as_tensor(logits).clip(-clamp, clamp)
    t = as_tensor(targets)
    return (l.softplus() - l * t).mean()


def l1_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean absolute error; optional per-row weights (e.g. untouched masks)."""
    diff = (as_tensor(pred) - as_tensor(target)).abs()
    if weights is not None:
        w = as_tensor(weights)
        if w.ndim == 1 and diff.ndim == 2:
            w = w.reshape(-1, 1)
        denom = max(float(w.data.sum()) * (diff.data.size / max(w.data.size, 1)), 1e-12)
        return (diff * w).sum() * (1.0 / denom)
    return diff.mean()


def gaussian_kl(mu: Tensor, logvar: Tensor, reduce="mean") -> Tensor:
    """KL(N(mu, e^logvar) || N(0, I)), elementwise closed form.

    Per element: -(1 + logvar - mu^2 - e^logvar) / 2; 'mean' averages over
    all elements, 'sum' totals them, 'none' returns the elementwise map.
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    elem = (mu * mu + logvar.exp() - logvar - 1.0) * 0.5
    if reduce == "mean":
        return elem.mean()
    if reduce == "sum":
        return elem.sum()
    return elem
