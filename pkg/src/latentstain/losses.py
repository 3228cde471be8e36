"""Training objectives: classification, feature alignment, and the two
biological regularizers, plus their weighted composition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidShapeError, Tensor


class InvalidLabelError(ValueError):
    pass


class InconsistentVariantError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Weights on the alignment and biological terms (published defaults)."""
    lambda_d: float = 10.0
    lambda_n: float = 5.0
    lambda_m: float = 5.0

    def __post_init__(self):
        for name in ("lambda_d", "lambda_n", "lambda_m"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidLabelError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    cls: float
    dist: float
    nuc: float
    mem: float
    total: float


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], clamped at 1e-8."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise InvalidShapeError(f"expected [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise InvalidShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidLabelError(f"labels outside [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    probs = ad.softmax(logits)
    picked = (probs * Tensor(onehot, dtype=logits.dtype)).sum(axes=(1,))
    return ad.neg(ad.log(picked)).mean()


def cosine_distill(z_hat: Tensor, z_real: Tensor, spatial: bool = False) -> Tensor:
    """Mean over the batch of 1 - cos(ẑ, z) on pooled feature vectors.

    ``z_real`` is detached (it is a target, never a gradient path). With
    ``spatial=True`` the cosine is taken per spatial location instead of on
    globally pooled vectors, then averaged.
    """
    if z_hat.shape != z_real.shape:
        raise InvalidShapeError(f"feature shapes differ: {z_hat.shape} vs {z_real.shape}")
    z_real = z_real.detach()
    if z_hat.ndim == 4 and not spatial:
        a = z_hat.mean(axes=(2, 3))
        b = z_real.mean(axes=(2, 3))
        channel_axis = (1,)
    elif z_hat.ndim == 4:
        a, b, channel_axis = z_hat, z_real, (1,)
    elif z_hat.ndim == 2:
        a, b, channel_axis = z_hat, z_real, (1,)
    else:
        raise InvalidShapeError(f"expected [N,C] or [N,C,h,w] features, got {z_hat.shape}")
    dot = (a * b).sum(axes=channel_axis)
    na = ad.clamp_min(ad.sqrt((a * a).sum(axes=channel_axis)), 1e-8)
    nb = ad.clamp_min(ad.sqrt((b * b).sum(axes=channel_axis)), 1e-8)
    return (1.0 - dot / (na * nb)).mean()


def nuclei_mse(k_hat: Tensor, k_gt: Tensor) -> Tensor:
    """Mean squared error over all map cells and the batch."""
    if k_hat.shape != k_gt.shape:
        raise InvalidShapeError(f"density shapes differ: {k_hat.shape} vs {k_gt.shape}")
    diff = k_hat - k_gt.detach()
    return (diff * diff).mean()


def membrane_dice(m_hat: Tensor, m_gt: Tensor, eps: float = 1.0) -> Tensor:
    """Soft Dice loss, summed over the whole batch before the ratio."""
    if m_hat.shape != m_gt.shape:
        raise InvalidShapeError(f"mask shapes differ: {m_hat.shape} vs {m_gt.shape}")
    m_gt = m_gt.detach()
    inter = (m_hat * m_gt).sum()
    denom = m_hat.sum() + m_gt.sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def total_loss(cls: Tensor, weights: LossWeights, flags,
               dist: Tensor | None = None, nuc: Tensor | None = None,
               mem: Tensor | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted composite objective; terms present iff their flag is on."""
    checks = ((flags.hallucination, dist, "dist"),
              (flags.nuclei_aux, nuc, "nuc"),
              (flags.membrane_aux, mem, "mem"))
    for enabled, term, name in checks:
        if enabled and term is None:
            raise InconsistentVariantError(f"flag for {name!r} is on but the term is missing")
        if not enabled and term is not None:
            raise InconsistentVariantError(f"term {name!r} given but its flag is off")
    total = cls
    if dist is not None:
        total = total + weights.lambda_d * dist
    if nuc is not None:
        total = total + weights.lambda_n * nuc
    if mem is not None:
        total = total + weights.lambda_m * mem
    breakdown = LossBreakdown(
        cls=cls.item(),
        dist=dist.item() if dist is not None else 0.0,
        nuc=nuc.item() if nuc is not None else 0.0,
        mem=mem.item() if mem is not None else 0.0,
        total=total.item(),
    )
    return total, breakdown
