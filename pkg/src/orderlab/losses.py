"""Cross-modal alignment and ordinal-aware contrastive objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class BatchTooSmall(ValueError):
    pass


class AlphaOutOfRange(ValueError):
    pass


class DegenerateTargets(UserWarning):
    pass


@dataclass
class LossConfig:
    tau: float = 0.1
    include_positive_in_denominator: bool = False
    distance: str = "l2"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.distance not in ("l2", "l1"):
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass
class LossPair:
    l_align: float
    l_order: float


def _directional_align(hq: Tensor, hk: Tensor, cfg: LossConfig) -> Tensor:
    """-sum_i log( exp(q_i.k_i/tau) / sum_{j!=i} [exp(q_i.k_j/tau) + exp(q_i.q_j/tau)] )."""
    n = hq.shape[0]
    cross = (hq @ hk.T) * (1.0 / cfg.tau)
    intra = (hq @ hq.T) * (1.0 / cfg.tau)
    logits = ad.concat([cross, intra], axis=1)
    off = ~np.eye(n, dtype=bool)
    mask = np.concatenate([off, off], axis=1)
    if cfg.include_positive_in_denominator:
        mask[:, :n] |= np.eye(n, dtype=bool)
    denom = ad.log_sum_exp(logits, axis=1, mask=mask)
    pos = ad.tsum(cross * np.eye(n), axis=1)
    return -ad.tsum(pos - denom)


def align_loss(hv: Tensor, ht: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Mean of the image->tabular and tabular->image contrastive terms.

    The denominator of each term sums over the other samples' cross-modal
    and same-modality similarities; the positive pair itself is excluded
    unless ``cfg.include_positive_in_denominator`` is set.
    """
    cfg = cfg or LossConfig()
    hv, ht = ad.as_tensor(hv), ad.as_tensor(ht)
    if hv.shape != ht.shape:
        raise ad.ShapeMismatch(f"feature batches {hv.shape} vs {ht.shape}")
    if hv.shape[0] < 2:
        raise BatchTooSmall("alignment needs at least 2 pairs")
    return (_directional_align(hv, ht, cfg) + _directional_align(ht, hv, cfg)) * 0.5


def target_distances(targets: np.ndarray, metric: str = "l2") -> np.ndarray:
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    diff = y[:, None, :] - y[None, :, :]
    if metric == "l1":
        return np.abs(diff).sum(-1)
    return np.sqrt((diff**2).sum(-1))


def order_mask(dist: np.ndarray) -> np.ndarray:
    """mask[i, j, k] is True when k != i and d(i, k) >= d(i, j)."""
    n = dist.shape[0]
    mask = dist[:, None, :] >= dist[:, :, None]
    mask &= ~np.eye(n, dtype=bool)[:, None, :]
    return mask


def order_loss(h: Tensor, targets: np.ndarray, cfg: LossConfig | None = None) -> Tensor:
    """Rank-based contrastive loss over one modality.

    For every anchor i and positive j != i, the negatives are all k != i at
    least as far from i in target space as j is (ties included). Averaged
    over the N(N-1) ordered pairs. Only the ordering of target distances
    matters.
    """
    cfg = cfg or LossConfig()
    h = ad.as_tensor(h)
    n = h.shape[0]
    if n < 2:
        raise BatchTooSmall("order loss needs at least 2 samples")
    y = np.asarray(targets, dtype=float)
    if np.all(y == y.reshape(n, -1)[0]):
        warnings.warn("all targets equal; order loss is constant", DegenerateTargets, stacklevel=2)
    dist = target_distances(y, cfg.distance)
    logits = (h @ h.T) * (1.0 / cfg.tau)                 # (N, N): s_ik
    mask = order_mask(dist)                              # (N, N, N): [i, j, k]
    expanded = ad.reshape(logits, (n, 1, n))
    denom = ad.log_sum_exp(expanded, axis=2, mask=mask)  # broadcast over j
    pair = ~np.eye(n, dtype=bool)
    terms = (logits - denom) * pair
    return ad.tsum(terms) * (-1.0 / (n * (n - 1)))


def order_loss_both(hv: Tensor, ht: Tensor, targets: np.ndarray, cfg: LossConfig | None = None) -> Tensor:
    return order_loss(hv, targets, cfg) + order_loss(ht, targets, cfg)


def check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def combined_loss(hv: Tensor, ht: Tensor, targets: np.ndarray, alpha: float,
                  cfg: LossConfig | None = None) -> tuple[Tensor, LossPair]:
    check_alpha(alpha)
    l_align = align_loss(hv, ht, cfg)
    l_order = order_loss_both(hv, ht, targets, cfg)
    total = l_order * alpha + l_align * (1.0 - alpha)
    return total, LossPair(l_align.item(), l_order.item())
