"""Validation-guided two-objective gradient combination.

With two objectives the update direction ``h = b1*g1 + (1-b1)*g2`` makes
every LP objective and constraint affine in ``b1 in [0, 1]``, so the
feasible set is an interval that can be computed exactly and the optimum is
one of its endpoints. Objective 1 is the ordinal loss, objective 2 the
alignment loss; ``gv`` is the alignment gradient on held-out data.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, align_loss, check_alpha, order_loss_both
from .optim import flatten, unflatten

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "branch", "beta1", "l_order", "l_align", "l_val"]


class InfeasibleLP(RuntimeError):
    pass


@dataclass
class ParetoConfig:
    epsilon: float = 1e-3
    val_batch: int | None = None
    tie_break: str = "maxmin"
    full_val_gradient: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.tie_break not in ("maxmin", "midpoint"):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")


@dataclass
class ParetoStep:
    g1: np.ndarray
    g2: np.ndarray
    gv: np.ndarray
    beta: tuple[float, float]
    direction: np.ndarray
    branch: str
    constraints: list[tuple[int, float]] = field(default_factory=list)
    feasible: bool = True
    l_order: float = math.nan
    l_align: float = math.nan
    l_val: float = math.nan

    def constraint_slack(self) -> list[float]:
        """h.g_j - rhs for every constraint of the solved LP (>= 0 when satisfied)."""
        grads = (self.g1, self.g2)
        return [float(self.direction @ grads[j]) - rhs for j, rhs in self.constraints]


def _feasible_interval(gram: np.ndarray, constraints: list[tuple[int, float]]) -> tuple[float, float]:
    """Interval of b1 with b1*<g1,g_j> + (1-b1)*<g2,g_j> >= rhs for each (j, rhs)."""
    lo, hi = 0.0, 1.0
    for j, rhs in constraints:
        a, b = gram[0, j], gram[1, j]
        slope = a - b
        scale = max(abs(a), abs(b), abs(rhs), 1e-300)
        if abs(slope) <= 1e-15 * scale:
            if b < rhs - 1e-12 * scale:
                return 1.0, 0.0
            continue
        root = (rhs - b) / slope
        if slope > 0:
            lo = max(lo, root)
        else:
            hi = min(hi, root)
    return lo, hi


def _pick(lo: float, hi: float, obj: tuple[float, float], gram: np.ndarray, tie_break: str) -> float:
    slope = obj[0] - obj[1]
    if abs(slope) > 1e-12 * max(abs(obj[0]), abs(obj[1]), 1e-300):
        return hi if slope > 0 else lo
    mid = 0.5 * (lo + hi)
    if tie_break == "midpoint" or lo == hi:
        return mid

    def worst(b1):
        return min(b1 * gram[0, j] + (1 - b1) * gram[1, j] for j in (0, 1))

    cands = [lo, hi]
    d = (gram[0, 0] - gram[1, 0]) - (gram[0, 1] - gram[1, 1])
    if d != 0:
        cross = (gram[1, 1] - gram[1, 0]) / d
        if lo < cross < hi:
            cands.append(cross)
    vals = [worst(c) for c in cands]
    best = max(vals)
    tol = 1e-12 * max(1.0, abs(best))
    winners = [c for c, v in zip(cands, vals) if v >= best - tol]
    if len(winners) == 2 and set(winners) == {lo, hi}:
        return mid  # flat max-min over the whole interval
    return min(winners, key=lambda c: abs(c - mid))


def lp_constraints(g1, g2, gv, l_val: float, epsilon: float) -> tuple[str, list[tuple[int, float]], tuple[float, float]]:
    """Branch name, constraints (objective index, rhs) and objective coefficients."""
    grads = (g1, g2)
    if l_val > epsilon:
        proj = [float(gv @ g) for g in grads]
        J = {j for j in (0, 1) if proj[j] > 0}
        top = max(proj)
        Jstar = {j for j in (0, 1) if proj[j] == top}
        indicator = 1.0 if J else 0.0
        cons = []
        for j in (0, 1):
            if j in Jstar:
                cons.append((j, 0.0))
            elif j not in J:
                cons.append((j, indicator * proj[j]))
        return "balance", cons, (proj[0], proj[1])
    s = g1 + g2
    return "descent", [(0, 0.0), (1, 0.0)], (float(g1 @ s), float(g2 @ s))


def solve_combination(g1, g2, gv, l_val: float, cfg: ParetoConfig | None = None) -> ParetoStep:
    """Solve the balance LP (validation loss above threshold) or the descent LP."""
    cfg = cfg or ParetoConfig()
    g1, g2, gv = (np.asarray(v, dtype=float).ravel() for v in (g1, g2, gv))
    if not (g1.shape == g2.shape == gv.shape):
        raise ad.ShapeMismatch(f"gradient lengths {g1.shape}, {g2.shape}, {gv.shape}")
    gram = np.array([[g1 @ g1, g1 @ g2], [g2 @ g1, g2 @ g2]])
    branch, cons, obj = lp_constraints(g1, g2, gv, l_val, cfg.epsilon)
    lo, hi = _feasible_interval(gram, cons)
    feasible = True
    if lo > hi:
        if lo - hi <= 1e-12:
            lo = hi = 0.5 * (lo + hi)
        else:
            feasible = False
    if feasible:
        b1 = _pick(lo, hi, obj, gram, cfg.tie_break)
    else:
        log.warning("infeasible %s LP (interval [%.3g, %.3g]); falling back to equal weights", branch, lo, hi)
        b1 = 0.5
    b1 = min(max(b1, 0.0), 1.0)
    beta = (b1, 1.0 - b1)
    return ParetoStep(g1, g2, gv, beta, beta[0] * g1 + beta[1] * g2, branch, cons, feasible, l_val=l_val)


def _loss_pair(model, batch, loss_cfg):
    hv, ht = model.embed(batch.images, batch.descriptors)
    return order_loss_both(hv, ht, batch.targets, loss_cfg), align_loss(hv, ht, loss_cfg)


def dyn_train_step(model, train_batch, val_batch, optimizer, cfg: ParetoConfig | None = None,
                   loss_cfg: LossConfig | None = None) -> ParetoStep:
    """One preference-guided update.

    Three backward passes (ordinal and alignment on the training batch,
    alignment on the validation batch), the LP over trainable parameters,
    then ``optimizer.step`` with the combined direction as the gradient.
    """
    cfg = cfg or ParetoConfig()
    params = model.parameters()
    l_order, l_align = _loss_pair(model, train_batch, loss_cfg)
    g1 = flatten(ad.grad(l_order, params))
    g2 = flatten(ad.grad(l_align, params))
    hv_val, ht_val = model.embed(val_batch.images, val_batch.descriptors)
    l_val = align_loss(hv_val, ht_val, loss_cfg)
    gv = flatten(ad.grad(l_val, params))
    step = solve_combination(g1, g2, gv, l_val.item(), cfg)
    step.l_order, step.l_align = l_order.item(), l_align.item()
    optimizer.step(unflatten(step.direction, params))
    return step


def fixed_alpha_step(model, batch, alpha: float, optimizer, loss_cfg: LossConfig | None = None):
    """Single backward pass on alpha*L_order + (1-alpha)*L_align, then one optimizer step."""
    check_alpha(alpha)
    params = model.parameters()
    l_order, l_align = _loss_pair(model, batch, loss_cfg)
    total = l_order * alpha + l_align * (1.0 - alpha)
    grads = ad.grad(total, params)
    optimizer.step(grads)
    return l_order.item(), l_align.item(), grads


class StepLog:
    """Appends one ``iter,branch,beta1,l_order,l_align,l_val`` row per step."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)
        self.rows = 0

    def append(self, it: int, branch: str, beta1: float, l_order: float, l_align: float, l_val: float) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [it, branch, repr(float(beta1)), repr(float(l_order)), repr(float(l_align)), repr(float(l_val))])
        self.rows += 1
