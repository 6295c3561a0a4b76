"""Frozen-feature evaluation: retrieval, property prediction and feature diagnostics."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ZScore
from .nn import Linear, Module
from .optim import Adam

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["metric", "task", "modality", "value"]


class EmptyCandidates(ValueError):
    pass


class MissingGroundTruth(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


class FrozenCheckpointMissing(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalResult:
    query_id: int
    ranked_ids: list[int]
    scores: list[float]
    k: int
    hit: bool
    deviations: np.ndarray | None = None  # (k, n_properties) |y_cand - y_query|


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-300)


def retrieve(query: np.ndarray, candidates: np.ndarray, k: int, candidate_ids=None,
             query_id: int | None = None, targets: dict | None = None) -> RetrievalResult:
    """Top-k candidates by cosine similarity; equal scores are ordered by ascending id.

    ``query_id`` is the id of the ground-truth counterpart. ``targets`` maps
    id -> property vector and fills in the per-candidate deviations.
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim != 2 or len(candidates) == 0:
        raise EmptyCandidates("no candidates to rank")
    if k < 1:
        raise ValueError("k must be at least 1")
    ids = np.arange(len(candidates)) if candidate_ids is None else np.asarray(candidate_ids)
    k = min(k, len(candidates))
    scores = _unit(candidates) @ _unit(query)
    order = np.lexsort((ids, -scores))[:k]
    ranked = [int(i) for i in ids[order]]
    hit = query_id is not None and query_id in ranked
    dev = None
    if targets is not None and query_id is not None:
        y0 = np.asarray(targets[query_id], dtype=float)
        dev = np.abs(np.stack([np.asarray(targets[i], dtype=float) for i in ranked]) - y0)
    return RetrievalResult(query_id, ranked, [float(s) for s in scores[order]], k, hit, dev)


def retrieve_all(queries: np.ndarray, candidates: np.ndarray, ids, k: int, targets: dict | None = None):
    """Row i of ``queries`` is matched with row i of ``candidates``; both share ``ids``."""
    return [retrieve(q, candidates, k, ids, int(i), targets) for q, i in zip(queries, ids)]


def topk_accuracy(results: list[RetrievalResult]) -> float:
    if any(r.query_id is None for r in results):
        raise MissingGroundTruth("every query needs its ground-truth id")
    return float(np.mean([r.hit for r in results])) if results else math.nan


def property_deviation(results: list[RetrievalResult], targets: dict | None = None) -> np.ndarray:
    """Mean over queries of the mean |y_cand - y_query| across the retrieved set, per property."""
    per_query = []
    for r in results:
        if r.query_id is None:
            raise MissingGroundTruth("every query needs its ground-truth id")
        dev = r.deviations
        if dev is None:
            if targets is None:
                raise MissingGroundTruth("no targets to compute deviations from")
            y0 = np.asarray(targets[r.query_id], dtype=float)
            dev = np.abs(np.stack([np.asarray(targets[i], dtype=float) for i in r.ranked_ids]) - y0)
        per_query.append(dev.mean(axis=0))
    return np.mean(per_query, axis=0)


# ---------------------------------------------------------------------------
# regression metrics


def _pair(pred, true):
    pred, true = np.asarray(pred, dtype=float).ravel(), np.asarray(true, dtype=float).ravel()
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.shape} vs {true.shape}")
    if len(pred) < 2:
        raise LengthMismatch("need at least 2 values")
    return pred, true


def rmse(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def r2(pred, true) -> float:
    pred, true = _pair(pred, true)
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("R^2 undefined for constant targets")
    return 1.0 - float(np.sum((pred - true) ** 2)) / ss_tot


# ---------------------------------------------------------------------------
# property predictor


class PredictorHead(Module):
    """Two (d, d) ReLU layers and a (d, 1) output; fusion inputs go through a (2d, d) projection first."""

    def __init__(self, d: int, rng: np.random.Generator, fusion: bool = False):
        self.d = d
        self.fusion = fusion
        if fusion:
            self.proj = Linear(2 * d, d, rng)
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.out = Linear(d, 1, rng)

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
        width = 2 * self.d if self.fusion else self.d
        if x.shape[-1] != width:
            raise ad.ShapeMismatch(f"predictor expects width {width}, got {x.shape[-1]}")
        if self.fusion:
            x = self.proj(x)
        h = ad.relu(self.fc1(x))
        h = ad.relu(self.fc2(h))
        return self.out(h).reshape(-1)


@dataclass
class PredictorConfig:
    lr: float = 5e-4
    epochs: int = 100
    patience: int = 20
    batch_size: int = 32
    seed: int = 0


@dataclass
class PredictorResult:
    head: PredictorHead
    normalizer: ZScore
    metrics: dict
    best_epoch: int
    history: list = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        z = self.head(np.asarray(features, dtype=float)).data
        return self.normalizer.inverse(z[:, None])[:, 0]


def fuse(hv: np.ndarray, ht: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(hv, float), np.asarray(ht, float)], axis=1)


def train_predictor(features: np.ndarray, targets: np.ndarray, split, fusion: bool = False,
                    cfg: PredictorConfig | None = None) -> PredictorResult:
    """Fit one head on z-scored targets; early-stop on the eval split and restore the best weights.

    ``split`` needs ``train``, ``eval`` and ``test`` arrays of row indices.
    Metrics are RMSE and R^2 on the test rows in original units.
    """
    cfg = cfg or PredictorConfig()
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float).ravel()
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} feature rows vs {len(y)} targets")
    tr, ev, te = (np.asarray(getattr(split, s), dtype=int) for s in ("train", "eval", "test"))
    d = x.shape[1] // 2 if fusion else x.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 53]))
    head = PredictorHead(d, rng, fusion)
    norm = ZScore().fit(y[tr, None])
    z = norm.transform(y[:, None])[:, 0]
    params = head.parameters()
    opt = Adam(params, lr=cfg.lr)

    def eval_mse(rows):
        return float(np.mean((head(x[rows]).data - z[rows]) ** 2))

    best, best_epoch, best_state, stale = math.inf, -1, head.state_dict(), 0
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(tr)
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            pred = head(x[idx])
            loss = ad.mean((pred - z[idx]) ** 2)
            opt.step(ad.grad(loss, params))
        val = eval_mse(ev)
        history.append(val)
        if val < best:
            best, best_epoch, best_state, stale = val, epoch, head.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    head.load_state_dict(best_state)
    result = PredictorResult(head, norm, {}, best_epoch, history)
    pred = result.predict(x[te])
    metrics = {"rmse": rmse(pred, y[te])}
    try:
        metrics["r2"] = r2(pred, y[te])
    except ZeroVariance:
        warnings.warn("constant test targets: R^2 reported as NaN", RuntimeWarning, stacklevel=2)
        metrics["r2"] = math.nan
    result.metrics = metrics
    return result


# ---------------------------------------------------------------------------
# diagnostics


def similarity_matrix(hv: np.ndarray, ht: np.ndarray, sort_by=None, path=None) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity between image rows and tabular rows, both ordered by ``sort_by`` ascending."""
    hv, ht = np.asarray(hv, dtype=float), np.asarray(ht, dtype=float)
    if hv.shape != ht.shape:
        raise ad.ShapeMismatch(f"{hv.shape} vs {ht.shape}")
    order = np.arange(len(hv)) if sort_by is None else np.argsort(np.asarray(sort_by), kind="stable")
    sim = _unit(hv[order]) @ _unit(ht[order]).T
    if path is not None:
        np.savetxt(path, sim, delimiter=",", fmt="%.17g")
    return sim, order


def band_means(sim: np.ndarray, near: int = 5, far: int = 30) -> tuple[float, float]:
    """Mean similarity with |rank gap| <= near versus >= far."""
    n = len(sim)
    gap = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    near_vals, far_vals = sim[gap <= near], sim[gap >= far]
    return (float(near_vals.mean()) if near_vals.size else math.nan,
            float(far_vals.mean()) if far_vals.size else math.nan)


def project_2d(features: np.ndarray) -> np.ndarray:
    """Coordinates on the top-2 principal axes (covariance eigenvectors)."""
    x = np.asarray(features, dtype=float)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    # fix the sign so the output is reproducible across LAPACK builds
    signs = np.sign(top[np.argmax(np.abs(top), axis=0), [0, 1]])
    return xc @ (top * np.where(signs == 0, 1.0, signs))


def write_projection(path, ids, coords: np.ndarray, targets: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "x", "y", *targets])
        for r, i in enumerate(ids):
            wr.writerow([int(i), repr(float(coords[r, 0])), repr(float(coords[r, 1])),
                         *(repr(float(v[r])) for v in targets.values())])


def write_metrics(path, rows: list[tuple]) -> None:
    """Rows of (metric, task, modality, value)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for metric, task, modality, value in rows:
            wr.writerow([metric, task, modality, repr(float(value))])
