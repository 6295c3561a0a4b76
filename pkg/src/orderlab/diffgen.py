"""Descriptor-conditioned generation: feature-space diffusion prior plus pixel-space DDPM decoder."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module, sinusoidal_embedding
from .optim import Adam
from .rvegen import write_pgm

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


class TimestepOutOfRange(ValueError):
    pass


@dataclass
class DiffusionSchedule:
    K: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        # index 0 is unused so that betas[k] is the variance of step k (1-based)
        self.betas = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.K)])
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def check(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K) or not np.issubdtype(k.dtype, np.integer):
            raise TimestepOutOfRange(f"timesteps must be integers in [1, {self.K}]")
        return k

    def posterior(self, k: int) -> tuple[float, float, float]:
        """Coefficients (c_x0, c_xk, variance) of q(x_{k-1} | x_k, x0)."""
        ab, ab_prev, b = self.alpha_bar[k], self.alpha_bar[k - 1], self.betas[k]
        c0 = math.sqrt(ab_prev) * b / (1.0 - ab)
        ck = math.sqrt(self.alphas[k]) * (1.0 - ab_prev) / (1.0 - ab)
        return c0, ck, (1.0 - ab_prev) / (1.0 - ab) * b


def forward_noise(x0, k, schedule: DiffusionSchedule, noise) -> np.ndarray:
    """x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) noise; ``k`` may be a scalar or one step per row."""
    k = schedule.check(k)
    x0 = np.asarray(x0, dtype=float)
    ab = schedule.alpha_bar[k]
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=float)


class _ResBlock(Module):
    def __init__(self, dim: int, rng):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.fc2.weight.data *= 0.1

    def __call__(self, x, c=None):
        h = self.norm(x) if c is None else self.norm(x) + c
        return x + self.fc2(ad.gelu(self.fc1(h)))


class PriorNet(Module):
    """(noisy image feature, tabular feature, step) -> clean image feature."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 256, blocks: int = 3, temb: int = 64):
        self.d, self.temb = d, temb
        self.inp = Linear(2 * d + temb, hidden, rng)
        self.blocks = [_ResBlock(hidden, rng) for _ in range(blocks)]
        self.norm = LayerNorm(hidden)
        self.out = Linear(hidden, d, rng)

    def __call__(self, x_k, h_t, k) -> Tensor:
        x_k, h_t = np.asarray(x_k, float), np.asarray(h_t, float)
        if h_t.shape != x_k.shape:
            raise ad.ShapeMismatch(f"conditioning {h_t.shape} vs state {x_k.shape}")
        emb = sinusoidal_embedding(np.broadcast_to(k, (len(x_k),)), self.temb)
        h = self.inp(np.concatenate([x_k, h_t, emb], axis=1))
        for blk in self.blocks:
            h = blk(h)
        return self.out(self.norm(h))


class DecoderNet(Module):
    """(noisy flattened image, image feature, step) -> predicted noise.

    The image feature and step embedding go through their own projection and
    are added inside every residual block; concatenated with 1024 pixels they
    are too weak to steer sampling. The hidden width is narrower than the
    image, so a fixed skip ``sqrt(1 - alpha_bar_k) * v_k`` (the noise estimate
    for unit-variance data) carries the identity part and the network learns
    the residual.
    """

    def __init__(self, pixels: int, d: int, rng: np.random.Generator, hidden: int = 512, blocks: int = 2,
                 temb: int = 64, schedule: DiffusionSchedule | None = None):
        self.pixels, self.d, self.temb = pixels, d, temb
        self.schedule = schedule or DiffusionSchedule()
        self.inp = Linear(pixels, hidden, rng)
        self.cond = Linear(d + temb, hidden, rng)
        self.blocks = [_ResBlock(hidden, rng) for _ in range(blocks)]
        self.norm = LayerNorm(hidden)
        self.out = Linear(hidden, pixels, rng)
        self.out.weight.data *= 0.1

    def __call__(self, v_k, h_v, k) -> Tensor:
        v_k, h_v = np.asarray(v_k, float), np.asarray(h_v, float)
        shape = v_k.shape
        flat = v_k.reshape(len(v_k), -1)
        if flat.shape[1] != self.pixels:
            raise ad.ShapeMismatch(f"decoder expects {self.pixels} pixels, got {flat.shape[1]}")
        if h_v.shape != (len(flat), self.d):
            raise ad.ShapeMismatch(f"decoder expects features of width {self.d}, got {h_v.shape}")
        emb = sinusoidal_embedding(np.broadcast_to(k, (len(v_k),)), self.temb)
        # unit-norm features have entries ~1/sqrt(d); rescale to unit variance
        c = self.cond(np.concatenate([h_v * math.sqrt(self.d), emb], axis=1))
        h = self.inp(flat) + c
        for blk in self.blocks:
            h = blk(h, c)
        ab = np.broadcast_to(self.schedule.alpha_bar[self.schedule.check(k)], (len(flat),))
        skip = np.sqrt(1.0 - ab)[:, None] * flat
        return (self.out(self.norm(h)) + skip).reshape(*shape)


def downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear reduction; for integer factors this is the box average of each block."""
    images = np.asarray(images, dtype=float)
    n, h, w = images.shape
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return images.reshape(n, size, fh, size, fw).mean(axis=(2, 4))
    from scipy.ndimage import zoom
    return np.clip(zoom(images, (1, size / h, size / w), order=1), 0.0, 1.0)


@dataclass
class DiffusionTrainConfig:
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    hidden: int | None = None


@dataclass
class TrainedNet:
    net: Module
    history: list = field(default_factory=list)


def _train(net: Module, x0: np.ndarray, cond: np.ndarray, schedule: DiffusionSchedule,
           cfg: DiffusionTrainConfig, predict_clean: bool, salt: int) -> TrainedNet:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, salt]))
    params = net.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = []
    n = len(x0)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            k = rng.integers(1, schedule.K + 1, size=len(idx))
            eps = rng.standard_normal(x0[idx].shape)
            xk = forward_noise(x0[idx], k, schedule, eps)
            pred = net(xk, cond[idx], k)
            target = x0[idx] if predict_clean else eps
            loss = ad.mean((pred - target) ** 2)
            opt.step(ad.grad(loss, params))
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if epoch % 50 == 0:
            log.info("%s epoch %d loss %.5f", type(net).__name__, epoch, history[-1])
    return TrainedNet(net, history)


def train_prior(tab_feats, img_feats, schedule: DiffusionSchedule | None = None,
                cfg: DiffusionTrainConfig | None = None) -> TrainedNet:
    """Regress clean image features from their noised versions, conditioned on tabular features."""
    schedule = schedule or DiffusionSchedule()
    cfg = cfg or DiffusionTrainConfig()
    ht, hv = np.asarray(tab_feats, float), np.asarray(img_feats, float)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 61]))
    net = PriorNet(hv.shape[1], rng, hidden=cfg.hidden or 256)
    return _train(net, hv, ht, schedule, cfg, predict_clean=True, salt=62)


def train_decoder(images, img_feats, schedule: DiffusionSchedule | None = None,
                  cfg: DiffusionTrainConfig | None = None) -> TrainedNet:
    """Noise-prediction DDPM over images in [0, 1], scaled to [-1, 1] internally."""
    schedule = schedule or DiffusionSchedule()
    cfg = cfg or DiffusionTrainConfig()
    x = np.asarray(images, float) * 2.0 - 1.0
    hv = np.asarray(img_feats, float)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 71]))
    net = DecoderNet(x[0].size, hv.shape[1], rng, hidden=cfg.hidden or 512, schedule=schedule)
    return _train(net, x, hv, schedule, cfg, predict_clean=False, salt=72)


def epsilon_mse(net: DecoderNet, images, img_feats, schedule: DiffusionSchedule, seed: int = 0) -> float:
    """Noise-prediction MSE over one random draw of steps and noise."""
    rng = np.random.default_rng(seed)
    x = np.asarray(images, float) * 2.0 - 1.0
    k = rng.integers(1, schedule.K + 1, size=len(x))
    eps = rng.standard_normal(x.shape)
    pred = net(forward_noise(x, k, schedule, eps), img_feats, k).data
    return float(np.mean((pred - eps) ** 2))


def _normal(rngs, shape) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs])


def sample_prior(prior: PriorNet, tab_feats, schedule: DiffusionSchedule, rngs, renormalize: bool = True) -> np.ndarray:
    """Ancestral sampling in feature space with the clean-prediction posterior update."""
    ht = np.asarray(tab_feats, float)
    x = _normal(rngs, (ht.shape[1],))
    for k in range(schedule.K, 0, -1):
        x0 = prior(x, ht, k).data
        c0, ck, var = schedule.posterior(k)
        x = c0 * x0 + ck * x
        if k > 1:
            x = x + math.sqrt(var) * _normal(rngs, (ht.shape[1],))
    if renormalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return x


def sample_decoder(decoder: DecoderNet, img_feats, schedule: DiffusionSchedule, rngs, size: int,
                   clip_x0: bool = True) -> np.ndarray:
    """Ancestral sampling from predicted noise; returns images in [0, 1]."""
    if decoder.schedule.K != schedule.K:
        raise ValueError(f"decoder was built for K={decoder.schedule.K}, sampling with K={schedule.K}")
    hv = np.asarray(img_feats, float)
    shape = (size, size)
    x = _normal(rngs, shape)
    for k in range(schedule.K, 0, -1):
        eps = decoder(x, hv, k).data
        ab = schedule.alpha_bar[k]
        if clip_x0:
            x0 = np.clip((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
            c0, ck, var = schedule.posterior(k)
            x = c0 * x0 + ck * x
        else:
            var = schedule.posterior(k)[2]
            x = (x - schedule.betas[k] / math.sqrt(1.0 - ab) * eps) / math.sqrt(schedule.alphas[k])
        if k > 1:
            x = x + math.sqrt(var) * _normal(rngs, shape)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def generate(descriptors, model, prior: PriorNet, decoder: DecoderNet, schedule: DiffusionSchedule | None = None,
             seeds=0, size: int = 32) -> np.ndarray:
    """Descriptors (raw units, one row each) -> images of ``size`` x ``size`` in [0, 1].

    ``model`` supplies the tabular encoder and the stored descriptor
    statistics. Each row draws from its own seed, so a sample does not
    depend on what else is in the batch.
    """
    from .encoders import encode_tabular

    schedule = schedule or DiffusionSchedule()
    desc = np.atleast_2d(np.asarray(descriptors, dtype=float))
    seeds = np.broadcast_to(np.asarray(seeds), (len(desc),))
    prior_rngs = [np.random.default_rng(np.random.SeedSequence([int(s), 81])) for s in seeds]
    dec_rngs = [np.random.default_rng(np.random.SeedSequence([int(s), 82])) for s in seeds]
    # one row at a time: batched matmuls round differently for different batch sizes
    out = []
    for i in range(len(desc)):
        ht = encode_tabular(model.tab, desc[i:i + 1], model.desc_norm).features
        hv = sample_prior(prior, ht, schedule, prior_rngs[i:i + 1])
        out.append(sample_decoder(decoder, hv, schedule, dec_rngs[i:i + 1], size)[0])
    return np.stack(out)


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ad.ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def write_generated(out_dir, images, descriptors, seeds, ground_truth=None) -> Path:
    """PGM per image plus ``generated.csv`` with descriptor, seed and PSNR when ground truth is known."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    path = out / "generated.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "vf", "mma", "fiber_count", "seed", "image_path", "psnr_vs_ground_truth"])
        for i, (img, desc, seed) in enumerate(zip(images, descriptors, seeds)):
            rel = f"images/gen_{i:04d}.pgm"
            write_pgm(out / rel, img)
            p = "" if ground_truth is None else repr(psnr(img, ground_truth[i]))
            wr.writerow([i, repr(float(desc[0])), repr(float(desc[1])), int(desc[2]), int(seed), rel, p])
    return path
