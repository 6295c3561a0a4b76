"""Tabular and vision encoders mapping both modalities into one latent space."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .nn import Block, LayerNorm, Linear, LoRALinear, Module
from .optim import Adam

log = logging.getLogger(__name__)


class UnfittedNormalizer(RuntimeError):
    pass


class SizeMismatch(ValueError):
    pass


@dataclass
class EncoderConfig:
    d: int = 128
    image_size: int = 64
    patch_size: int = 8
    vision_dim: int = 64
    vision_layers: int = 4
    vision_heads: int = 4
    tab_dim: int = 64
    tab_layers: int = 2
    tab_heads: int = 4
    mlp_ratio: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    freeze_base: bool = True
    normalize: bool = True


@dataclass
class EmbeddingBatch:
    features: np.ndarray
    modality: str
    unit_norm: bool = True

    def __post_init__(self):
        if self.modality not in ("tabular", "vision"):
            raise ValueError(f"unknown modality {self.modality!r}")

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class ZScore:
    """Per-column standardisation fitted on the training split only."""

    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    eps: float = field(default=1e-12, repr=False)

    def fit(self, x: np.ndarray) -> "ZScore":
        x = np.asarray(x, dtype=float)
        self.mean = x.mean(axis=0)
        self.std = x.std(axis=0)
        return self

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def transform(self, x: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise UnfittedNormalizer("z-score statistics have not been fitted")
        return (np.asarray(x, dtype=float) - self.mean) / np.maximum(self.std, self.eps)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise UnfittedNormalizer("z-score statistics have not been fitted")
        return np.asarray(z, dtype=float) * np.maximum(self.std, self.eps) + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScore":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


class TabularEncoder(Module):
    """Feature-tokenizer transformer: each scalar descriptor becomes one token."""

    def __init__(self, n_features: int, cfg: EncoderConfig, rng: np.random.Generator):
        dim = cfg.tab_dim
        self.n_features = n_features
        self.normalize = cfg.normalize
        self.tok_weight = Tensor(rng.normal(0.0, 1.0, size=(n_features, dim)), requires_grad=True)
        self.tok_bias = Tensor(rng.normal(0.0, 0.02, size=(n_features, dim)), requires_grad=True)
        self.cls = Tensor(rng.normal(0.0, 0.02, size=(1, 1, dim)), requires_grad=True)
        self.blocks = [Block(dim, cfg.tab_heads, cfg.mlp_ratio, rng) for _ in range(cfg.tab_layers)]
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, cfg.d, rng)
        self.d = cfg.d

    def __call__(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ad.ShapeMismatch(f"expected (N, {self.n_features}) descriptors, got {x.shape}")
        n = x.shape[0]
        tokens = self.tok_weight * x[:, :, None] + self.tok_bias
        cls = self.cls + np.zeros((n, 1, 1))
        h = ad.concat([cls, tokens], axis=1)
        for blk in self.blocks:
            h = blk(h)
        out = self.head(self.norm(h)[:, 0, :])
        return ad.l2_normalize(out) if self.normalize else out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W) -> (N, H*W/patch^2, patch^2), row-major patches."""
    n, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, gh * gw, patch * patch)


class VisionEncoder(Module):
    """Patch transformer over grayscale images with optional LoRA on attention."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.image_size % cfg.patch_size:
            raise ValueError("image size must be a multiple of the patch size")
        dim = cfg.vision_dim
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.normalize = cfg.normalize
        n_tokens = (cfg.image_size // cfg.patch_size) ** 2 + 1
        self.patch_embed = Linear(cfg.patch_size**2, dim, rng)
        self.cls = Tensor(rng.normal(0.0, 0.02, size=(1, 1, dim)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(1, n_tokens, dim)), requires_grad=True)
        self.blocks = [Block(dim, cfg.vision_heads, cfg.mlp_ratio, rng) for _ in range(cfg.vision_layers)]
        self.norm = LayerNorm(dim)
        self.rot_head = Linear(dim, 4, rng)
        self.head = Linear(dim, cfg.d, rng)
        self.d = cfg.d

    def trunk(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=float)
        if images.ndim != 3 or images.shape[1:] != (self.image_size, self.image_size):
            raise SizeMismatch(f"expected (N, {self.image_size}, {self.image_size}) images, got {images.shape}")
        n = images.shape[0]
        patches = patchify(images * 2.0 - 1.0, self.patch_size)
        tokens = self.patch_embed(patches)
        cls = self.cls + np.zeros((n, 1, 1))
        h = ad.concat([cls, tokens], axis=1) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)[:, 0, :]

    def __call__(self, images: np.ndarray) -> Tensor:
        out = self.head(self.trunk(images))
        return ad.l2_normalize(out) if self.normalize else out

    def rotation_logits(self, images: np.ndarray) -> Tensor:
        return self.rot_head(self.trunk(images))

    def lora_layers(self) -> list[LoRALinear]:
        return [getattr(b.attn, name) for b in self.blocks for name in ("q", "k", "v", "o")
                if isinstance(getattr(b.attn, name), LoRALinear)]

    def base_tensors(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors()
                if not (n.startswith("head.") or n.startswith("rot_head.") or ".lora_" in n)]

    def freeze_base(self) -> None:
        """Freeze everything except the LoRA factors and the output head."""
        for name, t in self.named_tensors():
            t.requires_grad = name.startswith("head.") or ".lora_" in name

    def add_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        for b in self.blocks:
            b.attn.add_lora(rank, alpha, rng)

    def base_state(self) -> dict[str, np.ndarray]:
        """Frozen trunk tensors under their pre-LoRA names."""
        return {n.replace(".base.", "."): t.data.copy() for n, t in self.base_tensors()}


def build_encoders(cfg: EncoderConfig, seed: int, base_state: dict | None = None,
                   n_features: int = 3) -> tuple[TabularEncoder, VisionEncoder]:
    """Fresh encoders; with ``base_state`` the vision trunk is loaded, frozen and LoRA-adapted."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    tab = TabularEncoder(n_features, cfg, rng)
    vis = VisionEncoder(cfg, rng)
    if base_state is not None:
        own = dict(vis.base_tensors())
        missing = sorted(set(own) - set(base_state))
        if missing:
            raise KeyError(f"base state lacks {len(missing)} trunk tensors, e.g. {missing[:3]}")
        for name, t in own.items():
            t.data = np.array(base_state[name], dtype=float)
        if cfg.lora_rank > 0:
            vis.add_lora(cfg.lora_rank, cfg.lora_alpha, rng)
        if cfg.freeze_base:
            vis.freeze_base()
    return tab, vis


def _batched(fn, x: np.ndarray, d: int, batch: int = 128) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, d))
    return np.concatenate([fn(x[i:i + batch]).data for i in range(0, len(x), batch)])


def encode_tabular(encoder: TabularEncoder, descriptors: np.ndarray, normalizer: ZScore) -> EmbeddingBatch:
    z = normalizer.transform(np.asarray(descriptors, dtype=float).reshape(-1, encoder.n_features))
    return EmbeddingBatch(_batched(encoder, z, encoder.d), "tabular", encoder.normalize)


def encode_image(encoder: VisionEncoder, images: np.ndarray) -> EmbeddingBatch:
    images = np.asarray(images, dtype=float)
    if images.size == 0:
        return EmbeddingBatch(np.zeros((0, encoder.d)), "vision", encoder.normalize)
    return EmbeddingBatch(_batched(encoder, images, encoder.d), "vision", encoder.normalize)


# ---------------------------------------------------------------------------
# self-supervised base pretraining


def rotate_batch(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.stack([np.rot90(img, k) for img, k in zip(images, labels)])


@dataclass
class BasePretrainConfig:
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 64
    holdout: float = 0.2
    seed: int = 0


def rotation_accuracy(encoder: VisionEncoder, images: np.ndarray, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=len(images))
    logits = _batched(encoder.rotation_logits, rotate_batch(images, labels), 4)
    return float((logits.argmax(axis=1) == labels).mean())


def pretrain_base_vision(images: np.ndarray, cfg: EncoderConfig, pcfg: BasePretrainConfig | None = None,
                         out_path=None) -> tuple[dict[str, np.ndarray], dict]:
    """Train the vision trunk to predict 0/90/180/270 degree rotations, then freeze it.

    Returns the frozen base state and a report with the held-out accuracy.
    """
    pcfg = pcfg or BasePretrainConfig()
    images = np.asarray(images, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([pcfg.seed, 23]))
    order = rng.permutation(len(images))
    n_hold = int(round(pcfg.holdout * len(images)))
    hold, train = images[order[:n_hold]], images[order[n_hold:]]
    vis = VisionEncoder(cfg, rng)
    params = [t for n, t in vis.named_tensors() if not n.startswith("head.")]
    for t in vis.head.parameters():
        t.requires_grad = False
    opt = Adam(params, lr=pcfg.lr)
    history = []
    for epoch in range(pcfg.epochs):
        perm = rng.permutation(len(train))
        losses = []
        for i in range(0, len(train) - 1, pcfg.batch_size):
            idx = perm[i:i + pcfg.batch_size]
            labels = rng.integers(0, 4, size=len(idx))
            x = rotate_batch(train[idx], labels)
            logits = vis.rotation_logits(x)
            onehot = np.eye(4)[labels]
            loss = ad.mean(ad.log_sum_exp(logits, axis=1) - ad.tsum(logits * onehot, axis=1))
            opt.step(ad.grad(loss, params))
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("base epoch %d rotation loss %.4f", epoch, history[-1])
    acc = rotation_accuracy(vis, hold, seed=pcfg.seed + 1) if len(hold) else float("nan")
    vis.set_trainable(False)
    state = vis.base_state()
    report = {"holdout_accuracy": acc, "loss_curve": history, "n_train": len(train), "n_holdout": n_hold}
    if out_path is not None:
        checkpoint.save(out_path, state, {"kind": "vision_base", "holdout_accuracy": acc})
    return state, report
