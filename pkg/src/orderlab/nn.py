"""Small layer library on top of :mod:`orderlab.autodiff`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container. Tensors and sub-modules are discovered from attributes."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        """Trainable tensors only."""
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def num_parameters(self, trainable: bool | None = None) -> int:
        return sum(t.size for _, t in self.named_tensors()
                   if trainable is None or t.requires_grad == trainable)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_tensors())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name in own:
                if own[name].shape != arr.shape:
                    raise ad.ShapeMismatch(f"{name}: {arr.shape} vs {own[name].shape}")
                own[name].data = np.array(arr, dtype=float)

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.din, self.dout = din, dout
        self.weight = _param(rng.normal(0.0, 1.0 / math.sqrt(din), size=(dout, din)))
        self.bias = _param(np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.din:
            raise ad.ShapeMismatch(f"Linear expects last dim {self.din}, got {x.shape}")
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.din) if x.ndim != 2 else x
        out = flat @ ad.transpose(self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(*lead, self.dout) if x.ndim != 2 else out


class LoRALinear(Module):
    """Frozen base projection plus a rank-r update scaled by alpha / r.

    ``A`` starts Gaussian and ``B`` at zero, so the adapted layer initially
    reproduces the base layer bit for bit.
    """

    def __init__(self, base: Linear, rank: int, alpha: float, rng: np.random.Generator):
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.lora_A = _param(rng.normal(0.0, 1.0 / math.sqrt(base.din), size=(rank, base.din)))
        self.lora_B = _param(np.zeros((base.dout, rank)))
        self.enabled = True

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        out = self.base(x)
        if not self.enabled:
            return out
        x = ad.as_tensor(x)
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.base.din) if x.ndim != 2 else x
        delta = (flat @ ad.transpose(self.lora_A)) @ ad.transpose(self.lora_B)
        if x.ndim != 2:
            delta = delta.reshape(*lead, self.base.dout)
        return out + delta * self.scale

    def merged_weight(self) -> np.ndarray:
        return self.base.weight.data + self.scale * self.lora_B.data @ self.lora_A.data


def lora_forward(layer: LoRALinear, x) -> Tensor:
    return layer(x)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def add_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        for name in ("q", "k", "v", "o"):
            layer = getattr(self, name)
            if not isinstance(layer, LoRALinear):
                setattr(self, name, LoRALinear(layer, rank, alpha, rng))

    def __call__(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        dh = self.dim // self.heads

        def split(z):
            return ad.transpose(z.reshape(n, t, self.heads, dh), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ ad.transpose(k)) * (1.0 / math.sqrt(dh))
        ctx = ad.softmax(scores, axis=-1) @ v
        ctx = ad.transpose(ctx, (0, 2, 1, 3)).reshape(n, t, self.dim)
        return self.o(ctx)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def sinusoidal_embedding(steps: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    steps = np.asarray(steps, dtype=float).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(steps), 1))], axis=1)
    return emb
