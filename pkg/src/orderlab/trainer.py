"""ORDER pretraining: splits, normalisation, flip augmentation, epoch loop, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .encoders import EncoderConfig, TabularEncoder, VisionEncoder, ZScore, build_encoders
from .losses import LossConfig, align_loss, order_loss_both
from .optim import SGD, Adam
from .pareto import ParetoConfig, StepLog, dyn_train_step, fixed_alpha_step
from .rvegen import SamplePair, descriptor_matrix, image_stack, target_matrix

log = logging.getLogger(__name__)

MODES = ("order_dyn", "order_alpha", "cmcl")


class TooFewSamples(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class SplitSpec:
    train: list[int]
    test: list[int]
    eval: list[int]
    seed: int = 0

    def all_ids(self) -> list[int]:
        return self.train + self.test + self.eval

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["split", "id"])
            for name in ("train", "test", "eval"):
                for i in getattr(self, name):
                    wr.writerow([name, i])

    @classmethod
    def read(cls, path) -> "SplitSpec":
        parts = {"train": [], "test": [], "eval": []}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                parts[row["split"]].append(int(row["id"]))
        return cls(**parts)


def split_dataset(ids, seed: int = 0, fractions=(0.70, 0.15, 0.15), path=None) -> SplitSpec:
    """Shuffle ids into train/test/eval; test and eval get floor shares, train the rest."""
    ids = list(ids)
    if len(ids) < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {len(ids)}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 31])).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_test = int(math.floor(fractions[1] * len(ids)))
    n_eval = int(math.floor(fractions[2] * len(ids)))
    spec = SplitSpec(
        train=sorted(shuffled[n_test + n_eval:]),
        test=sorted(shuffled[:n_test]),
        eval=sorted(shuffled[n_test:n_test + n_eval]),
        seed=seed,
    )
    if path is not None:
        spec.write(path)
    return spec


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 3e-4
    batch_size: int = 32
    mode: str = "order_dyn"
    alpha: float = 0.2
    flip_prob: float = 0.1
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Batch:
    ids: np.ndarray
    images: np.ndarray
    descriptors: np.ndarray
    targets: np.ndarray


class OrderModel:
    """Both encoders plus the train-split normalisers they were fitted with."""

    def __init__(self, tab: TabularEncoder, vis: VisionEncoder, enc_cfg: EncoderConfig,
                 desc_norm: ZScore, target_norm: ZScore):
        self.tab, self.vis = tab, vis
        self.enc_cfg = enc_cfg
        self.desc_norm, self.target_norm = desc_norm, target_norm

    def parameters(self):
        return self.tab.parameters() + self.vis.parameters()

    def embed(self, images, descriptors_z):
        return self.vis(images), self.tab(descriptors_z)

    def encode(self, samples: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
        from .encoders import encode_image, encode_tabular
        hv = encode_image(self.vis, image_stack(samples)).features
        ht = encode_tabular(self.tab, descriptor_matrix(samples), self.desc_norm).features
        return hv, ht

    def save(self, path, extra: dict | None = None) -> None:
        tensors = {f"tab.{k}": v for k, v in self.tab.state_dict().items()}
        tensors.update({f"vis.{k}": v for k, v in self.vis.state_dict().items()})
        meta = {
            "encoder": dataclasses.asdict(self.enc_cfg),
            "desc_norm": self.desc_norm.to_dict(),
            "target_norm": self.target_norm.to_dict(),
            "lora": bool(self.vis.lora_layers()),
        }
        meta.update(extra or {})
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "OrderModel":
        tensors, meta = checkpoint.load(path)
        enc_cfg = EncoderConfig(**meta["encoder"])
        rng = np.random.default_rng(0)
        tab = TabularEncoder(3, enc_cfg, rng)
        vis = VisionEncoder(enc_cfg, rng)
        if meta.get("lora"):
            vis.add_lora(enc_cfg.lora_rank, enc_cfg.lora_alpha, rng)
        tab.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("tab.")})
        vis.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("vis.")})
        tab.set_trainable(False)
        vis.set_trainable(False)
        model = cls(tab, vis, enc_cfg, ZScore.from_dict(meta["desc_norm"]), ZScore.from_dict(meta["target_norm"]))
        model.meta = meta
        return model


def build_model(samples_by_id: dict[int, SamplePair], split: SplitSpec, enc_cfg: EncoderConfig,
                seed: int, base_state: dict | None = None) -> OrderModel:
    train = [samples_by_id[i] for i in split.train]
    desc_norm = ZScore().fit(descriptor_matrix(train))
    target_norm = ZScore().fit(target_matrix(train))
    if enc_cfg.freeze_base and base_state is None:
        raise ValueError("freeze_base requires pretrained base vision weights")
    tab, vis = build_encoders(enc_cfg, seed, base_state)
    return OrderModel(tab, vis, enc_cfg, desc_norm, target_norm)


def flip_augment(images: np.ndarray, rng: np.random.Generator, p: float) -> np.ndarray:
    """Independent horizontal and vertical flips, each with probability ``p``."""
    out = images.copy()
    h = rng.random(len(images)) < p
    v = rng.random(len(images)) < p
    out[h] = out[h][:, :, ::-1]
    out[v] = out[v][:, ::-1, :]
    return out


@dataclass
class PretrainResult:
    model: OrderModel
    curves: list[dict] = field(default_factory=list)
    steps: list = field(default_factory=list)
    accessed_ids: set = field(default_factory=set)
    final_path: Path | None = None
    best_path: Path | None = None


def _make_batch(model: OrderModel, samples: list[SamplePair], images=None) -> Batch:
    return Batch(
        ids=np.array([s.id for s in samples]),
        images=image_stack(samples) if images is None else images,
        descriptors=model.desc_norm.transform(descriptor_matrix(samples)),
        targets=model.target_norm.transform(target_matrix(samples)),
    )


def pretrain(samples: list[SamplePair], split: SplitSpec, cfg: TrainConfig,
             enc_cfg: EncoderConfig | None = None, base_state: dict | None = None,
             out_dir=None, model: OrderModel | None = None, loss_cfg: LossConfig | None = None,
             pareto_cfg: ParetoConfig | None = None) -> PretrainResult:
    """Pretrain both encoders in the configured mode.

    ``order_dyn`` is the only mode that touches the eval split. Per-epoch
    mean training losses are recorded in ``curves``; every step is appended
    to ``train_log.csv`` when ``out_dir`` is given.
    """
    enc_cfg = enc_cfg or EncoderConfig()
    by_id = {s.id: s for s in samples}
    if model is None:
        model = build_model(by_id, split, enc_cfg, cfg.seed, base_state)
    loss_cfg = loss_cfg or LossConfig()
    pcfg = pareto_cfg or ParetoConfig()
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else SGD(params, lr=cfg.lr)
    result = PretrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    step_log = StepLog(out / "train_log.csv") if out is not None else None

    train = [by_id[i] for i in split.train]
    eval_samples = [by_id[i] for i in split.eval] if cfg.mode == "order_dyn" else []
    val_size = min(pcfg.val_batch or cfg.batch_size, len(eval_samples))
    if pcfg.full_val_gradient:
        val_size = len(eval_samples)
    best = math.inf
    it = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41, epoch]))
        perm = rng.permutation(len(train))
        sums = {"l_align": 0.0, "l_order": 0.0, "batches": 0}
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            chunk = [train[i] for i in idx]
            result.accessed_ids.update(s.id for s in chunk)
            imgs = flip_augment(image_stack(chunk), rng, cfg.flip_prob)
            batch = _make_batch(model, chunk, imgs)
            if cfg.mode == "order_dyn":
                vidx = rng.choice(len(eval_samples), size=val_size, replace=False)
                vchunk = [eval_samples[i] for i in vidx]
                result.accessed_ids.update(s.id for s in vchunk)
                step = dyn_train_step(model, batch, _make_batch(model, vchunk), opt, pcfg, loss_cfg)
                l_order, l_align, branch, beta1, l_val = step.l_order, step.l_align, step.branch, step.beta[0], step.l_val
                result.steps.append((it, branch, beta1))
            elif cfg.mode == "order_alpha":
                l_order, l_align, _ = fixed_alpha_step(model, batch, cfg.alpha, opt, loss_cfg)
                branch, beta1, l_val = "fixed", cfg.alpha, math.nan
            else:
                hv, ht = model.embed(batch.images, batch.descriptors)
                la = align_loss(hv, ht, loss_cfg)
                l_order = order_loss_both(hv.detach(), ht.detach(), batch.targets, loss_cfg).item()
                opt.step(ad.grad(la, params))
                l_align, branch, beta1, l_val = la.item(), "align", 0.0, math.nan
            if not (math.isfinite(l_align) and math.isfinite(l_order)):
                raise NonFiniteLoss(f"epoch {epoch} iter {it}: non-finite loss on batch ids {batch.ids.tolist()}")
            if step_log is not None:
                step_log.append(it, branch, beta1, l_order, l_align, l_val)
            sums["l_align"] += l_align
            sums["l_order"] += l_order
            sums["batches"] += 1
            it += 1
        nb = max(sums["batches"], 1)
        row = {"epoch": epoch, "l_align": sums["l_align"] / nb, "l_order": sums["l_order"] / nb}
        if cfg.mode == "order_dyn" and eval_samples:
            hv, ht = model.embed(image_stack(eval_samples),
                                 model.desc_norm.transform(descriptor_matrix(eval_samples)))
            row["eval_align"] = align_loss(hv, ht, loss_cfg).item()
            score = row["eval_align"]
        elif cfg.mode == "order_alpha":
            score = cfg.alpha * row["l_order"] + (1 - cfg.alpha) * row["l_align"]
        else:
            score = row["l_align"]
        result.curves.append(row)
        log.info("epoch %d %s", epoch, row)
        if out is not None and score < best:
            best = score
            result.best_path = out / "best.ckpt"
            model.save(result.best_path, {"mode": cfg.mode, "epoch": epoch})
    if out is not None:
        result.final_path = out / "final.ckpt"
        model.save(result.final_path, {"mode": cfg.mode, "epoch": cfg.epochs - 1})
        write_curves(result.curves, out / "loss_curves.csv")
    return result


def write_curves(curves: list[dict], path) -> None:
    cols = ["epoch", "l_align", "l_order", "eval_align"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for row in curves:
            wr.writerow([row.get(c, "") if c == "epoch" else repr(row[c]) if c in row else "" for c in cols])
