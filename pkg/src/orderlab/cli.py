"""Command-line entry point: ``orderlab <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigInvalid, ExperimentConfig, load_config

OUT_ENV = "ORDERLAB_OUT"
PROPERTIES = ("yield_strength", "elongation")

log = logging.getLogger("orderlab")


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path))
    return path


class Run:
    """A command's output directory: records produced files and writes the manifest."""

    def __init__(self, root: Path, command: str, cfg: ExperimentConfig):
        self.root = root
        self.dir = root / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def finish(self) -> Path:
        self.cfg.write(self.path("config.ini"))
        entries = []
        for p in sorted(set(self.files)):
            if p.is_file():
                entries.append({"path": str(p.relative_to(self.root)),
                                "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        manifest = self.dir / "manifest.json"
        manifest.write_text(json.dumps({"files": entries}, indent=1, sort_keys=True) + "\n")
        return manifest


def _load_samples(root: Path, data: str | None):
    from .rvegen import load_dataset
    return load_dataset(_require(Path(data) if data else root / "gen-data" / "manifest.csv"))


def _load_model(root: Path, ckpt: str | None):
    from .trainer import OrderModel
    return OrderModel.load(_require(Path(ckpt) if ckpt else root / "pretrain" / "final.ckpt"))


def _split(root: Path, samples):
    from .trainer import SplitSpec
    return SplitSpec.read(_require(root / "pretrain" / "split.csv"))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ExperimentConfig, root: Path) -> Path:
    from .rvegen import generate_dataset, write_dataset
    rv = cfg.rvegen
    run = Run(root, "gen-data", cfg)
    samples = generate_dataset(rv.count, cfg.seed, image_size=rv.image_size, noise=rv.noise, stratified=rv.stratified)
    manifest = write_dataset(samples, run.dir)
    run.files += [manifest] + [run.dir / s.image_path for s in samples]
    return run.finish()


def cmd_pretrain(args, cfg: ExperimentConfig, root: Path) -> Path:
    from .encoders import pretrain_base_vision
    from .rvegen import generate_aux_corpus
    from .trainer import pretrain, split_dataset

    samples = _load_samples(root, args.data)
    run = Run(root, "pretrain", cfg)
    enc_cfg = cfg.encoder_config()
    base_state = None
    if enc_cfg.freeze_base:
        if args.base:
            base_state, _ = checkpoint.load(_require(args.base))
        else:
            aux = generate_aux_corpus(cfg.encoders.aux_count, cfg.seed, image_size=enc_cfg.image_size)
            base_state, report = pretrain_base_vision(aux, enc_cfg, cfg.base_config(), run.path("base.ckpt"))
            run.path("base_report.json").write_text(json.dumps(
                {"holdout_accuracy": report["holdout_accuracy"], "loss_curve": report["loss_curve"]}, indent=1) + "\n")
    split = split_dataset([s.id for s in samples], cfg.seed, path=run.path("split.csv"))
    tcfg = dataclasses.replace(cfg.trainer, mode=args.mode or cfg.trainer.mode)
    res = pretrain(samples, split, tcfg, enc_cfg, base_state, run.dir, loss_cfg=cfg.losses, pareto_cfg=cfg.pareto)
    for name in ("train_log.csv", "loss_curves.csv", "final.ckpt", "best.ckpt"):
        run.path(name)
    log.info("pretrain done: final %s", res.final_path)
    return run.finish()


def cmd_retrieve(args, cfg: ExperimentConfig, root: Path) -> Path:
    from .downstream import property_deviation, retrieve_all, topk_accuracy, write_metrics
    from .rvegen import target_matrix

    samples = _load_samples(root, args.data)
    model = _load_model(root, args.checkpoint)
    split = _split(root, samples)
    by_id = {s.id: s for s in samples}
    test = [by_id[i] for i in split.test]
    hv, ht = model.encode(test)
    ids = [s.id for s in test]
    targets = dict(zip(ids, target_matrix(test)))
    ks = args.k or cfg.ks()
    rows = [("random_baseline", "retrieval", "none", min(k, len(ids)) / len(ids)) for k in ks]
    for direction, q, c in (("image_to_tabular", hv, ht), ("tabular_to_image", ht, hv)):
        for k in ks:
            res = retrieve_all(q, c, ids, k, targets)
            rows.append((f"top{k}_accuracy", "retrieval", direction, topk_accuracy(res)))
            dev = property_deviation(res)
            for name, v in zip(PROPERTIES, dev):
                rows.append((f"top{k}_deviation_{name}", "retrieval", direction, v))
            rows.append((f"top{k}_deviation_mean_z", "retrieval", direction,
                         float(np.mean(dev / model.target_norm.std))))
    run = Run(root, "retrieve", cfg)
    write_metrics(run.path("metrics.csv"), rows)
    return run.finish()


def cmd_predict(args, cfg: ExperimentConfig, root: Path) -> Path:
    from .downstream import PredictorConfig, fuse, train_predictor, write_metrics
    from .rvegen import target_matrix
    from .trainer import split_dataset

    samples = _load_samples(root, args.data)
    model = _load_model(root, args.checkpoint)
    ds = cfg.downstream
    hv, ht = model.encode(samples)
    y = target_matrix(samples)
    split = split_dataset(range(len(samples)), ds.split_seed)
    pcfg = PredictorConfig(lr=ds.lr, epochs=ds.epochs, patience=ds.patience, batch_size=ds.batch_size, seed=cfg.seed)
    rows = []
    for modality, feats, fusion in (("tabular", ht, False), ("vision", hv, False), ("fusion", fuse(hv, ht), True)):
        for j, name in enumerate(PROPERTIES):
            res = train_predictor(feats, y[:, j], split, fusion, pcfg)
            rows += [("rmse", name, modality, res.metrics["rmse"]), ("r2", name, modality, res.metrics["r2"])]
    run = Run(root, "predict", cfg)
    write_metrics(run.path("metrics.csv"), rows)
    return run.finish()


def cmd_generate(args, cfg: ExperimentConfig, root: Path) -> Path:
    from .diffgen import (DiffusionSchedule, DiffusionTrainConfig, DecoderNet, PriorNet, downsample, generate,
                          train_decoder, train_prior, write_generated)
    from .rvegen import descriptor_matrix, fiber_count, image_stack

    samples = _load_samples(root, args.data)
    model = _load_model(root, args.checkpoint)
    split = _split(root, samples)
    g = cfg.diffgen
    sched = DiffusionSchedule(g.K, g.beta_start, g.beta_end)
    by_id = {s.id: s for s in samples}
    train = [by_id[i] for i in split.train]
    run = Run(root, "generate", cfg)
    hv, ht = model.encode(train)
    d = hv.shape[1]
    rng = np.random.default_rng(0)
    if args.prior:
        prior = PriorNet(d, rng, hidden=g.prior_hidden)
        prior.load_state_dict(checkpoint.load(_require(args.prior))[0])
    else:
        prior = train_prior(ht, hv, sched, DiffusionTrainConfig(g.lr, g.prior_epochs, g.batch_size, cfg.seed,
                                                                g.prior_hidden)).net
        checkpoint.save(run.path("prior.ckpt"), prior.state_dict(), {"kind": "prior"})
    if args.decoder:
        decoder = DecoderNet(g.size * g.size, d, rng, hidden=g.decoder_hidden, schedule=sched)
        decoder.load_state_dict(checkpoint.load(_require(args.decoder))[0])
    else:
        small = downsample(image_stack(train), g.size)
        decoder = train_decoder(small, hv, sched, DiffusionTrainConfig(g.lr, g.decoder_epochs, g.batch_size,
                                                                       cfg.seed, g.decoder_hidden)).net
        checkpoint.save(run.path("decoder.ckpt"), decoder.state_dict(), {"kind": "decoder"})
    truth = None
    if args.descriptor:
        desc = []
        for text in args.descriptor:
            vf, mma = (float(v) for v in text.split(","))
            desc.append([vf, mma, fiber_count(vf)])
        desc = np.array(desc, dtype=float)
    else:
        chosen = train[: g.n_samples]
        desc = descriptor_matrix(chosen)
        truth = downsample(image_stack(chosen), g.size)
    seeds = [cfg.seed * 100_003 + i for i in range(len(desc))]
    images = generate(desc, model, prior, decoder, sched, seeds, g.size)
    csv_path = write_generated(run.dir, images, desc, seeds, truth)
    run.files += [csv_path] + sorted((run.dir / "images").glob("gen_*.pgm"))
    return run.finish()


def cmd_eval(args, cfg: ExperimentConfig, root: Path) -> Path:
    from .downstream import band_means, project_2d, similarity_matrix, write_metrics, write_projection
    from .rvegen import target_matrix

    samples = _load_samples(root, args.data)
    model = _load_model(root, args.checkpoint)
    split = _split(root, samples)
    by_id = {s.id: s for s in samples}
    test = [by_id[i] for i in split.test]
    hv, ht = model.encode(test)
    y = target_matrix(test)
    sort_by = args.sort_by or cfg.downstream.sort_by
    if sort_by not in PROPERTIES:
        raise ConfigInvalid(f"sort_by must be one of {PROPERTIES}", ["downstream.sort_by"])
    run = Run(root, "eval", cfg)
    sim, _ = similarity_matrix(hv, ht, y[:, PROPERTIES.index(sort_by)], run.path("similarity.csv"))
    near, far = band_means(sim)
    cols = {name: y[:, j] for j, name in enumerate(PROPERTIES)}
    ids = [s.id for s in test]
    write_projection(run.path("projection_vision.csv"), ids, project_2d(hv), cols)
    write_projection(run.path("projection_tabular.csv"), ids, project_2d(ht), cols)
    write_metrics(run.path("metrics.csv"), [("near_diagonal_similarity", sort_by, "cross", near),
                                            ("far_diagonal_similarity", sort_by, "cross", far)])
    return run.finish()


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the paired image/descriptor dataset"),
    "pretrain": (cmd_pretrain, "pretrain both encoders (base rotation task, then contrastive)"),
    "retrieve": (cmd_retrieve, "cross-modal top-k retrieval on the test split"),
    "predict": (cmd_predict, "property prediction from frozen features"),
    "generate": (cmd_generate, "train the diffusion prior and decoder, then sample images"),
    "eval": (cmd_eval, "similarity matrix and 2-D projection exports"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="orderlab",
        description="Ordinal-aware image/tabular contrastive pretraining on synthetic fibre composites.",
        epilog=f"Outputs go to --out, else ${OUT_ENV}, else ./runs. Each command writes "
               "<out>/<command>/config.ini and manifest.json.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="INI config file (sections: global, rvegen, encoders, losses, "
                                         "pareto, trainer, downstream, diffgen)")
        sp.add_argument("--seed", type=int, help="global seed (also used as the trainer seed)")
        sp.add_argument("--out", help="output root directory")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        if name != "gen-data":
            sp.add_argument("--data", help="dataset manifest (default <out>/gen-data/manifest.csv)")
        if name in ("retrieve", "predict", "generate", "eval"):
            sp.add_argument("--checkpoint", help="encoder checkpoint (default <out>/pretrain/final.ckpt)")
        if name == "pretrain":
            sp.add_argument("--mode", choices=("order_dyn", "order_alpha", "cmcl"))
            sp.add_argument("--base", help="reuse a base vision checkpoint instead of pretraining one")
        if name == "retrieve":
            sp.add_argument("--k", type=int, action="append", help="retrieval depth (repeatable)")
        if name == "generate":
            sp.add_argument("--prior", help="trained prior checkpoint")
            sp.add_argument("--decoder", help="trained decoder checkpoint")
            sp.add_argument("--descriptor", action="append", metavar="VF,MMA",
                            help="descriptor to generate from (repeatable); default: train-split samples")
        if name == "eval":
            sp.add_argument("--sort-by", choices=PROPERTIES)
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid(f"override must look like section.key=value: {item!r}", [item])
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["global.seed"] = str(args.seed)
        overrides["trainer.seed"] = str(args.seed)
    if args.config:
        _require(args.config)
    cfg = load_config(args.config, overrides=overrides)
    out = args.out or cfg.sections["global"].out or os.environ.get(OUT_ENV) or "runs"
    cfg.sections["global"].out = str(out)
    return cfg, Path(out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=os.environ.get("ORDERLAB_LOG", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, root = _resolve(args)
        manifest = COMMANDS[args.command][0](args, cfg, root)
    except ConfigInvalid as exc:
        print(f"error: ConfigInvalid: {exc} keys={','.join(exc.keys)}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error: MissingArtifact: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - one-line report for any failure
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
