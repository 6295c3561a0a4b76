"""A scaled-down run of the whole pipeline (under a minute on one core).

Pretraining with the preference-guided objective and with alignment only,
then retrieval, property prediction, the sorted similarity matrix, and a
few generated microstructures. The full-size settings live in the default
config; see the README for the numbers they give.
"""

# %%
import logging
import tempfile
from pathlib import Path

import numpy as np

from orderlab.diffgen import (DiffusionSchedule, DiffusionTrainConfig, downsample, generate, psnr,
                              train_decoder, train_prior)
from orderlab.downstream import (band_means, fuse, property_deviation, retrieve_all, similarity_matrix,
                                 topk_accuracy, train_predictor)
from orderlab.encoders import BasePretrainConfig, EncoderConfig, pretrain_base_vision
from orderlab.rvegen import descriptor_matrix, generate_aux_corpus, generate_dataset, image_stack, target_matrix
from orderlab.trainer import TrainConfig, pretrain, split_dataset

logging.basicConfig(level=logging.WARNING)
out = Path(tempfile.mkdtemp(prefix="orderlab-demo-"))

# %% Data and a frozen vision base trained on rotation prediction
samples = generate_dataset(120, seed=0)
enc = EncoderConfig(d=32, vision_dim=32, vision_layers=2, tab_dim=32)
base, report = pretrain_base_vision(np.asarray(generate_aux_corpus(600, seed=0)), enc,
                                    BasePretrainConfig(epochs=14))
print("base rotation accuracy", report["holdout_accuracy"])

# %% Pretrain both ways on the same split
split = split_dataset([s.id for s in samples], seed=0)
models = {}
for mode in ("order_dyn", "cmcl"):
    res = pretrain(samples, split, TrainConfig(epochs=15, mode=mode, batch_size=16, lr=1e-3), enc, base,
                   out / mode)
    models[mode] = res.model
    print(mode, "first/last epoch", res.curves[0], res.curves[-1], sep="\n  ")

# %% Cross-modal retrieval on the test split
by_id = {s.id: s for s in samples}
test = [by_id[i] for i in split.test]
ids = [s.id for s in test]
targets = dict(zip(ids, target_matrix(test)))
for mode, model in models.items():
    hv, ht = model.encode(test)
    res = retrieve_all(hv, ht, ids, 5, targets)
    print(f"{mode:10s} top-5 {topk_accuracy(res):.2f} (random {5 / len(ids):.2f})  "
          f"deviation {property_deviation(res)}")
    sim, _ = similarity_matrix(hv, ht, sort_by=target_matrix(test)[:, 1])
    print("           near/far band similarity", band_means(sim, 2, 8))

# %% Yield prediction from frozen features
rows = split_dataset(range(len(samples)), seed=1)
hv, ht = models["order_dyn"].encode(samples)
y = target_matrix(samples)[:, 0]
for name, feats, fusion in [("tabular", ht, False), ("vision", hv, False), ("fusion", fuse(hv, ht), True)]:
    print(name, train_predictor(feats, y, rows, fusion).metrics)

# %% Generation at 16x16 with a short schedule
model = models["order_dyn"]
train = [by_id[i] for i in split.train]
hv, ht = model.encode(train)
small = downsample(image_stack(train), 16)
sched = DiffusionSchedule(K=200)
prior = train_prior(ht, hv, sched, DiffusionTrainConfig(lr=1e-3, epochs=60, hidden=128)).net
decoder = train_decoder(small, hv, sched, DiffusionTrainConfig(lr=1e-3, epochs=60, hidden=256)).net
gen = generate(descriptor_matrix(train[:6]), model, prior, decoder, sched, seeds=range(6), size=16)
print("PSNR own", np.mean([psnr(g, t) for g, t in zip(gen, small[:6])]),
      "shifted", np.mean([psnr(g, t) for g, t in zip(gen, np.roll(small[:6], 1, axis=0))]))
print("artifacts in", out)
