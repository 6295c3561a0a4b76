"""Walk through the synthetic dataset and the two contrastive objectives.

Run with ``python3 demos/01_dataset_and_losses.py``; takes a few seconds.
"""

# %% A handful of paired samples: descriptor, 64x64 image and two surrogate properties
import numpy as np

from orderlab.autodiff import Tensor
from orderlab.losses import align_loss, order_loss_both
from orderlab.rvegen import descriptor_matrix, generate_dataset, target_matrix

samples = generate_dataset(12, seed=7)
for s in samples[:4]:
    d, p = s.descriptor, s.targets
    print(f"id {s.id:2d}  vf {d.vf:.3f}  mma {d.mma:.2f} deg  fibres {d.fiber_count:2d}  "
          f"yield {p.yield_strength:7.1f}  elongation {p.elongation:.2e}  image mean {s.image.mean():.3f}")

# %% Fibre coverage tracks vf: background is 0.1, fibres 1.0
img = np.stack([s.image for s in samples])
coverage = (img - 0.1).sum(axis=(1, 2)) / 0.9 / img[0].size
print("coverage - vf:", np.round(coverage - descriptor_matrix(samples)[:, 0], 3))

# %% Losses on random unit embeddings versus embeddings that mirror the targets
rng = np.random.default_rng(0)
y = target_matrix(samples)
z = (y - y.mean(0)) / y.std(0)


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


random_v, random_t = unit(rng.normal(size=(12, 8))), unit(rng.normal(size=(12, 8)))
# embed the z-scored targets on a curve so cosine similarity follows target distance
ordered = unit(np.concatenate([z, 0.3 * np.ones((12, 1))], axis=1))
for name, hv, ht in [("random", random_v, random_t), ("target-ordered", ordered, ordered)]:
    a = align_loss(Tensor(hv), Tensor(ht)).item()
    o = order_loss_both(Tensor(hv), Tensor(ht), z).item()
    print(f"{name:15s} align {a:8.3f}   order (both modalities) {o:.3f}")
