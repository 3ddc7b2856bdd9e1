# coding: utf-8

# # Pulling an anomalous image back onto the normal manifold
#
# Instead of trusting one reconstruction, we optimise the input itself:
# minimise reconstruction loss plus lam * L1 distance to the original image.
# Pixels that had to move a lot are the anomalous ones.

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from vaeloc.data import (AnomalySpec, SyntheticConfig, apply_normalization, generate_synthetic_normal,
                         inject_anomalies, normalize_dataset)
from vaeloc.model import ModelConfig
from vaeloc.trainer import TrainConfig, train
from vaeloc.predictors import predictor_maps
from vaeloc.projection import ProjectionConfig, proj_rec_error_batch
from vaeloc.metrics import pixel_auroc


raw = generate_synthetic_normal(SyntheticConfig(n_images=600, image_size=32, seed=0))
train_batch, stats = normalize_dataset(raw)
model = train(ModelConfig(image_size=32, latent_dim=16, encoder_channels=[16, 32, 64]), train_batch,
              TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, seed=0)).model

test_raw = generate_synthetic_normal(SyntheticConfig(n_images=30, image_size=32, seed=1))
test, masks = inject_anomalies(apply_normalization(test_raw, stats),
                               AnomalySpec(radius_range=(3, 5), intensity_shift_range=(3.0, 5.0), seed=2))


# ## Sweeping lam
#
# Small lam lets the image drift freely, large lam pins it to the input.
# The map is the squared displacement between input and best iterate.
# When lam is too large no step lowers the energy, the best iterate is the
# input itself and the map is all zeros (AUROC 0.5, every pixel tied).

rec = pixel_auroc(predictor_maps(model, test, ["rec_error"])["rec_error"], masks)
print("rec_error       AUROC %.3f" % rec)
results = {}
for lam in (0.1, 1.0, 10.0):
    maps, traces = proj_rec_error_batch(model, test, ProjectionConfig(lam=lam, max_iters=100))
    results[lam] = (maps, traces)
    steps = np.mean([t.n_steps for t in traces])
    print("proj lam=%-5g  AUROC %.3f  (mean %.0f steps)" % (lam, pixel_auroc(maps, masks), steps))


# ## Energy along the optimisation
#
# Adam does not decrease the energy monotonically, so we keep the best
# iterate seen. The trace records both terms of the energy.

maps, traces = results[0.1]
t = traces[0]
fig, ax = plt.subplots(1, 4, figsize=(13, 3))
ax[0].plot(t.energies, label="energy")
ax[0].plot(t.rec_terms, label="rec term")
ax[0].axvline(t.best_index, color="k", lw=0.5)
ax[0].legend()
ax[1].imshow(test[0, 0], cmap="gray")
ax[1].set_title("input")
ax[2].imshow(t.best_iterate, cmap="gray")
ax[2].set_title("projected")
ax[3].imshow(maps[0], cmap="inferno")
ax[3].set_title("squared displacement")
fig.tight_layout()
fig.savefig("demo_projection.png", dpi=80)
print("saved demo_projection.png")
