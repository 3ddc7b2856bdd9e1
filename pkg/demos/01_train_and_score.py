# coding: utf-8

# # Training a VAE on normal images and scoring anomalies
#
# The model only ever sees anomaly-free images. At test time we feed it
# images with a bright disk pasted in and look at several per-pixel scores.
# Everything here is small enough to run on a laptop CPU in about a minute.

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from vaeloc.data import (AnomalySpec, SyntheticConfig, apply_normalization, generate_synthetic_normal,
                         inject_anomalies, normalize_dataset)
from vaeloc.model import ModelConfig
from vaeloc.trainer import TrainConfig, train
from vaeloc.predictors import PREDICTOR_KINDS, predictor_maps
from vaeloc.metrics import pixel_auroc


# ## Normal data
#
# 600 images of smooth Gaussian blobs, 32x32. We normalise with the training
# mean/std and reuse those statistics for the test images.

raw = generate_synthetic_normal(SyntheticConfig(n_images=600, image_size=32, texture="gaussian_blobs", seed=0))
train_batch, stats = normalize_dataset(raw)
print("train", train_batch.data.shape, "stats", stats)


# ## Model
#
# Three stride-2 conv layers take 32x32 down to 4x4; a latent of 16 dims.

mcfg = ModelConfig(image_size=32, latent_dim=16, encoder_channels=[16, 32, 64])
result = train(mcfg, train_batch, TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, seed=0))
for h in result.history[::5] + [result.history[-1]]:
    print("epoch %(epoch)3d  rec %(rec_nll)8.2f  kl %(kl)7.2f" % h)
model = result.model


# ## Test images with anomalies
#
# Disks of radius 3-5 px, brighter by 3-5 training stds.

test_raw = generate_synthetic_normal(SyntheticConfig(n_images=40, image_size=32, seed=1))
spec = AnomalySpec(shape="disk", radius_range=(3, 5), intensity_shift_range=(3.0, 5.0), seed=2)
test, masks = inject_anomalies(apply_normalization(test_raw, stats), spec)
print("anomalous pixel fraction %.3f" % masks.mean())


# ## Scores
#
# All five predictors in one call. Pixel AUROC pools every test pixel into a
# single ROC curve.

maps = predictor_maps(model, test, PREDICTOR_KINDS)
for k in PREDICTOR_KINDS:
    print("%-10s AUROC %.3f" % (k, pixel_auroc(maps[k], masks)))


# ## A look at one image

i = 0
fig, axes = plt.subplots(1, 2 + len(PREDICTOR_KINDS), figsize=(16, 2.6))
axes[0].imshow(test[i, 0], cmap="gray")
axes[0].set_title("input")
axes[1].imshow(masks[i], cmap="gray")
axes[1].set_title("mask")
for ax, k in zip(axes[2:], PREDICTOR_KINDS):
    ax.imshow(maps[k][i], cmap="inferno")
    ax.set_title(k)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("demo_scores.png", dpi=80)
print("saved demo_scores.png")
