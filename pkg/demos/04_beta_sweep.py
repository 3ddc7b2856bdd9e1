# coding: utf-8

# # How the KL weight changes things
#
# beta multiplies the KL term of the training loss. Larger beta squeezes the
# posterior toward the prior: the KL term drops and reconstructions blur.
# Here we train three models on the same data and compare.


from vaeloc.data import (AnomalySpec, SyntheticConfig, apply_normalization, generate_synthetic_normal,
                         inject_anomalies, normalize_dataset)
from vaeloc.model import ModelConfig
from vaeloc.trainer import TrainConfig, train
from vaeloc.predictors import PREDICTOR_KINDS, predictor_maps
from vaeloc.metrics import markdown_table, pixel_auroc, EvalReport


raw = generate_synthetic_normal(SyntheticConfig(n_images=600, image_size=32, seed=0))
train_batch, stats = normalize_dataset(raw)
test_raw = generate_synthetic_normal(SyntheticConfig(n_images=40, image_size=32, seed=1))
test, masks = inject_anomalies(apply_normalization(test_raw, stats),
                               AnomalySpec(radius_range=(3, 5), intensity_shift_range=(3.0, 5.0), seed=2))

mcfg = ModelConfig(image_size=32, latent_dim=16, encoder_channels=[16, 32, 64])
rows = []
for beta in (0.1, 1.0, 10.0):
    res = train(mcfg, train_batch, TrainConfig(epochs=10, batch_size=32, learning_rate=1e-3, beta=beta, seed=0))
    last = res.history[-1]
    print("beta %-4g final rec %8.2f  kl %7.2f" % (beta, last["rec_nll"], last["kl"]))
    maps = predictor_maps(res.model, test)
    auroc = {k: pixel_auroc(maps[k], masks) for k in PREDICTOR_KINDS}
    rows.append(("beta=%g" % beta, EvalReport(auroc, masks.size, float(masks.mean()), "", 0)))


# Same layout as a results table: one row per model, one AUROC column per
# predictor.

print()
print(markdown_table(rows, row_header="model"))
