# coding: utf-8

# # Combining predictors with logistic regression
#
# Rec-Error, KL-grad and Rec-grad look at different things. With a few
# labelled test images we can learn how to weigh them per pixel. The fit
# uses 10% of the images; AUROC is reported on the other 90%.


from vaeloc import ensemble as ens
from vaeloc.data import (AnomalySpec, SyntheticConfig, apply_normalization, generate_synthetic_normal,
                         inject_anomalies, normalize_dataset)
from vaeloc.model import ModelConfig
from vaeloc.trainer import TrainConfig, train
from vaeloc.predictors import predictor_maps
from vaeloc.metrics import pixel_auroc


raw = generate_synthetic_normal(SyntheticConfig(n_images=600, image_size=32, seed=0))
train_batch, stats = normalize_dataset(raw)
model = train(ModelConfig(image_size=32, latent_dim=16, encoder_channels=[16, 32, 64]), train_batch,
              TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, seed=0)).model

test_raw = generate_synthetic_normal(SyntheticConfig(n_images=60, image_size=32, seed=1))
test, masks = inject_anomalies(apply_normalization(test_raw, stats),
                               AnomalySpec(radius_range=(3, 5), intensity_shift_range=(3.0, 5.0), seed=2))
maps = predictor_maps(model, test, ens.DEFAULT_FEATURES)


# Whole images go to one side of the split so no image leaks pixels into both.

labeled, heldout = ens.split_images(len(test), ens.SplitSpec(labeled_fraction=0.10, seed=0))
X, y = ens.build_feature_matrix({k: v[labeled] for k, v in maps.items()}, masks[labeled])
print("fitting on", X.shape[0], "pixels from", len(labeled), "images")

w = ens.fit_logistic(X, y)
print("raw weights", {f: round(float(v), 4) for f, v in zip(w.features, w.weights)}, "bias %.3f" % w.bias)
print("newton iterations", w.info["iterations"], "grad norm %.1e" % w.info["grad_norm"])


# Raw feature scales differ by orders of magnitude and the weights absorb
# that. Standardised weights are easier to compare.

ws = ens.fit_logistic(X, y, standardize=True)
print("standardised weights", {f: round(float(v), 3) for f, v in zip(ws.features, ws.weights)})

X_te, y_te = ens.build_feature_matrix({k: v[heldout] for k, v in maps.items()}, masks[heldout])
print()
print("held-out AUROC")
for j, f in enumerate(ens.DEFAULT_FEATURES):
    print("  %-10s %.3f" % (f, pixel_auroc(X_te[:, j], y_te)))
print("  %-10s %.3f" % ("ensemble", pixel_auroc(ens.decision_function(w, X_te), y_te)))

w.save("demo_weights.json")
print("saved demo_weights.json")
