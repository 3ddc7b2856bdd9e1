"""Logistic-regression combination of predictor maps.

Features are pixel values of individual predictor maps, one column per
predictor in a fixed order (default: rec_error, kl_grad, rec_grad). ELBO-grad
is left out by default as it carries the same information as KL-grad and
Rec-grad together.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigurationError, DataError
from .predictors import AnomalyMap

DEFAULT_FEATURES = ("rec_error", "kl_grad", "rec_grad")


@dataclass
class SplitSpec:
    labeled_fraction: float = 0.10
    seed: int = 0
    stratify_by_image: bool = True

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ConfigurationError(f"labeled_fraction must be in (0, 1), got {self.labeled_fraction}")


@dataclass
class EnsembleWeights:
    features: list
    weights: np.ndarray
    bias: float
    standardized: bool = False
    feature_stats: Optional[list] = None  # [(mean, std), ...] when standardized
    seed: int = 0
    info: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "features": list(self.features),
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "standardized": bool(self.standardized),
            "feature_stats": None if self.feature_stats is None else [list(map(float, s)) for s in self.feature_stats],
            "seed": int(self.seed),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EnsembleWeights":
        d = json.loads(text)
        w = np.asarray(d["weights"], dtype=np.float64)
        if len(w) != len(d["features"]):
            raise DataError("ensemble weights length does not match feature list")
        stats = d.get("feature_stats")
        return cls(features=list(d["features"]), weights=w, bias=float(d["bias"]),
                   standardized=bool(d.get("standardized", False)),
                   feature_stats=None if stats is None else [tuple(s) for s in stats],
                   seed=int(d.get("seed", 0)))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "EnsembleWeights":
        return cls.from_json(Path(path).read_text())


def split_images(n_images: int, spec: SplitSpec):
    """Assign whole images to a labeled pool and a held-out pool.

    Returns sorted index arrays ``(labeled, heldout)``, each non-empty.
    """
    if n_images < 2:
        raise DataError("need at least two images to split")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n_images)
    k = min(max(1, int(round(spec.labeled_fraction * n_images))), n_images - 1)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split_pixels(n_images: int, pixels_per_image: int, spec: SplitSpec) -> np.ndarray:
    """Boolean labeled-pool indicator over pooled pixels ``(n_images * pixels_per_image,)``."""
    labeled = np.zeros((n_images, pixels_per_image), dtype=bool)
    if spec.stratify_by_image:
        idx, _ = split_images(n_images, spec)
        labeled[idx] = True
    else:
        rng = np.random.default_rng(spec.seed)
        labeled[:] = rng.random(labeled.shape) < spec.labeled_fraction
    return labeled.ravel()


def _stack_maps(maps, features):
    if isinstance(maps, dict):
        missing = [f for f in features if f not in maps]
        if missing:
            raise ConfigurationError(f"missing predictor maps: {', '.join(missing)}")
        cols = [np.asarray(maps[f], dtype=np.float64) for f in features]
        shape = cols[0].shape
        if any(c.shape != shape for c in cols):
            raise ConfigurationError("predictor maps differ in shape")
        return np.stack([c.reshape(-1) for c in cols], axis=1), shape
    # list of per-image collections of AnomalyMap
    per_image = []
    shape = None
    for item in maps:
        by_kind = item if isinstance(item, dict) else {m.kind: m for m in item}
        row = []
        for f in features:
            if f not in by_kind:
                raise ConfigurationError(f"image is missing predictor map {f!r}")
            m = by_kind[f]
            s = np.asarray(m.scores if isinstance(m, AnomalyMap) else m, dtype=np.float64)
            if shape is None:
                shape = s.shape
            if s.shape != shape:
                raise ConfigurationError(f"map shape {s.shape} != {shape}")
            row.append(s.reshape(-1))
        per_image.append(np.stack(row, axis=1))
    if not per_image:
        raise DataError("no maps given")
    return np.concatenate(per_image), (len(per_image),) + shape


def build_feature_matrix(maps, masks=None, features: Sequence[str] = DEFAULT_FEATURES):
    """Pixels-by-features matrix plus labels.

    ``maps`` is either ``{kind: array (B, H, W)}`` or a list with one entry
    per image, each a dict ``kind -> AnomalyMap`` or an iterable of
    AnomalyMap. Columns follow ``features`` regardless of input order.
    Labels are ``None`` when ``masks`` is not given.
    """
    X, shape = _stack_maps(maps, list(features))
    if masks is None:
        return X, None
    y = np.asarray(masks).astype(bool).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ConfigurationError(f"{y.shape[0]} mask pixels for {X.shape[0]} feature rows")
    return X, y.astype(np.float64)


def _objective(w, b, X, y, l2):
    s = X @ w + b
    # mean BCE written with log-sigmoid for stability
    nll = -np.mean(y * log_expit(s) + (1 - y) * log_expit(-s))
    return nll + 0.5 * l2 * float(w @ w)


def fit_logistic(X, y, l2: float = 1e-4, standardize: bool = False, tol: float = 1e-6,
                 max_iter: int = 10_000, features: Sequence[str] = DEFAULT_FEATURES,
                 seed: int = 0) -> EnsembleWeights:
    """Penalised logistic regression fitted by damped Newton iterations.

    Minimises mean binary cross-entropy + ``0.5 * l2 * ||w||^2`` (bias not
    penalised) until the gradient norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ConfigurationError(f"bad shapes X {X.shape}, y {y.shape}")
    if np.unique(y).size < 2:
        raise DataError("logistic fit needs both classes in the labels")
    if len(features) != X.shape[1]:
        features = [f"f{i}" for i in range(X.shape[1])]
    stats = None
    if standardize:
        mu = X.mean(0)
        sd = X.std(0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
        stats = list(zip(mu.tolist(), sd.tolist()))

    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    prior = y.mean()
    theta[-1] = np.log(prior / (1 - prior))
    pen = np.full(d + 1, l2)
    pen[-1] = 0.0

    def grad_of(th):
        p = expit(A @ th)
        return A.T @ (p - y) / n + pen * th, p

    g, p = grad_of(theta)
    f = _objective(theta[:-1], theta[-1], X, y, l2)
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break
        h = p * (1 - p)
        H = (A * h[:, None]).T @ A / n + np.diag(pen)
        H[np.diag_indices_from(H)] += 1e-12
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        while True:
            cand = theta - t * step
            fc = _objective(cand[:-1], cand[-1], X, y, l2)
            if fc <= f - 1e-4 * t * float(g @ step) or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12:
            # no progress along the Newton direction; fall back to a gradient step
            cand = theta - 1e-3 * g
            fc = _objective(cand[:-1], cand[-1], X, y, l2)
        theta, f = cand, fc
        g, p = grad_of(theta)
    return EnsembleWeights(features=list(features), weights=theta[:-1].copy(), bias=float(theta[-1]),
                           standardized=standardize, feature_stats=stats, seed=seed,
                           info={"iterations": it, "grad_norm": float(np.linalg.norm(g)),
                                 "objective": float(f)})


def decision_function(weights: EnsembleWeights, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != len(weights.weights):
        raise ConfigurationError(f"{X.shape[-1]} features given, weights expect {len(weights.weights)}")
    if weights.standardized:
        mu, sd = np.asarray(weights.feature_stats, dtype=np.float64).T
        X = (X - mu) / sd
    return X @ weights.weights + weights.bias


def predict_proba(weights: EnsembleWeights, X) -> np.ndarray:
    return expit(decision_function(weights, X))


def predict_map(weights: EnsembleWeights, maps, model_fingerprint: str = ""):
    """Per-pixel ``sigmoid(w . f + b)``.

    ``maps`` as in :func:`build_feature_matrix`. A dict of ``(H, W)`` arrays
    or a single image's collection gives one :class:`AnomalyMap`; batched
    input gives an array ``(B, H, W)``.
    """
    X, shape = _stack_maps(maps, weights.features)
    prob = predict_proba(weights, X).reshape(shape)
    if len(shape) == 2:
        return AnomalyMap(prob, "ensemble", model_fingerprint)
    if shape[0] == 1 and not isinstance(maps, dict):
        return AnomalyMap(prob[0], "ensemble", model_fingerprint)
    return prob
