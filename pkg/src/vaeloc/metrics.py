"""Pixel-wise AUROC and dataset-level evaluation.

AUROC pools every pixel of the test set into one ROC curve (no per-image
averaging) and treats ties with midranks, i.e. it is the normalised
Mann-Whitney U statistic.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import ensemble as ens
from .errors import ConfigurationError, DataError
from .model import VAE, ImageBatch
from .predictors import PREDICTOR_KINDS, predictor_maps
from .projection import ProjectionConfig, proj_rec_error_batch
from .trainer import fingerprint

log = logging.getLogger(__name__)

EVAL_PREDICTORS = PREDICTOR_KINDS + ("proj_rec_error", "ensemble")
DEFAULT_LAMBDAS = (0.1, 1.0, 10.0)


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ConfigurationError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DataError("AUROC needs both positive and negative pixels")
    if not np.isfinite(s).all():
        raise DataError("AUROC scores contain NaN/Inf")
    return s, y, n_pos, y.size - n_pos


def pixel_auroc(scores, labels) -> float:
    """Rank-statistic AUROC over all given pixels."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce_oracle(scores, labels) -> float:
    """(wins + 0.5 * ties) / (P * N) by direct pairwise comparison."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    pos, neg = s[y], s[~y]
    wins = ties = 0
    for start in range(0, n_pos, 256):
        p = pos[start:start + 256, None]
        wins += int((p > neg[None]).sum())
        ties += int((p == neg[None]).sum())
    return (wins + 0.5 * ties) / (n_pos * n_neg)


@dataclass
class EvalReport:
    per_predictor_auroc: dict
    pixel_count: int
    positive_fraction: float
    config_fingerprint: str
    seed: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_predictor_auroc": {k: float(v) for k, v in self.per_predictor_auroc.items()},
                "pixel_count": int(self.pixel_count),
                "positive_fraction": float(self.positive_fraction),
                "config_fingerprint": self.config_fingerprint,
                "seed": int(self.seed),
                "details": self.details}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_markdown(self, row_label: str = "model") -> str:
        return markdown_table([(row_label, self)])


_COLUMN_TITLES = {"rec_error": "Rec-Error", "elbo_grad": "ELBO-grad", "kl_grad": "KL-grad",
                  "rec_grad": "Rec-grad", "combi": "Combi", "proj_rec_error": "Proj-Rec-Error",
                  "ensemble": "Ensemble"}


def markdown_table(rows, row_header: str = "setting") -> str:
    """One row per ``(label, EvalReport)``, one AUROC column per predictor."""
    cols = []
    for _, rep in rows:
        cols += [k for k in rep.per_predictor_auroc if k not in cols]
    lines = ["| " + " | ".join([row_header] + [_COLUMN_TITLES.get(c, c) for c in cols]) + " |",
             "|" + "---|" * (len(cols) + 1)]
    for label, rep in rows:
        vals = [f"{rep.per_predictor_auroc[c]:.3f}" if c in rep.per_predictor_auroc else "" for c in cols]
        lines.append("| " + " | ".join([str(label)] + vals) + " |")
    return "\n".join(lines) + "\n"


def compute_maps(model: VAE, images, predictors: Sequence[str],
                 projection_cfg: Optional[ProjectionConfig] = None,
                 lambdas: Optional[Sequence[float]] = None, abs_rec_grad: bool = True) -> dict:
    """All requested maps as ``{name: (B, H, W)}``. Projection maps are keyed
    ``proj_rec_error@<lambda>``."""
    x = images.data if isinstance(images, ImageBatch) else np.asarray(images)
    kinds = [p for p in predictors if p in PREDICTOR_KINDS]
    if "ensemble" in predictors:
        kinds += [f for f in ens.DEFAULT_FEATURES if f not in kinds]
    out = predictor_maps(model, x, kinds, abs_rec_grad=abs_rec_grad) if kinds else {}
    if "proj_rec_error" in predictors:
        base = projection_cfg or ProjectionConfig()
        for lam in (lambdas or (base.lam,)):
            cfg = ProjectionConfig(**{**base.__dict__, "lam": float(lam)})
            out[f"proj_rec_error@{lam:g}"], _ = proj_rec_error_batch(model, x, cfg)
    return out


def evaluate_maps(maps: dict, masks, predictors: Sequence[str],
                  split: Optional[ens.SplitSpec] = None, seed: int = 0,
                  ensemble_l2: float = 1e-4, ensemble_standardize: bool = False):
    """AUROC per predictor from precomputed maps.

    ``proj_rec_error`` reports the best lambda found among the
    ``proj_rec_error@<lambda>`` entries. ``ensemble`` is fitted on the labeled
    split and scored on the held-out images, next to every single predictor
    on the same held-out images.
    """
    masks = np.asarray(masks).astype(bool)
    result, details = {}, {}
    for p in predictors:
        if p in PREDICTOR_KINDS:
            result[p] = pixel_auroc(maps[p], masks)
        elif p == "proj_rec_error":
            by_lam = {k.split("@", 1)[1]: pixel_auroc(v, masks)
                      for k, v in maps.items() if k.startswith("proj_rec_error@")}
            if not by_lam:
                raise ConfigurationError("no projection maps computed")
            best = max(by_lam, key=lambda k: by_lam[k])
            result[p] = by_lam[best]
            details["proj_rec_error_by_lambda"] = by_lam
            details["best_lambda"] = float(best)
        elif p != "ensemble":
            raise ConfigurationError(f"unknown predictor {p!r}; valid: {', '.join(EVAL_PREDICTORS)}")
    if "ensemble" in predictors:
        split = split or ens.SplitSpec(seed=seed)
        labeled, heldout = ens.split_images(masks.shape[0], split)
        feats = {f: maps[f] for f in ens.DEFAULT_FEATURES}
        X_tr, y_tr = ens.build_feature_matrix({f: v[labeled] for f, v in feats.items()}, masks[labeled])
        w = ens.fit_logistic(X_tr, y_tr, l2=ensemble_l2, standardize=ensemble_standardize, seed=split.seed)
        X_te, _ = ens.build_feature_matrix({f: v[heldout] for f, v in feats.items()})
        result["ensemble"] = pixel_auroc(ens.decision_function(w, X_te), masks[heldout])
        details["heldout_auroc"] = {k: pixel_auroc(v[heldout], masks[heldout])
                                    for k, v in maps.items() if k in PREDICTOR_KINDS or k.startswith("proj_")}
        details["ensemble_weights"] = json.loads(w.to_json())
        details["ensemble_labeled_images"] = labeled.tolist()
    return result, details


def evaluate_dataset(model: VAE, images, masks, predictors: Sequence[str] = PREDICTOR_KINDS,
                     projection_cfg: Optional[ProjectionConfig] = None,
                     lambdas: Optional[Sequence[float]] = None,
                     split: Optional[ens.SplitSpec] = None, seed: int = 0,
                     abs_rec_grad: bool = True) -> EvalReport:
    """Score a labelled test set and return one pooled AUROC per predictor."""
    predictors = list(predictors)
    bad = [p for p in predictors if p not in EVAL_PREDICTORS]
    if bad:
        raise ConfigurationError(f"unknown predictor(s) {', '.join(bad)}; valid: {', '.join(EVAL_PREDICTORS)}")
    x = images.data if isinstance(images, ImageBatch) else np.asarray(images)
    if x.shape[0] == 0:
        raise DataError("test set is empty")
    if masks is None:
        raise DataError("evaluation needs ground-truth masks")
    masks = np.asarray(masks).astype(bool)
    if masks.shape != (x.shape[0],) + x.shape[-2:]:
        raise ConfigurationError(f"masks shape {masks.shape} does not match images {x.shape}")
    if "proj_rec_error" in predictors and lambdas is None:
        lambdas = DEFAULT_LAMBDAS if projection_cfg is None else (projection_cfg.lam,)

    maps = compute_maps(model, x, predictors, projection_cfg, lambdas, abs_rec_grad)
    auroc, details = evaluate_maps(maps, masks, predictors, split=split, seed=seed)
    cfg_blob = {"model": model.fingerprint(), "predictors": predictors, "seed": seed,
                "projection": None if projection_cfg is None else projection_cfg.__dict__,
                "lambdas": None if lambdas is None else [float(v) for v in lambdas],
                "split": None if split is None else split.__dict__, "abs_rec_grad": abs_rec_grad,
                "n_images": int(x.shape[0])}
    return EvalReport(per_predictor_auroc=auroc, pixel_count=int(masks.size),
                      positive_fraction=float(masks.mean()), config_fingerprint=fingerprint(cfg_blob),
                      seed=seed, details=details)


def save_report(report: EvalReport, out_dir, row_label: str = "model"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.md").write_text(report.to_markdown(row_label))
    return out / "report.json", out / "report.md"
