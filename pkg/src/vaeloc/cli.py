"""Command-line entry point: ``vaeloc <subcommand> [flags]``.

Settings come from, in increasing precedence: built-in defaults, a flat
``key = value`` config file (``--config``), command-line flags. Every
subcommand writes ``resolved_config.txt`` with all settings materialised.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
line ``error[<category>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigurationError, VaelocError
from .gridio import read_grid, write_grid, write_heatmap_png

log = logging.getLogger("vaeloc")

# Every tunable setting and its default; the reference copy is defaults.conf.
DEFAULTS = {
    "seed": 0,
    "out": "out",
    "workers": 1,
    "data": "",
    "checkpoint": "",
    "maps": "",
    # synth
    "n_images": 100,
    "image_size": 64,
    "texture": "gaussian_blobs",
    "anomalies": False,
    "anomaly_shape": "disk",
    "radius_min": 6,
    "radius_max": 10,
    "shift_min": 3.0,
    "shift_max": 5.0,
    "shift_sign": "positive",
    # model / training
    "latent_dim": 32,
    "encoder_channels": "16,32,64,256",
    "epochs": 500,
    "batch_size": 64,
    "learning_rate": 1e-4,
    "beta": 1.0,
    "checkpoint_every": 0,
    "noise_std": 0.0,
    "rotation_degrees_max": 0.0,
    "intensity_jitter": 0.0,
    # scoring
    "predictors": "rec_error,elbo_grad,kl_grad,rec_grad,combi",
    "abs_rec_grad": True,
    # projection
    "lambda": "1.0",
    "alpha": 0.03,
    "iters": 100,
    "patience": 20,
    "map_mode": "displacement",
    # ensemble
    "labeled_fraction": 0.10,
    "l2": 1e-4,
    "standardize": False,
}

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


class UsageError(VaelocError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys may use
    dashes or underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown setting '{key}'")
        out[key] = value
    return out


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        if isinstance(default, bool):
            if value.lower() not in _BOOL:
                raise UsageError(f"setting '{key}' expects true/false, got {value!r}")
            return _BOOL[value.lower()]
        try:
            return type(default)(value)
        except ValueError:
            raise UsageError(f"setting '{key}' expects {type(default).__name__}, got {value!r}") from None
    return value


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(parse_config_file(args.config))
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    return {k: _coerce(k, v) for k, v in settings.items()}


def write_resolved(out: Path, settings: dict, command: str):
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# resolved settings for 'vaeloc {command}'"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(settings.items())]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else str(v)


def _csv(s, cast=str):
    return [cast(p.strip()) for p in str(s).split(",") if p.strip()]


def _check_predictors(names, valid):
    bad = [n for n in names if n not in valid]
    if bad or not names:
        raise UsageError(f"invalid predictor(s) {', '.join(bad) or '(none)'}; valid: {', '.join(valid)}")
    return names


def _chunks(n, workers):
    size = max(1, -(-n // max(1, workers)))
    return [slice(i, min(n, i + size)) for i in range(0, n, size)]


def _parallel(fn, n, workers):
    """Apply ``fn(slice)`` over image chunks; results stay in index order."""
    chunks = _chunks(n, workers)
    if workers <= 1 or len(chunks) == 1:
        return [fn(s) for s in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


# --- subcommands -------------------------------------------------------------

def cmd_synth(s: dict) -> int:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    raw = D.generate_synthetic_normal(D.SyntheticConfig(s["n_images"], s["image_size"], s["texture"], seed=s["seed"]))
    manifest = {"kind": "synthetic", "texture": s["texture"], "seed": s["seed"], "n_images": s["n_images"],
                "image_size": s["image_size"], "files": []}
    masks = None
    if s["anomalies"]:
        spec = D.AnomalySpec(shape=s["anomaly_shape"], radius_range=(s["radius_min"], s["radius_max"]),
                             intensity_shift_range=(s["shift_min"], s["shift_max"]),
                             sign=s["shift_sign"], seed=s["seed"] + 1)
        # shifts are expressed in dataset-std units of the generated images
        mean, std = D.dataset_stats(raw)
        normed, masks = D.inject_anomalies(D.apply_normalization(raw, (mean, std)), spec)
        raw = D.denormalize(normed, (mean, std))
        (out / "masks").mkdir(exist_ok=True)
        manifest["anomaly"] = {"shape": spec.shape, "radius_range": list(spec.radius_range),
                               "intensity_shift_std_units": list(spec.intensity_shift_range),
                               "sign": spec.sign, "seed": spec.seed}
    from PIL import Image

    for i in range(raw.shape[0]):
        name = f"img_{i:05d}"
        write_grid(out / f"{name}.grid", raw[i, 0])
        manifest["files"].append(f"{name}.grid")
        if masks is not None:
            Image.fromarray(masks[i].astype(np.uint8) * 255).save(out / "masks" / f"{name}.png")
    D.write_manifest(out / "manifest.json", manifest)
    write_resolved(out, s, "synth")
    print(f"wrote {raw.shape[0]} images to {out}")
    return 0


def _need(s, key, flag):
    if not s.get(key):
        raise UsageError(f"{flag} is required")
    return s[key]


def _model_config(s):
    from .model import ModelConfig
    return ModelConfig(image_size=s["image_size"], latent_dim=s["latent_dim"],
                       encoder_channels=_csv(s["encoder_channels"], int))


def cmd_train(s: dict) -> int:
    from .trainer import TrainConfig, train

    out = Path(s["out"])
    loaded = D.load_image_dir(_need(s, "data", "--data"), s["image_size"])
    aug = D.AugmentConfig(s["noise_std"], s["rotation_degrees_max"], s["intensity_jitter"], seed=s["seed"])
    cfg = TrainConfig(epochs=s["epochs"], learning_rate=s["learning_rate"], batch_size=s["batch_size"],
                      beta=s["beta"], seed=s["seed"], checkpoint_every=s["checkpoint_every"],
                      augment=None if aug.is_identity else aug)
    res = train(_model_config(s), loaded.batch, cfg, out_dir=out)
    D.write_manifest(out / "train_manifest.json", loaded.manifest())
    write_resolved(out, s, "train")
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def _load_for_scoring(s):
    from .trainer import load_checkpoint

    ck = load_checkpoint(_need(s, "checkpoint", "--checkpoint"))
    loaded = D.load_image_dir(_need(s, "data", "--data"), ck.model.config.image_size,
                              normalization=ck.normalization_stats)
    return ck, loaded


def cmd_score(s: dict) -> int:
    from .predictors import PREDICTOR_KINDS, predictor_maps

    kinds = _check_predictors(_csv(s["predictors"]), PREDICTOR_KINDS)
    ck, loaded = _load_for_scoring(s)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    x = loaded.batch.data
    parts = _parallel(lambda sl: predictor_maps(ck.model, x[sl], kinds, abs_rec_grad=s["abs_rec_grad"]),
                      x.shape[0], s["workers"])
    maps = {k: np.concatenate([p[k] for p in parts]) for k in kinds}
    for i, name in enumerate(loaded.names):
        stem = Path(name).stem
        for k in kinds:
            write_grid(out / f"{stem}.{k}.grid", maps[k][i])
            write_heatmap_png(out / f"{stem}.{k}.png", maps[k][i])
    D.write_manifest(out / "manifest.json", {**loaded.manifest(), "predictors": kinds,
                                             "model_fingerprint": ck.model.fingerprint()})
    write_resolved(out, s, "score")
    print(f"wrote {len(kinds)} maps for {len(loaded.names)} images to {out}")
    return 0


def _projection_config(s, lam=None):
    from .projection import ProjectionConfig
    return ProjectionConfig(alpha=s["alpha"], lam=float(lam if lam is not None else _csv(s["lambda"], float)[0]),
                            max_iters=s["iters"], early_stop_patience=s["patience"],
                            map_mode=s["map_mode"], seed=s["seed"])


def cmd_project(s: dict) -> int:
    from .projection import proj_rec_error_batch, write_trace_csv

    ck, loaded = _load_for_scoring(s)
    cfg = _projection_config(s)
    out = Path(s["out"])
    for sub in ("projected", "traces", "maps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    x = loaded.batch.data
    parts = _parallel(lambda sl: proj_rec_error_batch(ck.model, x[sl], cfg), x.shape[0], s["workers"])
    maps = np.concatenate([p[0] for p in parts])
    traces = [t for p in parts for t in p[1]]
    for i, name in enumerate(loaded.names):
        stem = Path(name).stem
        write_grid(out / "projected" / f"{stem}.grid", traces[i].best_iterate)
        write_trace_csv(out / "traces" / f"{stem}.csv", traces[i])
        write_grid(out / "maps" / f"{stem}.proj_rec_error.grid", maps[i])
        write_heatmap_png(out / "maps" / f"{stem}.proj_rec_error.png", maps[i])
        if traces[i].warning:
            log.warning("%s: %s", name, traces[i].warning)
    write_resolved(out, s, "project")
    print(f"projected {len(loaded.names)} images into {out}")
    return 0


def cmd_ensemble(s: dict) -> int:
    from . import ensemble as ens
    from .metrics import pixel_auroc

    maps_dir = Path(_need(s, "maps", "--maps"))
    data_dir = Path(_need(s, "data", "--data"))
    mask_dir = data_dir / "masks"
    if not mask_dir.is_dir():
        raise UsageError(f"{data_dir} has no masks/ subdirectory")
    stems = sorted(p.stem for p in mask_dir.iterdir() if p.suffix.lower() in D.IMAGE_SUFFIXES)
    if not stems:
        raise VaelocError(f"no masks in {mask_dir}")
    feats = list(ens.DEFAULT_FEATURES)
    maps = {f: [] for f in feats}
    masks = []
    for stem in stems:
        for f in feats:
            p = maps_dir / f"{stem}.{f}.grid"
            if not p.exists():
                raise VaelocError(f"missing map {p.name} in {maps_dir}")
            maps[f].append(read_grid(p))
        m = D._read_gray(mask_dir / next(q.name for q in mask_dir.iterdir() if q.stem == stem))
        masks.append(m != 0)
    maps = {f: np.stack(v) for f, v in maps.items()}
    masks = np.stack(masks)
    split = ens.SplitSpec(labeled_fraction=s["labeled_fraction"], seed=s["seed"])
    labeled, heldout = ens.split_images(len(stems), split)
    X, y = ens.build_feature_matrix({f: v[labeled] for f, v in maps.items()}, masks[labeled])
    w = ens.fit_logistic(X, y, l2=s["l2"], standardize=s["standardize"], seed=s["seed"])
    X_te, y_te = ens.build_feature_matrix({f: v[heldout] for f, v in maps.items()}, masks[heldout])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    w.save(out / "weights.json")
    result = {"ensemble": pixel_auroc(ens.decision_function(w, X_te), y_te)}
    for j, f in enumerate(feats):
        result[f] = pixel_auroc(X_te[:, j], y_te)
    summary = {"heldout_auroc": result, "labeled_images": [stems[i] for i in labeled],
               "heldout_images": len(heldout)}
    (out / "ensemble_eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_resolved(out, s, "ensemble")
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_evaluate(s: dict) -> int:
    from .ensemble import SplitSpec
    from .metrics import EVAL_PREDICTORS, evaluate_dataset, save_report

    preds = _check_predictors(_csv(s["predictors"]), EVAL_PREDICTORS)
    ck, loaded = _load_for_scoring(s)
    if loaded.masks is None:
        raise VaelocError(f"{s['data']} has no masks/ subdirectory")
    lambdas = _csv(s["lambda"], float)
    report = evaluate_dataset(ck.model, loaded.batch, loaded.masks, preds,
                              projection_cfg=_projection_config(s, lambdas[0]), lambdas=lambdas,
                              split=SplitSpec(s["labeled_fraction"], seed=s["seed"]), seed=s["seed"],
                              abs_rec_grad=s["abs_rec_grad"])
    out = Path(s["out"])
    label = f"l={ck.model.latent_dim}, beta={ck.train_config.get('beta', '?')}"
    save_report(report, out, row_label=label)
    write_resolved(out, s, "evaluate")
    print(report.to_markdown(label), end="")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "project": cmd_project,
            "ensemble": cmd_ensemble, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vaeloc", description="VAE-based unsupervised anomaly localization")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key = value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--n-images", dest="n_images", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.add_argument("--texture", choices=D.TEXTURES)
    sp.add_argument("--anomalies", action="store_const", const=True, default=None)
    sp.add_argument("--anomaly-shape", dest="anomaly_shape", choices=D.ANOMALY_SHAPES)
    sp.add_argument("--shift-min", dest="shift_min", type=float)
    sp.add_argument("--shift-max", dest="shift_max", type=float)

    sp = sub.add_parser("train", help="train a (beta-)VAE on normal images")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.add_argument("--latent-dim", dest="latent_dim", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--beta", type=float)

    for name, help_ in (("score", "write predictor maps"), ("project", "energy projection + Proj-Rec-Error"),
                        ("evaluate", "pixel AUROC report")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--data")
        if name != "project":
            sp.add_argument("--predictors", help="comma-separated predictor names")
        if name != "score":
            sp.add_argument("--lambda", dest="lambda", help="L1 weight; comma list sweeps (evaluate)")
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--iters", type=int)
        if name == "evaluate":
            sp.add_argument("--labeled-fraction", dest="labeled_fraction", type=float)

    sp = sub.add_parser("ensemble", help="fit the logistic ensemble on a labeled split")
    common(sp)
    sp.add_argument("--maps", help="directory written by 'score'")
    sp.add_argument("--data", help="dataset directory with masks/")
    sp.add_argument("--labeled-fraction", dest="labeled_fraction", type=float)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        settings = resolve(args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 2
    except VaelocError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error[runtime]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
