import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from vaeloc import cli
from vaeloc.gridio import read_grid

TINY = """\
# small model so the whole flow runs in seconds
image_size = 16
latent_dim = 4
encoder_channels = 8,16
epochs = 3
batch_size = 16
learning_rate = 1e-3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.conf"
    conf.write_text(TINY)
    assert cli.main(["synth", "--out", str(root / "train"), "--n-images", "48", "--image-size", "16"]) == 0
    assert cli.main(["synth", "--out", str(root / "test"), "--n-images", "20", "--image-size", "16",
                     "--anomalies", "--seed", "5", "--config", str(conf)]) == 0
    assert cli.main(["train", "--config", str(conf), "--data", str(root / "train"),
                     "--out", str(root / "model")]) == 0
    return root


def test_synth_outputs(workspace):
    test = workspace / "test"
    assert len(list(test.glob("*.grid"))) == 20
    assert len(list((test / "masks").glob("*.png"))) == 20
    manifest = json.loads((test / "manifest.json").read_text())
    assert manifest["n_images"] == 20 and manifest["anomaly"]["shape"] == "disk"
    assert read_grid(test / "img_00000.grid").shape == (16, 16)


def test_train_outputs(workspace):
    model = workspace / "model"
    assert (model / "model.pt").exists()
    assert (model / "loss_history.csv").read_text().splitlines()[0] == "epoch,rec_nll,kl,total,beta"
    resolved = (model / "resolved_config.txt").read_text()
    assert "latent_dim = 4" in resolved and "'vaeloc train'" in resolved
    # every default is materialised
    for key in cli.DEFAULTS:
        assert f"\n{key} = " in resolved


def test_score_project_ensemble(workspace, capsys):
    ck = str(workspace / "model" / "model.pt")
    data = str(workspace / "test")
    maps = workspace / "maps"
    assert cli.main(["score", "--checkpoint", ck, "--data", data, "--out", str(maps), "--workers", "2",
                     "--predictors", "rec_error,kl_grad,rec_grad,combi"]) == 0
    assert len(list(maps.glob("*.grid"))) == 80 and len(list(maps.glob("*.png"))) == 80
    assert cli.main(["project", "--checkpoint", ck, "--data", data, "--out", str(workspace / "proj"),
                     "--iters", "5", "--lambda", "0.5"]) == 0
    for sub in ("projected", "traces", "maps"):
        assert len(list((workspace / "proj" / sub).iterdir())) >= 20
    trace = (workspace / "proj" / "traces" / "img_00000.csv").read_text().splitlines()
    assert trace[0] == "iteration,energy,L1_term,rec_term" and len(trace) <= 7
    capsys.readouterr()
    assert cli.main(["ensemble", "--maps", str(maps), "--data", data, "--out", str(workspace / "ens"),
                     "--labeled-fraction", "0.2"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) == {"ensemble", "rec_error", "kl_grad", "rec_grad"}
    w = json.loads((workspace / "ens" / "weights.json").read_text())
    assert w["features"] == ["rec_error", "kl_grad", "rec_grad"] and len(w["weights"]) == 3


def test_workers_do_not_change_maps(workspace):
    ck = str(workspace / "model" / "model.pt")
    data = str(workspace / "test")
    for n in (1, 3):
        assert cli.main(["score", "--checkpoint", ck, "--data", data, "--out", str(workspace / f"w{n}"),
                         "--workers", str(n), "--predictors", "elbo_grad"]) == 0
    for p in (workspace / "w1").glob("*.grid"):
        assert p.read_bytes() == (workspace / "w3" / p.name).read_bytes()


def test_evaluate_smoke_is_fast_and_reproducible(workspace, capsys):
    ck = str(workspace / "model" / "model.pt")
    args = ["evaluate", "--checkpoint", ck, "--data", str(workspace / "test"), "--seed", "3",
            "--predictors", "rec_error,elbo_grad,kl_grad,rec_grad,combi,proj_rec_error,ensemble",
            "--lambda", "0.1,1,10", "--iters", "20"]
    t0 = time.perf_counter()
    assert cli.main(args + ["--out", str(workspace / "ev1")]) == 0
    assert time.perf_counter() - t0 < 120
    assert cli.main(args + ["--out", str(workspace / "ev2")]) == 0
    a = (workspace / "ev1" / "report.json").read_bytes()
    assert a == (workspace / "ev2" / "report.json").read_bytes()
    report = json.loads(a)
    assert set(report["per_predictor_auroc"]) == {"rec_error", "elbo_grad", "kl_grad", "rec_grad", "combi",
                                                  "proj_rec_error", "ensemble"}
    assert report["details"]["best_lambda"] in (0.1, 1.0, 10.0)
    md = (workspace / "ev1" / "report.md").read_text()
    assert md.splitlines()[2].startswith("| l=4, beta=1.0 |")
    assert "Proj-Rec-Error" in capsys.readouterr().out


def test_config_precedence(workspace, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("n_images = 3\nimage_size = 8\nseed = 9\n")
    assert cli.main(["synth", "--config", str(conf), "--seed", "4", "--out", str(tmp_path / "s")]) == 0
    resolved = (tmp_path / "s" / "resolved_config.txt").read_text()
    assert "seed = 4" in resolved and "n_images = 3" in resolved and "image_size = 8" in resolved
    assert len(list((tmp_path / "s").glob("*.grid"))) == 3


def test_defaults_reference_file_matches():
    ref = Path(__file__).resolve().parent.parent / "defaults.conf"
    parsed = cli.parse_config_file(ref)
    assert set(parsed) == set(cli.DEFAULTS)
    for k, v in parsed.items():
        assert cli._coerce(k, v) == cli.DEFAULTS[k], k


@pytest.mark.parametrize("argv,code,needle", [
    (["score", "--predictors", "nope", "--checkpoint", "x", "--data", "y"], 2, "valid"),
    (["bogus"], 2, "usage"),
    (["train"], 2, "--data is required"),
    (["score", "--checkpoint", "/nonexistent/model.pt", "--data", "."], 1, "error[checkpoint]"),
])
def test_exit_codes(argv, code, needle, capsys):
    assert cli.main(argv) == code
    err = capsys.readouterr().err
    assert needle in err
    assert err.startswith("error[")


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("not_a_key = 1\n")
    assert cli.main(["synth", "--config", str(conf), "--out", str(tmp_path / "o")]) == 2
    assert "not_a_key" in capsys.readouterr().err


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "vaeloc.cli", "evaluate", "--predictors", "x,y"],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert r.stderr.count("\n") == 1 and r.stderr.startswith("error[usage]")
