import csv

import numpy as np
import pytest
import torch

from vaeloc.errors import ConfigurationError
from vaeloc.projection import (ProjectionConfig, energy, energy_terms, proj_rec_error_batch,
                               proj_rec_error_map, project, project_batch, write_trace_csv)


def hand_energy(model, xt, x0, lam):
    with torch.no_grad():
        recon = model.decode(model.encode(xt).mu)
    rec = 0.5 * float(((xt - recon) ** 2).sum())
    return rec + lam * float((xt - x0).abs().sum())


def test_energy_cases(tiny_model, tiny_image):
    x0 = tiny_image
    xt = x0 + torch.as_tensor(np.random.default_rng(1).normal(size=x0.shape))
    rec_only = hand_energy(tiny_model, x0, x0, 0.0)
    assert energy(tiny_model, x0, x0, 3.0)[0] == pytest.approx(rec_only, rel=1e-14)
    assert energy(tiny_model, x0[0], x0[0], 3.0) == energy(tiny_model, x0, x0, 3.0)[0]
    assert energy(tiny_model, xt, x0, 0.0)[0] == pytest.approx(hand_energy(tiny_model, xt, x0, 0.0), rel=1e-12)
    assert energy(tiny_model, xt, x0, 0.7)[0] == pytest.approx(hand_energy(tiny_model, xt, x0, 0.7), rel=1e-12)
    with pytest.raises(ConfigurationError):
        energy(tiny_model, xt, x0, -1.0)
    with pytest.raises(ConfigurationError):
        energy(tiny_model, xt, x0[..., :4, :4], 1.0)


def test_energy_gradient_finite_differences(tiny_model, tiny_image):
    x0 = tiny_image
    rng = np.random.default_rng(2)
    delta = rng.choice([-1, 1], size=x0.shape) * rng.uniform(0.05, 0.5, size=x0.shape)
    xt = (x0 + torch.as_tensor(delta)).requires_grad_(True)
    e, _, _ = energy_terms(tiny_model, xt, x0, 0.8)
    (g,) = torch.autograd.grad(e.sum(), xt)
    h = 1e-5
    flat = xt.detach().clone().view(-1)
    fd = np.empty(flat.numel())
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        fd[i] = (energy(tiny_model, up.view(x0.shape), x0, 0.8)[0]
                 - energy(tiny_model, down.view(x0.shape), x0, 0.8)[0]) / (2 * h)
    np.testing.assert_allclose(g.view(-1).numpy(), fd, rtol=1e-2, atol=1e-7)


def test_zero_iterations_is_identity(tiny_model, tiny_image):
    tr = project(tiny_model, tiny_image, ProjectionConfig(max_iters=0))
    assert np.array_equal(tr.best_iterate, tiny_image[0, 0].numpy())
    assert len(tr.energies) == 1 and tr.best_index == 0
    m = proj_rec_error_map(tiny_model, tiny_image, ProjectionConfig(max_iters=0))
    assert np.all(m.scores == 0)


@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0, 10.0])
def test_best_never_worse_than_start(tiny_model, lam):
    x = torch.as_tensor(np.random.default_rng(int(lam * 10)).normal(size=(4, 1, 8, 8)))
    for tr in project_batch(tiny_model, x, ProjectionConfig(lam=lam, max_iters=30, alpha=0.1)):
        assert tr.best_energy <= tr.energies[0]
        assert tr.best_energy == min(tr.energies)
        assert tr.energies[tr.best_index] == tr.best_energy


def test_projection_reduces_energy_on_anomaly(trained_toy, toy_data):
    x = toy_data[0].data[:2].copy()
    x[:, :, 5:10, 5:10] += 4.0
    maps, traces = proj_rec_error_batch(trained_toy, x, ProjectionConfig(lam=0.1))
    for tr in traces:
        assert tr.best_energy < tr.energies[0]
    assert np.all(maps >= 0)
    mask = np.zeros((16, 16), bool)
    mask[5:10, 5:10] = True
    assert maps[:, mask].mean() > maps[:, ~mask].mean()


def test_large_lambda_pins(trained_toy, toy_data):
    x = toy_data[0].data[:3]
    cfg = ProjectionConfig(lam=1e6, max_iters=50, early_stop_patience=0)
    for tr in project_batch(trained_toy, x, cfg):
        assert len(tr.energies) == 51
    maps, traces = proj_rec_error_batch(trained_toy, x, cfg)
    for b, tr in enumerate(traces):
        disp = np.abs(tr.best_iterate - np.asarray(x[b, 0], np.float32).astype(np.float64))
        assert disp.max() < 1e-3


def test_batch_matches_single(tiny_model):
    x = torch.as_tensor(np.random.default_rng(7).normal(size=(3, 1, 8, 8)))
    cfg = ProjectionConfig(max_iters=40, early_stop_patience=5, alpha=0.2)
    batch = project_batch(tiny_model, x, cfg)
    for b in range(3):
        single = project(tiny_model, x[b:b + 1], cfg)
        assert single.energies == batch[b].energies
        assert np.array_equal(single.best_iterate, batch[b].best_iterate)


def test_early_stopping_and_iterates(tiny_model, tiny_image):
    cfg = ProjectionConfig(max_iters=200, early_stop_patience=3, alpha=0.5, record_iterates=True)
    tr = project(tiny_model, tiny_image, cfg)
    assert tr.n_steps < 200
    assert len(tr.iterates) == len(tr.energies)
    assert np.array_equal(tr.iterates[0], tiny_image[0, 0].numpy())


def test_model_left_untouched(tiny_model, tiny_image):
    before = tiny_model.fingerprint()
    flags = [p.requires_grad for p in tiny_model.parameters()]
    project(tiny_model, tiny_image, ProjectionConfig(max_iters=5))
    assert tiny_model.fingerprint() == before
    assert [p.requires_grad for p in tiny_model.parameters()] == flags


def test_reconstruction_map_mode(tiny_model, tiny_image):
    cfg = ProjectionConfig(max_iters=0, map_mode="reconstruction")
    m = proj_rec_error_map(tiny_model, tiny_image, cfg).scores
    with torch.no_grad():
        recon = tiny_model(tiny_image).reconstruction[0, 0].numpy()
    np.testing.assert_allclose(m, (tiny_image[0, 0].numpy() - recon) ** 2, rtol=1e-12)


def test_non_finite_input_warns(tiny_model):
    x = torch.full((1, 1, 8, 8), float("nan"), dtype=torch.float64)
    tr = project(tiny_model, x, ProjectionConfig(max_iters=3))
    assert tr.warning is not None


def test_trace_csv(tiny_model, tiny_image, tmp_path):
    tr = project(tiny_model, tiny_image, ProjectionConfig(max_iters=4, early_stop_patience=0))
    with open(write_trace_csv(tmp_path / "t.csv", tr)) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iteration", "energy", "L1_term", "rec_term"]
    assert len(rows) == 5
    for r, e in zip(rows, tr.energies):
        assert float(r["energy"]) == e
        assert float(r["energy"]) == pytest.approx(float(r["rec_term"]) + float(r["L1_term"]), rel=1e-12)


def test_config_invariants():
    for kwargs in (dict(alpha=0), dict(lam=-1), dict(max_iters=-1), dict(map_mode="x")):
        with pytest.raises(ConfigurationError):
            ProjectionConfig(**kwargs)
