import numpy as np
import pytest
import torch

from vaeloc import losses
from vaeloc.errors import ConfigurationError
from vaeloc.model import VAE, ModelConfig, VAEOutput, input_gradient
from vaeloc.predictors import (PREDICTOR_KINDS, AnomalyMap, combi_map, grad_map, predictor_maps,
                               rec_error_map, score)
from oracles import central_difference


class IdealTwoPixel(torch.nn.Module):
    """Copies normal pixels and replaces abnormal ones with the normal value.

    A pixel is normal when it is within ``tol`` of ``normal_value``.
    """

    def __init__(self, normal_value=0.0, tol=0.1):
        super().__init__()
        self.normal_value, self.tol = normal_value, tol

    def _param_dtype(self):
        return torch.float64

    def fingerprint(self):
        return "ideal"

    def forward(self, x, mode="deterministic", generator=None):
        normal = (x - self.normal_value).abs() <= self.tol
        recon = torch.where(normal, x, torch.full_like(x, self.normal_value))
        return VAEOutput(None, None, recon)


@pytest.mark.parametrize("pattern", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_ideal_model_oracle(pattern):
    eps = 0.5
    rng = np.random.default_rng(sum(pattern))
    x = np.where(np.array(pattern) == 1, eps + rng.uniform(0, 2, 2), rng.uniform(-0.05, 0.05, 2))
    m = rec_error_map(IdealTwoPixel(), x.reshape(1, 1, 2)).scores
    abnormal = np.array(pattern, bool).reshape(1, 2)
    assert np.all(m[~abnormal] == 0.0)
    assert np.all(m[abnormal] >= eps ** 2)


def test_rec_error_identity_and_definition(tiny_model, tiny_image):
    recon = tiny_model(tiny_image).reconstruction.detach()
    assert np.all(rec_error_map(tiny_model, recon).scores >= 0)
    m = rec_error_map(tiny_model, tiny_image)
    _, pix = losses.reconstruction_nll(tiny_image, recon)
    np.testing.assert_array_equal(m.scores, pix[0, 0].numpy())
    assert m.shape == (8, 8) and m.kind == "rec_error" and m.model_fingerprint == tiny_model.fingerprint()
    ideal = rec_error_map(IdealTwoPixel(tol=1e9), tiny_image)
    assert np.all(ideal.scores == 0)


def test_identities(tiny_model, tiny_image):
    maps = predictor_maps(tiny_model, tiny_image)
    np.testing.assert_array_equal(maps["combi"], maps["kl_grad"] * maps["rec_error"])
    assert np.all(maps["elbo_grad"] <= maps["kl_grad"] + maps["rec_grad"] + 1e-6)
    for k in PREDICTOR_KINDS:
        assert maps[k].shape == (1, 8, 8)
        assert np.all(maps[k] >= 0), k


def test_signed_rec_grad_option(tiny_model, tiny_image):
    signed = grad_map(tiny_model, tiny_image, "rec", abs_rec_grad=False).scores
    raw = input_gradient(tiny_model, tiny_image, "rec")[0, 0].numpy()
    np.testing.assert_array_equal(signed, raw)
    assert (signed < 0).any()
    np.testing.assert_array_equal(grad_map(tiny_model, tiny_image, "rec").scores, np.abs(raw))


def test_grad_map_matches_finite_differences(tiny_model, tiny_image):
    for which in ("elbo", "kl"):
        fd = central_difference(tiny_model, tiny_image, which, 1e-4)[0, 0].abs().numpy()
        np.testing.assert_allclose(grad_map(tiny_model, tiny_image, which).scores, fd, rtol=1e-3, atol=1e-8)


def test_combi_annihilation():
    model = VAE(ModelConfig(image_size=8, latent_dim=4, encoder_channels=[4, 8]), seed=3).double()
    last = model.decoder[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.fill_(0.25)
    x = torch.full((1, 1, 8, 8), 0.25, dtype=torch.float64)  # reconstructed exactly
    assert np.all(rec_error_map(model, x).scores == 0)
    assert np.all(combi_map(model, x).scores == 0)


def test_dispatch_equals_direct(tiny_model, tiny_image):
    direct = {
        "rec_error": rec_error_map(tiny_model, tiny_image),
        "elbo_grad": grad_map(tiny_model, tiny_image, "elbo"),
        "kl_grad": grad_map(tiny_model, tiny_image, "kl"),
        "rec_grad": grad_map(tiny_model, tiny_image, "rec"),
        "combi": combi_map(tiny_model, tiny_image),
    }
    for kind, m in direct.items():
        s = score(tiny_model, tiny_image, kind)
        assert isinstance(s, AnomalyMap) and s.kind == kind
        np.testing.assert_array_equal(s.scores, m.scores)


def test_batch_gives_b_maps_and_matches_single(tiny_model):
    x = torch.as_tensor(np.random.default_rng(5).normal(size=(3, 1, 8, 8)))
    for kind in PREDICTOR_KINDS:
        out = score(tiny_model, x, kind)
        assert len(out) == 3
        for b in range(3):
            np.testing.assert_allclose(out[b].scores, score(tiny_model, x[b:b + 1], kind).scores, rtol=1e-12, atol=1e-15)


def test_purity(tiny_model, tiny_image):
    a = predictor_maps(tiny_model, tiny_image)
    b = predictor_maps(tiny_model, tiny_image)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_errors(tiny_model, tiny_image):
    with pytest.raises(ConfigurationError):
        score(tiny_model, tiny_image, "bogus")
    with pytest.raises(ConfigurationError):
        grad_map(tiny_model, tiny_image, "bogus")
    with pytest.raises(ConfigurationError):
        rec_error_map(tiny_model, torch.zeros(1, 1, 16, 16, dtype=torch.float64))


def test_bright_square_scores_higher(trained_toy, toy_data):
    x = toy_data[0].data[:8].copy()
    x[:, :, 4:9, 4:9] += 4.0
    mask = np.zeros((16, 16), bool)
    mask[4:9, 4:9] = True
    m = predictor_maps(trained_toy, x, ["rec_error"])["rec_error"]
    assert m[:, mask].mean() > m[:, ~mask].mean()
