import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import check_module
from multivit2.autoencoder import (AEDescriptor, AEHyper, GaussianPosterior, KLAutoencoder, kl_loss,
                                   load_autoencoder, recon_loss, reconstruction_mse, sample_latent,
                                   save_autoencoder, total_loss, train_autoencoder)
from multivit2.data import StructuralVolume, synthesize_dataset
from multivit2.errors import ConfigError, MissingArtifactError, NonFiniteError, ShapeError
from multivit2.rng import seeded

D = torch.float64


def _post(mu, log_var):
    return GaussianPosterior(torch.tensor(mu, dtype=D), torch.tensor(log_var, dtype=D))


def test_descriptor_default_shapes():
    d = AEDescriptor()
    assert d.latent_shape == (4, 3, 4, 3)
    assert d.downsampling == 8
    assert np.prod(d.latent_shape) < np.prod(d.in_dims)
    assert AEDescriptor.from_dict(d.to_dict()) == d


def test_descriptor_rejects_no_compression():
    with pytest.raises(ConfigError):
        AEDescriptor((2, 2, 2), (4,), 64)


def test_encode_decode_shapes():
    with seeded(0):
        ae = KLAutoencoder()
    x = torch.rand(2, 24, 28, 24)
    post = ae.encode(x)
    assert post.mu.shape == post.log_var.shape == (2, 4, 3, 4, 3)
    out = ae.decode(post.mu)
    assert out.shape == (2, 1, 24, 28, 24)
    assert torch.isfinite(out).all()
    single = ae.encode(StructuralVolume(x[0].numpy()))
    assert single.mu.shape == (1, 4, 3, 4, 3)
    assert ae.decode(single.mu[0]).shape == (1, 24, 28, 24)


def test_encode_deterministic_and_translation_sensitive():
    with seeded(1):
        ae = KLAutoencoder()
    x = torch.rand(1, 24, 28, 24)
    a, b = ae.encode(x), ae.encode(x)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.log_var, b.log_var)
    shifted = torch.roll(x, shifts=3, dims=2)
    assert not torch.allclose(ae.encode(shifted).mu, a.mu)


def test_shape_errors():
    ae = KLAutoencoder()
    with pytest.raises(ShapeError):
        ae.encode(torch.rand(1, 24, 28, 23))
    with pytest.raises(ShapeError):
        ae.decode(torch.rand(1, 4, 3, 4, 4))
    with pytest.raises(ShapeError):
        sample_latent(_post([0.0], [0.0]), torch.zeros(2, dtype=D))
    with pytest.raises(ShapeError):
        recon_loss(torch.zeros(2), torch.zeros(3))


def test_nonfinite_activation_reports_layer():
    ae = KLAutoencoder()
    with torch.no_grad():
        ae.enc[1].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="encoder layer 1"):
        ae.encode(torch.rand(1, 24, 28, 24))


def test_sample_latent_examples():
    assert torch.equal(sample_latent(_post([1.5], [0.3]), torch.zeros(1, dtype=D)), torch.tensor([1.5], dtype=D))
    n = torch.tensor([0.7, -0.2], dtype=D)
    assert torch.equal(sample_latent(_post([1.0, 2.0], [0.0, 0.0]), n), torch.tensor([1.7, 1.8], dtype=D))
    z = sample_latent(_post([1.0], [math.log(4.0)]), torch.tensor([0.5], dtype=D))
    assert abs(z.item() - 2.0) < 1e-12


def test_recon_loss_examples():
    x = torch.rand(3, 4, dtype=D)
    assert recon_loss(x, x).item() == 0.0
    assert recon_loss(torch.zeros(5, dtype=D), torch.ones(5, dtype=D)).item() == 1.0
    assert abs(recon_loss(torch.tensor([0.0, 1.0], dtype=D), torch.tensor([0.5, 0.5], dtype=D)).item() - 0.25) < 1e-9


def test_kl_loss_examples():
    assert kl_loss(_post([0.0] * 6, [0.0] * 6)).item() == 0.0
    assert abs(kl_loss(_post([1.0], [0.0])).item() - 0.5) < 1e-9
    assert abs(kl_loss(_post([0.0], [1.0])).item() - (math.e - 2) / 2) < 1e-9


def test_kl_loss_batched_average():
    mu = torch.ones(2, 1, 1, 1, 1, dtype=D)
    p = GaussianPosterior(mu, torch.zeros_like(mu))
    assert abs(kl_loss(p).item() - 0.5) < 1e-12  # summed then divided by batch of 2
    assert abs(kl_loss(p, batched=False).item() - 1.0) < 1e-12


def test_kl_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        kl_loss(_post([float("nan")], [0.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-20, 20)), min_size=1, max_size=16))
def test_kl_nonnegative(pairs):
    mu, lv = zip(*pairs)
    assert kl_loss(_post(list(mu), list(lv))).item() >= 0.0


def test_total_loss_examples():
    assert total_loss(0.3, 7.0, 1.0, 0.0) == 0.3
    assert total_loss(0.3, 7.0, 0.0, 0.0) == 0.0
    assert abs(total_loss(0.25, 0.5, 1.0, 1e-2) - 0.255) < 1e-12
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, -1.0, 0.0)


def _tiny_ae():
    with seeded(0):
        return KLAutoencoder(AEDescriptor((8, 8, 8), (2, 3), 2))


def test_gradients_encoder_decoder():
    ae = _tiny_ae().double()
    x = torch.rand(2, 1, 8, 8, 8, dtype=D)
    noise = torch.randn(2, 2, 1, 1, 1, dtype=D)

    def loss():
        post = ae.encode(x)
        return total_loss(recon_loss(x, ae.decode(sample_latent(post, noise))), kl_loss(post), 1.0, 0.1)

    errors = check_module(ae, loss)
    assert max(errors.values()) < 1e-4, errors


def test_train_zero_epochs_is_identity():
    ae = _tiny_ae()
    trained, curve = train_autoencoder(torch.rand(4, 8, 8, 8), ae, AEHyper(epochs=0))
    assert curve == []
    for a, b in zip(ae.parameters(), trained.parameters()):
        assert torch.equal(a, b)


@pytest.mark.slow
def test_training_halves_recon_and_is_deterministic():
    data = synthesize_dataset(20, "additive", seed=0)
    with seeded(0):
        ae = KLAutoencoder()
    before = reconstruction_mse(ae, data)
    trained, curve = train_autoencoder(data, ae, AEHyper(epochs=50), seed=0)
    assert len(curve) == 50
    assert curve[-1]["recon"] <= 0.5 * curve[0]["recon"]
    assert reconstruction_mse(trained, data) < before
    _, again = train_autoencoder(data, ae, AEHyper(epochs=3), seed=0)
    assert again == curve[:3]


def test_checkpoint_roundtrip(tmp_path):
    ae = _tiny_ae()
    save_autoencoder(ae, tmp_path / "ae.json", {"config_hash": "x"})
    back, header = load_autoencoder(tmp_path / "ae.json")
    x = torch.rand(1, 8, 8, 8)
    assert torch.equal(back.encode(x).mu, ae.encode(x).mu)
    assert header["extra"]["config_hash"] == "x"
    with pytest.raises(MissingArtifactError, match="pretrain-ae"):
        load_autoencoder(tmp_path / "nope.json")


def test_kl_tiny_log_variance_not_negative():
    for lv in (1e-9, -1e-9, 1e-17, 3e-8):
        assert kl_loss(_post([0.0, 0.0], [lv, -lv])).item() >= 0.0
