import pytest
import torch

from diffcodec.autoencoder import DOWN_FACTOR, FrameAutoencoder
from diffcodec.errors import RejectedInputError


@pytest.fixture(scope="module")
def ae():
    torch.manual_seed(0)
    return FrameAutoencoder()


def test_latent_shape(ae):
    x = torch.rand(3, 128, 64)
    y = ae.encode_frame(x)
    assert y.shape == (4, 128 // DOWN_FACTOR, 64 // DOWN_FACTOR)


def test_decode_range_and_shape(ae):
    y = torch.randn(4, 8, 8)
    x = ae.decode_frame(y)
    assert x.shape == (3, 64, 64)
    assert float(x.min()) >= 0.0 and float(x.max()) <= 1.0


def test_rejects_bad_frames(ae):
    with pytest.raises(RejectedInputError):
        ae.encode_frame(torch.rand(3, 60, 64))  # not divisible by 64
    with pytest.raises(RejectedInputError):
        ae.encode_frame(torch.rand(1, 64, 64))
    bad = torch.rand(3, 64, 64)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(RejectedInputError):
        ae.encode_frame(bad)


def test_rejects_bad_latents(ae):
    with pytest.raises(RejectedInputError):
        ae.decode_frame(torch.randn(3, 8, 8))
    bad = torch.randn(4, 8, 8)
    bad[0, 0, 0] = float("inf")
    with pytest.raises(RejectedInputError):
        ae.decode_frame(bad)


def test_encoder_features_three_scales(ae):
    feats = ae.encoder_features(torch.rand(2, 3, 64, 64))
    assert len(feats) == 3
    assert feats[0].shape[-1] == 32 and feats[2].shape[-1] == 8


def test_parameter_hash_tracks_weights(ae):
    h1 = ae.parameter_hash()
    assert len(h1) == 16
    with torch.no_grad():
        p = next(ae.parameters())
        saved = p.clone()
        p.add_(1e-3)
        assert ae.parameter_hash() != h1
        p.copy_(saved)
    assert ae.parameter_hash() == h1


def test_reconstruction_improves_with_training(ae):
    """A few MSE steps on one image reduce its reconstruction error."""
    torch.manual_seed(1)
    model = FrameAutoencoder()
    x = torch.rand(1, 3, 64, 64)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    first = None
    for _ in range(30):
        loss = torch.mean((model.decoder(model.encoder(x)) - x) ** 2)
        if first is None:
            first = float(loss.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert float(loss.detach()) < first
