import pytest
import torch

from diffcodec.contextual import (ContextMiner, ContextualCodec, GainVectors,
                                  QuantParams)
from diffcodec.errors import RejectedInputError


def test_quant_params_positive():
    with pytest.raises(RejectedInputError):
        QuantParams(q_enc=torch.tensor([-1.0]), q_dec=torch.tensor([1.0]),
                    lambda_index=0)


def test_gain_anchor_values_and_interpolation():
    g = GainVectors(channels=4)
    q0 = g.q_for_lambda(0)
    q3 = g.q_for_lambda(3)
    assert torch.allclose(q0.q_enc, torch.full((4,), 0.25))
    assert torch.allclose(q3.q_enc, torch.full((4,), 2.0))
    assert torch.allclose(q0.q_dec, torch.full((4,), 4.0))
    # log-linear midpoint: geometric mean of the neighbours
    q = g.q_for_lambda(1.5)
    assert torch.allclose(q.q_enc, torch.full((4,), (0.5 * 1.0) ** 0.5),
                          atol=1e-6)


def test_gain_ratio_monotone_in_lambda_index():
    g = GainVectors(channels=4)
    ratios = [float((g.q_for_lambda(i).q_enc
                     / g.q_for_lambda(i).q_dec).detach().mean())
              for i in (0, 1, 2, 3)]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))


def test_gain_index_range():
    g = GainVectors(channels=4)
    with pytest.raises(RejectedInputError):
        g.q_for_lambda(3.5)
    with pytest.raises(RejectedInputError):
        g.q_for_lambda(-0.1)


def test_context_miner_scales():
    torch.manual_seed(0)
    cm = ContextMiner()
    feature = torch.randn(24, 16, 16)
    flow = torch.randn(2, 128, 128)
    c0, c1 = cm(feature, flow)
    assert c0.shape == (24, 16, 16)
    assert c1.shape == (24, 8, 8)


def test_context_miner_feature_from_latent():
    cm = ContextMiner()
    feat = cm.feature_from_latent(torch.randn(4, 8, 8))
    assert feat.shape == (24, 8, 8)


def test_contextual_codec_channel_contract():
    with pytest.raises(RejectedInputError):
        ContextualCodec(feature_ch=16, context_ch=24)


@torch.no_grad()
def test_contextual_roundtrip_symbols():
    torch.manual_seed(1)
    cc = ContextualCodec().eval()
    g = GainVectors(channels=4)
    q = g.q_for_lambda(2)
    y = torch.randn(4, 16, 16)
    c0 = torch.randn(24, 16, 16)
    c1 = torch.randn(24, 8, 8)
    chunk, hyper_chunk, sym = cc.encode(y, c0, c1, None, q)
    out = cc.decode_symbols(chunk, hyper_chunk, c1, None)
    assert torch.equal(out, sym)
    y_hat_e, feat_e = cc.reconstruct(sym, c0, c1, q)
    y_hat_d, feat_d = cc.reconstruct(out, c0, c1, q)
    assert torch.equal(y_hat_e, y_hat_d) and torch.equal(feat_e, feat_d)


@torch.no_grad()
def test_prev_latent_prior_changes_bits():
    torch.manual_seed(2)
    cc = ContextualCodec().eval()
    q = GainVectors(channels=4).q_for_lambda(3)
    y = torch.randn(4, 16, 16)
    c0 = torch.randn(24, 16, 16)
    c1 = torch.randn(24, 8, 8)
    a = cc.encode(y, c0, c1, None, q)[0]
    prev = torch.randn(24, 8, 8).round().clamp(-4, 4)
    b = cc.encode(y, c0, c1, prev, q)[0]
    assert a.data != b.data


def test_bits_train_gradients_reach_gains():
    torch.manual_seed(3)
    cc = ContextualCodec().train()
    g = GainVectors(channels=4)
    q = g.q_for_lambda(1)
    y = torch.randn(1, 4, 16, 16)
    c0 = torch.randn(1, 24, 16, 16)
    c1 = torch.randn(1, 24, 8, 8)
    bits, y_hat, feat, u_hat = cc.bits_train(y, c0, c1, None, q)
    (bits / 100 + y_hat.abs().mean()).backward()
    assert g.log_q_enc.grad is not None
    assert torch.isfinite(g.log_q_enc.grad).all()
