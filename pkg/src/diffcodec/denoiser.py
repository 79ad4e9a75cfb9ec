"""Conditional denoiser U-Net.

Small 3-resolution U-Net with self/cross-attention at the two coarsest
scales.  Conditioning (noisy latent, reconstructed latent, large-scale
temporal context) enters through a zero-initialized adapter branch added
to the encoder activations; prompt tokens enter through cross-attention.

The noise-free-latent prediction blends the reconstructed latent with the
state, weighted by the signal-to-noise ratio of the current timestep: when
the state is pure noise the prediction falls back to the reconstructed
latent (the conditional prior mean), and as noise vanishes it follows the
state.  This is the Gaussian posterior-mean weighting for an observation
z = sqrt(a)y + sqrt(1-a)e against a prior centered at the reconstruction;
the learned branch corrects the residual the blend cannot explain.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import RejectedInputError
from .layers import ResBlock, Upsample, conv3, sinusoidal_embedding, zero_module
from .qpp import CrossAttention


class SelfAttention(nn.Module):
    """Spatial self-attention with a zero-initialized output projection."""

    def __init__(self, channels, heads=4):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = zero_module(nn.Linear(channels, channels))

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.permute(0, 2, 3, 1).reshape(b, h * w, c)
        q, k, v = self.qkv(t).chunk(3, dim=-1)
        d = c // self.heads
        q = q.reshape(b, -1, self.heads, d).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, d).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, d).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(o).reshape(b, h, w, c).permute(0, 3, 1, 2)


class ConditionalDenoiser(nn.Module):
    def __init__(self, c_lat=4, context_ch=24, channels=(32, 48, 64),
                 time_dim=128, token_dim=128):
        super().__init__()
        c0ch, c1ch, c2ch = channels
        cond_ch = 2 * c_lat + context_ch
        self.c_lat = c_lat
        self.cond_ch = cond_ch
        self.call_count = 0

        self.time_mlp = nn.Sequential(nn.Linear(64, time_dim), nn.GELU(),
                                      nn.Linear(time_dim, time_dim))
        self.conv_in = conv3(c_lat, c0ch)
        self.block0 = ResBlock(c0ch, time_dim)
        self.down1 = conv3(c0ch, c1ch, stride=2)
        self.block1 = ResBlock(c1ch, time_dim)
        self.self_attn1 = SelfAttention(c1ch)
        self.cross_attn1 = CrossAttention(c1ch, token_dim)
        self.down2 = conv3(c1ch, c2ch, stride=2)
        self.block2 = ResBlock(c2ch, time_dim)
        self.self_attn2 = SelfAttention(c2ch)
        self.cross_attn2 = CrossAttention(c2ch, token_dim)
        self.mid = ResBlock(c2ch, time_dim)
        self.up1 = Upsample(c2ch, c1ch)
        self.fuse1 = conv3(2 * c1ch, c1ch)
        self.dec_block1 = ResBlock(c1ch, time_dim)
        self.up0 = Upsample(c1ch, c0ch)
        self.fuse0 = conv3(2 * c0ch, c0ch)
        self.dec_block0 = ResBlock(c0ch, time_dim)

        # conditioning branch; injections and output head are zero-init
        self.adapter_stem = nn.Sequential(conv3(cond_ch, c0ch), nn.GELU(),
                                          conv3(c0ch, c0ch))
        self.adapter_inject0 = zero_module(nn.Conv2d(c0ch, c0ch, 1))
        self.adapter_down1 = conv3(c0ch, c1ch, stride=2)
        self.adapter_inject1 = zero_module(nn.Conv2d(c1ch, c1ch, 1))
        self.adapter_down2 = conv3(c1ch, c2ch, stride=2)
        self.adapter_inject2 = zero_module(nn.Conv2d(c2ch, c2ch, 1))
        self.adapter_out = zero_module(conv3(c0ch, c_lat))
        # log precision of the prior around y_hat for a unit quantizer step
        # (uniform noise variance 1/12); the effective precision scales with
        # the gain ratio, since the encode gain sets the actual step size
        self.adapter_log_precision = nn.Parameter(torch.tensor(math.log(12.0)))

    def snr_gate(self, alpha_bar, ratio=1.0, dtype=torch.float32):
        """Observation weight snr / (snr + prior precision) in (0, 1)."""
        ab = torch.as_tensor(alpha_bar, dtype=dtype).reshape(-1, 1, 1, 1)
        if ((ab <= 0.0) | (ab >= 1.0)).any():
            raise RejectedInputError("alpha_bar must lie strictly in (0, 1)")
        if ratio <= 0:
            raise RejectedInputError("gain ratio must be positive")
        snr = ab / (1.0 - ab)
        return ab, snr / (snr + ratio * torch.exp(self.adapter_log_precision))

    def predict_noise_free(self, z, n, alpha_bar, y_hat, c0, tokens,
                           ratio=1.0):
        """Noise-free-latent prediction: SNR-gated blend plus correction."""
        if z.shape != y_hat.shape:
            raise RejectedInputError("z / y_hat shape mismatch")
        if c0.shape[2:] != z.shape[2:]:
            raise RejectedInputError("context resolution must match latent")
        self.call_count += 1
        cond = torch.cat([z, y_hat, c0], dim=1)
        if cond.shape[1] != self.cond_ch:
            raise RejectedInputError(
                f"expected {self.cond_ch} conditioning channels, got {cond.shape[1]}")
        t = self.time_mlp(sinusoidal_embedding(n, 64).to(z.dtype))
        if t.shape[0] == 1 and z.shape[0] > 1:
            t = t.expand(z.shape[0], -1)

        a = self.adapter_stem(cond)
        h0 = self.block0(self.conv_in(z) + self.adapter_inject0(a), t)
        a1 = self.adapter_down1(a)
        h1 = self.block1(self.down1(h0) + self.adapter_inject1(a1), t)
        h1 = self.cross_attn1(self.self_attn1(h1), tokens)
        a2 = self.adapter_down2(a1)
        h2 = self.block2(self.down2(h1) + self.adapter_inject2(a2), t)
        h2 = self.cross_attn2(self.self_attn2(h2), tokens)
        h2 = self.mid(h2, t)
        u1 = self.dec_block1(F.gelu(self.fuse1(torch.cat([self.up1(h2), h1], 1))), t)
        u0 = self.dec_block0(F.gelu(self.fuse0(torch.cat([self.up0(u1), h0], 1))), t)
        ab, gate = self.snr_gate(alpha_bar, ratio, dtype=z.dtype)
        return y_hat + gate * (z / torch.sqrt(ab) - y_hat
                               + self.adapter_out(u0))

    def forward(self, z, n, alpha_bar, y_hat, c0, tokens, ratio=1.0):
        """Noise prediction for timestep n (alpha_bar = cumulative product)."""
        ab = torch.as_tensor(alpha_bar, dtype=z.dtype).reshape(-1, 1, 1, 1)
        if ((ab <= 0.0) | (ab >= 1.0)).any():
            raise RejectedInputError(
                "noise prediction undefined outside 0 < alpha_bar < 1")
        r = self.predict_noise_free(z, n, alpha_bar, y_hat, c0, tokens, ratio)
        return (z - torch.sqrt(ab) * r) / torch.sqrt(1.0 - ab)

    def attention_and_adapter_parameters(self):
        """The stage-8 trainable subset: attention layers plus the adapter."""
        for name, p in self.named_parameters():
            if "attn" in name or "adapter" in name:
                yield p

    def frozen_backbone_names(self):
        return [n for n, _ in self.named_parameters()
                if "attn" not in n and "adapter" not in n]
