"""Rate-aware prompting: turn the gain ratio into tokens that modulate the
denoiser through cross-attention."""

import math

import torch
from torch import nn

from .errors import RejectedInputError
from .layers import sinusoidal_embedding, zero_module


def compute_ratio(q):
    """Channel-averaged q_enc / q_dec ratio; the scalar prompt value."""
    if (q.q_dec <= 0).any():
        raise RejectedInputError("q_dec must be strictly positive")
    return float((q.q_enc / q.q_dec).detach().mean())


class PromptEmbedder(nn.Module):
    """Deterministic map from the gain ratio to L x d prompt tokens.

    Sinusoidal features of log(ratio) pass through a 2-layer MLP; log input
    gives scale symmetry around ratio 1.
    """

    def __init__(self, n_tokens=8, dim=128, feat_dim=32):
        super().__init__()
        self.n_tokens = n_tokens
        self.dim = dim
        self.feat_dim = feat_dim
        self.mlp = nn.Sequential(
            nn.Linear(feat_dim, 256), nn.GELU(),
            nn.Linear(256, n_tokens * dim),
        )

    def forward(self, ratio):
        if ratio <= 0:
            raise RejectedInputError(f"ratio must be positive, got {ratio}")
        feats = sinusoidal_embedding(math.log(ratio), self.feat_dim,
                                     max_period=100.0)
        return self.mlp(feats).reshape(self.n_tokens, self.dim)


class CrossAttention(nn.Module):
    """Feature-map queries attend over prompt tokens; residual output.

    The output projection is zero-initialized, so the modulation is exactly
    the identity until trained.
    """

    def __init__(self, channels, token_dim=128, heads=4):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(channels, token_dim)
        self.k_proj = nn.Linear(token_dim, token_dim)
        self.v_proj = nn.Linear(token_dim, token_dim)
        self.out_proj = zero_module(nn.Linear(token_dim, channels))

    def forward(self, features, tokens):
        if features.ndim != 4:
            raise RejectedInputError("expected (B,C,H,W) features")
        if tokens.ndim != 2 or tokens.shape[1] != self.k_proj.in_features:
            raise RejectedInputError("token dim mismatch")
        b, c, h, w = features.shape
        x = features.permute(0, 2, 3, 1).reshape(b, h * w, c)
        q = self.q_proj(x)
        k = self.k_proj(tokens)
        v = self.v_proj(tokens)
        d = q.shape[-1] // self.heads
        q = q.reshape(b, -1, self.heads, d).transpose(1, 2)
        k = k.reshape(1, -1, self.heads, d).transpose(1, 2)
        v = v.reshape(1, -1, self.heads, d).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, h * w, -1)
        out = self.out_proj(out)
        return features + out.reshape(b, h, w, c).permute(0, 3, 1, 2)
