"""Small shared building blocks for the codec networks."""

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import nn


def conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def zero_module(m):
    """Zero all parameters of a module (zero-init residual branches)."""
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    """Two 3x3 convs with a residual connection and optional time embedding."""

    def __init__(self, ch, time_dim=None):
        super().__init__()
        self.conv1 = conv3(ch, ch)
        self.conv2 = conv3(ch, ch)
        self.time_proj = nn.Linear(time_dim, ch) if time_dim else None

    def forward(self, x, t_emb=None):
        h = F.gelu(self.conv1(x))
        if self.time_proj is not None and t_emb is not None:
            h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.gelu(h))
        return x + h


class Upsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv3(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def sinusoidal_embedding(value, dim, max_period=10000.0):
    """Sinusoidal features of a scalar (or 1D batch of scalars)."""
    v = torch.as_tensor(value, dtype=torch.float32).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    ang = v * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def parameter_hash(module_or_params):
    """16-byte digest of parameter values (names included, sorted)."""
    if isinstance(module_or_params, nn.Module):
        items = sorted(module_or_params.state_dict().items())
    else:
        items = sorted(module_or_params)
    h = hashlib.sha256()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.digest()[:16]
