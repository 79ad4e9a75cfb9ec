"""Differentiable rate surrogates used at training time.

Coding-time rates come from :mod:`diffcodec.entropy`; during optimization
the quantizer is relaxed with additive uniform noise and the code length is
the Gaussian (or per-channel factorized) likelihood under that relaxation.
"""

import math

import torch

PMF_FLOOR = 2.0 ** -16
SCALE_FLOOR = 1e-3
_LOG2 = math.log(2.0)


def noisy_quantize(x, training):
    """Additive uniform noise when training, straight-through round otherwise."""
    if training:
        return x + torch.empty_like(x).uniform_(-0.5, 0.5)
    return x + (torch.round(x) - x).detach()


def ste_round(x):
    return x + (torch.round(x) - x).detach()


def gaussian_bits(x, mean, scale):
    """-log2 likelihood of x under the +-0.5 discretized Gaussian (summed)."""
    scale = scale.clamp_min(SCALE_FLOOR)
    upper = torch.special.ndtr((x - mean + 0.5) / scale)
    lower = torch.special.ndtr((x - mean - 0.5) / scale)
    p = (upper - lower).clamp_min(PMF_FLOOR)
    return -torch.log(p).sum() / _LOG2
