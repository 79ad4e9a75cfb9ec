"""Frozen frame autoencoder: frames <-> 1/8-resolution latents.

Pretrained once (stage 0) on the training images and then frozen; its
parameter hash is written to the bitstream header and checked on decode.
"""

import torch
import torch.nn.functional as F
from torch import nn

from .errors import RejectedInputError
from .layers import ResBlock, Upsample, conv3, parameter_hash

FRAME_DIVISOR = 64
DOWN_FACTOR = 8


def _check_frame(frame):
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise RejectedInputError(f"expected 3xHxW frame, got {tuple(frame.shape)}")
    if frame.shape[1] % FRAME_DIVISOR or frame.shape[2] % FRAME_DIVISOR:
        raise RejectedInputError(
            f"frame dims must be divisible by {FRAME_DIVISOR}, got {tuple(frame.shape[1:])}")
    if not torch.isfinite(frame).all():
        raise RejectedInputError("frame contains non-finite values")


class FrameAutoencoder(nn.Module):
    """Three stride-2 stages down (8x), mirrored back up."""

    def __init__(self, c_lat=4, channels=(32, 64, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.c_lat = c_lat
        self.encoder = nn.Sequential(
            conv3(3, c1, stride=2), nn.GELU(),
            conv3(c1, c2, stride=2), nn.GELU(),
            conv3(c2, c3, stride=2), nn.GELU(),
            ResBlock(c3),
            conv3(c3, c_lat),
        )
        self.decoder = nn.Sequential(
            conv3(c_lat, c3),
            ResBlock(c3),
            Upsample(c3, c2), nn.GELU(),
            Upsample(c2, c1), nn.GELU(),
            Upsample(c1, c1), nn.GELU(),
            conv3(c1, 3),
        )

    def encoder_features(self, x):
        """Activations after each stride-2 stage (frozen perceptual features)."""
        feats = []
        h = x
        for i, layer in enumerate(self.encoder):
            h = layer(h)
            if i in (1, 3, 5):
                feats.append(h)
        return feats

    @torch.no_grad()
    def encode_frame(self, frame):
        """Frame (3,H,W in [0,1]) -> latent (c_lat, H/8, W/8). Deterministic."""
        _check_frame(frame)
        return self.encoder(frame[None])[0]

    @torch.no_grad()
    def decode_frame(self, latent):
        """Latent -> frame clamped to [0,1]. Deterministic."""
        if latent.ndim != 3 or latent.shape[0] != self.c_lat:
            raise RejectedInputError(
                f"expected {self.c_lat}-channel latent, got {tuple(latent.shape)}")
        if not torch.isfinite(latent).all():
            raise RejectedInputError("latent contains non-finite values")
        return self.decoder(latent[None])[0].clamp(0.0, 1.0)

    def parameter_hash(self):
        return parameter_hash(self)
