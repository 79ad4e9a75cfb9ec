"""Intra-frame latent codec: hyperprior coding without temporal context.

Codes the frame autoencoder latent through a 2x-downsampled transform.
Carries its own gain vectors since intra content has different statistics
from the conditional residual path.
"""

import torch
from torch import nn

from . import entropy
from .coding import LatentCodec
from .contextual import GainVectors
from .layers import ResBlock, Upsample, conv3


class IntraCodec(nn.Module):
    def __init__(self, c_lat=4, latent_ch=24, hyper_ch=8):
        super().__init__()
        self.c_lat = c_lat
        self.gains = GainVectors(c_lat)
        self.analysis = nn.Sequential(
            conv3(c_lat, 32, stride=2), nn.GELU(),
            conv3(32, 32), nn.GELU(),
            conv3(32, latent_ch),
        )
        self.synthesis = nn.Sequential(
            conv3(latent_ch, 32),
            ResBlock(32),
            Upsample(32, 32), nn.GELU(),
            conv3(32, c_lat),
        )
        self.entropy = LatentCodec(latent_ch, hyper_ch=hyper_ch, prior_ch=0)

    def _schedules(self, lat_hw):
        h, w = lat_hw
        sched = entropy.build_quadtree_schedule(h // 2, w // 2)
        hsched = entropy.build_single_group_schedule(h // 8, w // 8)
        return sched, hsched

    def bits_train(self, y, lambda_index):
        """Differentiable (bits, y_hat) for training batches."""
        q = self.gains.q_for_lambda(lambda_index)
        u = self.analysis(y * q.q_enc.view(1, -1, 1, 1))
        sched = entropy.build_quadtree_schedule(u.shape[-2], u.shape[-1])
        bits, u_hat = self.entropy.bits_train(u, None, sched)
        y_hat = self.synthesis(u_hat) * q.q_dec.view(1, -1, 1, 1)
        return bits, y_hat

    @torch.no_grad()
    def encode(self, y, lambda_index):
        """Code a (c_lat,h,w) latent; returns (chunk, hyper chunk, y_hat)."""
        q = self.gains.q_for_lambda(lambda_index)
        u = self.analysis((y * q.q_enc.view(-1, 1, 1))[None])[0]
        sched, hsched = self._schedules(y.shape[-2:])
        chunk, hyper_chunk, sym = self.entropy.encode(u, None, sched, hsched)
        y_hat = self.synthesis(sym[None])[0] * q.q_dec.view(-1, 1, 1)
        return chunk, hyper_chunk, y_hat

    @torch.no_grad()
    def decode(self, chunk, hyper_chunk, lat_hw, lambda_index, frame_index=None):
        q = self.gains.q_for_lambda(lambda_index)
        sched, hsched = self._schedules(lat_hw)
        sym = self.entropy.decode(chunk, hyper_chunk, None, sched, hsched,
                                  frame_index=frame_index)
        return self.synthesis(sym[None])[0] * q.q_dec.view(-1, 1, 1)
