"""Temporal context mining and conditional latent coding.

The previous frame's decoded feature is motion-compensated and refined
into a two-scale context pyramid (1/8 and 1/16 of frame resolution).  The
current latent, scaled by per-channel encoder gains, is coded at 1/16
resolution with the small-scale context and the previous frame's coded
latent as entropy priors; the synthesis side emits both the reconstructed
latent (scaled by decoder gains) and the feature stored for the next frame.
"""

from dataclasses import dataclass

import torch
from torch import nn

from . import entropy
from .coding import LatentCodec
from .errors import RejectedInputError
from .layers import ResBlock, Upsample, conv3
from .motion import resize_flow, warp


@dataclass
class QuantParams:
    """Per-channel encoder/decoder gain vectors for one rate point."""

    q_enc: torch.Tensor
    q_dec: torch.Tensor
    lambda_index: float

    def __post_init__(self):
        if (self.q_enc <= 0).any() or (self.q_dec <= 0).any():
            raise RejectedInputError("gain vectors must be strictly positive")


class GainVectors(nn.Module):
    """Four learned gain anchors with log-space interpolation between them."""

    def __init__(self, channels, enc_init=(0.25, 0.5, 1.0, 2.0)):
        super().__init__()
        init = torch.log(torch.tensor(enc_init)).unsqueeze(1).repeat(1, channels)
        self.log_q_enc = nn.Parameter(init.clone())
        self.log_q_dec = nn.Parameter(-init.clone())

    def q_for_lambda(self, lambda_index):
        """Gains for a (possibly fractional) rate anchor index in [0, 3]."""
        idx = float(lambda_index)
        if not (0.0 <= idx <= 3.0):
            raise RejectedInputError(f"lambda_index {idx} outside [0, 3]")
        lo = int(idx)
        hi = min(lo + 1, 3)
        t = idx - lo
        log_e = (1 - t) * self.log_q_enc[lo] + t * self.log_q_enc[hi]
        log_d = (1 - t) * self.log_q_dec[lo] + t * self.log_q_dec[hi]
        return QuantParams(q_enc=torch.exp(log_e), q_dec=torch.exp(log_d),
                           lambda_index=idx)


class ContextMiner(nn.Module):
    """Warp + refine the buffered feature into the two context scales."""

    def __init__(self, c_lat=4, feature_ch=24, context_ch=24):
        super().__init__()
        self.feature_ch = feature_ch
        self.from_latent = nn.Sequential(conv3(c_lat, feature_ch), nn.GELU(),
                                         conv3(feature_ch, feature_ch))
        self.refine0 = nn.Sequential(conv3(feature_ch, context_ch),
                                     ResBlock(context_ch), ResBlock(context_ch))
        self.down1 = nn.Sequential(conv3(context_ch, context_ch, stride=2),
                                   ResBlock(context_ch))

    def feature_from_latent(self, latent):
        """Feature-buffer seed computed from a decoded latent (intra frames)."""
        squeeze = latent.ndim == 3
        x = latent[None] if squeeze else latent
        out = self.from_latent(x)
        return out[0] if squeeze else out

    def forward(self, feature, flow):
        """(feature at 1/8, full-res flow) -> (c0 at 1/8, c1 at 1/16)."""
        squeeze = feature.ndim == 3
        if squeeze:
            feature, flow = feature[None], flow[None]
        if feature.shape[1] != self.feature_ch:
            raise RejectedInputError(
                f"expected {self.feature_ch}-channel feature, got {feature.shape[1]}")
        lat_flow = resize_flow(flow, feature.shape[2:])
        aligned = warp(feature, lat_flow)
        c0 = self.refine0(aligned)
        c1 = self.down1(c0)
        if squeeze:
            return c0[0], c1[0]
        return c0, c1


class ContextualCodec(nn.Module):
    """Conditional encoder/decoder for the frame latent (2x down internally)."""

    def __init__(self, c_lat=4, context_ch=24, feature_ch=24,
                 latent_ch=24, hyper_ch=8):
        super().__init__()
        if feature_ch != context_ch:
            raise RejectedInputError("feature and context channels must match")
        self.c_lat = c_lat
        self.latent_ch = latent_ch
        self.analysis = nn.Sequential(
            conv3(c_lat + context_ch, 32, stride=2), nn.GELU(),
            conv3(32, 32), nn.GELU(),
            conv3(32, latent_ch),
        )
        self.synthesis_up = nn.Sequential(
            conv3(latent_ch + context_ch, 32), nn.GELU(),
            ResBlock(32),
            Upsample(32, feature_ch),
        )
        self.synthesis_body = nn.Sequential(
            ResBlock(feature_ch), ResBlock(feature_ch))
        self.feature_head = conv3(feature_ch, feature_ch)
        self.latent_head = conv3(feature_ch, c_lat)
        # priors: small-scale context + previous frame's coded latent
        self.entropy = LatentCodec(latent_ch, hyper_ch=hyper_ch,
                                   prior_ch=context_ch + latent_ch)

    def _encode_transform(self, y, c0, q):
        scaled = y * q.q_enc.view(1, -1, 1, 1)
        return self.analysis(torch.cat([scaled, c0], dim=1))

    def _decode_transform(self, sym, c0, c1, q):
        h = self.synthesis_up(torch.cat([sym, c1], dim=1))
        h = self.synthesis_body(h + c0)
        feature = self.feature_head(h)
        y_hat = self.latent_head(h) * q.q_dec.view(1, -1, 1, 1)
        return y_hat, feature

    def _priors(self, c1, prev_latent):
        if prev_latent is None:
            prev_latent = torch.zeros(c1.shape[0], self.latent_ch,
                                      *c1.shape[2:], dtype=c1.dtype)
        return torch.cat([c1, prev_latent], dim=1)

    def bits_train(self, y, c0, c1, prev_latent, q):
        """Differentiable (bits, y_hat, feature, u_hat) for training batches."""
        u = self._encode_transform(y, c0, q)
        sched = entropy.build_quadtree_schedule(u.shape[-2], u.shape[-1])
        bits, u_hat = self.entropy.bits_train(u, self._priors(c1, prev_latent),
                                              sched)
        y_hat, feature = self._decode_transform(u_hat, c0, c1, q)
        return bits, y_hat, feature, u_hat

    @torch.no_grad()
    def encode(self, y, c0, c1, prev_latent, q):
        """Code a (c_lat,h,w) latent; returns (chunk, hyper chunk, symbols)."""
        u = self._encode_transform(y[None], c0[None], q)[0]
        sched = entropy.build_quadtree_schedule(u.shape[-2], u.shape[-1])
        hsched = entropy.build_single_group_schedule(u.shape[-2] // 4,
                                                     u.shape[-1] // 4)
        prior = self._priors(c1[None],
                             None if prev_latent is None else prev_latent[None])[0]
        return self.entropy.encode(u, prior, sched, hsched)

    @torch.no_grad()
    def decode_symbols(self, chunk, hyper_chunk, c1, prev_latent,
                       frame_index=None):
        """Entropy-decode the coded latent symbols."""
        h, w = c1.shape[-2:]
        sched = entropy.build_quadtree_schedule(h, w)
        hsched = entropy.build_single_group_schedule(h // 4, w // 4)
        prior = self._priors(c1[None],
                             None if prev_latent is None else prev_latent[None])[0]
        return self.entropy.decode(chunk, hyper_chunk, prior, sched, hsched,
                                   frame_index=frame_index)

    @torch.no_grad()
    def reconstruct(self, sym, c0, c1, q):
        """Symbols -> (y_hat, feature); shared by encoder and decoder."""
        y_hat, feature = self._decode_transform(sym[None], c0[None], c1[None], q)
        return y_hat[0], feature[0]
