"""Shared transform-coding machinery.

A :class:`LatentCodec` owns the entropy side of one coded latent: a
hyperprior branch (hyper latent coded with a learned per-channel factorized
model), optional extra prior features, and a parameter head evaluated once
per quadtree group so that later groups condition on already-decoded
symbols.  The identical provider closure drives both encoding and decoding,
which makes encoder/decoder parameter equality structural.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import entropy, rate
from .entropy import GaussianParams, SYMBOL_MAX, SYMBOL_MIN
from .layers import Upsample, conv3


class FactorizedPrior(nn.Module):
    """Per-channel Gaussian prior for the hyper latent."""

    def __init__(self, channels):
        super().__init__()
        self.mean = nn.Parameter(torch.zeros(channels))
        self.raw_scale = nn.Parameter(torch.zeros(channels))

    def scale(self):
        return F.softplus(self.raw_scale) + rate.SCALE_FLOOR

    def bits_train(self, x):
        c = x.shape[1]
        return rate.gaussian_bits(x, self.mean.view(1, c, 1, 1),
                                  self.scale().view(1, c, 1, 1))

    def numpy_params(self, shape):
        c = shape[0]
        mean = np.broadcast_to(self.mean.detach().numpy()[:, None, None], shape)
        scale = np.broadcast_to(self.scale().detach().numpy()[:, None, None], shape)
        return GaussianParams(np.ascontiguousarray(mean, dtype=np.float64),
                              np.ascontiguousarray(scale, dtype=np.float64))


def quantize_symbols(u):
    """Round to integer symbols, clamped to the codable range."""
    return torch.round(u).clamp(SYMBOL_MIN, SYMBOL_MAX)


class LatentCodec(nn.Module):
    """Entropy model for one latent tensor (hyperprior + quadtree groups)."""

    def __init__(self, latent_ch, hyper_ch=8, prior_ch=0, head_ch=48):
        super().__init__()
        self.latent_ch = latent_ch
        self.hyper_ch = hyper_ch
        self.hyper_enc = nn.Sequential(
            conv3(latent_ch, hyper_ch, stride=2), nn.GELU(),
            conv3(hyper_ch, hyper_ch, stride=2),
        )
        self.hyper_dec = nn.Sequential(
            Upsample(hyper_ch, hyper_ch), nn.GELU(),
            Upsample(hyper_ch, latent_ch),
        )
        self.hyper_prior = FactorizedPrior(hyper_ch)
        self.fusion = nn.Sequential(
            conv3(latent_ch + prior_ch, head_ch), nn.GELU(),
            conv3(head_ch, head_ch),
        )
        self.head = nn.Sequential(
            conv3(head_ch + latent_ch, head_ch), nn.GELU(),
            conv3(head_ch, 2 * latent_ch),
        )
        self._mask_cache = {}

    # -- helpers -----------------------------------------------------------

    def _masks(self, schedule):
        key = schedule.shape
        if key not in self._mask_cache:
            self._mask_cache[key] = [
                torch.from_numpy(schedule.group_masks[k]) for k in range(4)]
        return self._mask_cache[key]

    def _fusion_features(self, hyper_feat, priors):
        x = hyper_feat if priors is None else torch.cat([hyper_feat, priors], 1)
        return self.fusion(x)

    def _head_params(self, fusion_feat, context):
        out = self.head(torch.cat([fusion_feat, context], 1))
        mu, raw = out.chunk(2, dim=1)
        return mu, F.softplus(raw) + rate.SCALE_FLOOR

    def group_params(self, fusion_feat, decoded, schedule):
        """Teacher-forced parameters for every position (training path)."""
        masks = self._masks(schedule)
        mean = torch.zeros_like(decoded)
        scale = torch.ones_like(decoded)
        context = torch.zeros_like(decoded)
        for k in schedule.order:
            m = masks[k]
            mu, sc = self._head_params(fusion_feat, context)
            mean = torch.where(m, mu, mean)
            scale = torch.where(m, sc, scale)
            context = torch.where(m, decoded, context)
        return mean, scale

    # -- training ----------------------------------------------------------

    def bits_train(self, u, priors, schedule):
        """Differentiable total bits (main + hyper) and the STE-quantized latent."""
        h = self.hyper_enc(u)
        h_noisy = rate.noisy_quantize(h, self.training)
        bits_hyper = self.hyper_prior.bits_train(h_noisy)
        hyper_feat = self.hyper_dec(h_noisy)
        fusion_feat = self._fusion_features(hyper_feat, priors)
        u_noisy = rate.noisy_quantize(u, self.training)
        mean, scale = self.group_params(fusion_feat, u_noisy, schedule)
        bits_main = rate.gaussian_bits(u_noisy, mean, scale)
        return bits_main + bits_hyper, rate.ste_round(u)

    # -- coding ------------------------------------------------------------

    def _provider(self, fusion_feat, schedule):
        masks = self._masks(schedule)

        def provider(k, decoded_np):
            context = torch.zeros_like(fusion_feat[:, :self.latent_ch])
            done = torch.zeros(schedule.shape, dtype=torch.bool)
            for g in schedule.order:
                if g == k:
                    break
                done |= masks[g]
            ctx_vals = torch.from_numpy(decoded_np.astype(np.float32))[None]
            context = torch.where(done, ctx_vals, context)
            with torch.no_grad():
                mu, sc = self._head_params(fusion_feat, context)
            return GaussianParams(mu[0].numpy().astype(np.float64),
                                  sc[0].numpy().astype(np.float64))

        return provider

    @torch.no_grad()
    def encode(self, u, priors, schedule, hyper_schedule):
        """Code a (C,h,w) latent; returns (chunk, hyper chunk, symbols)."""
        u = u[None]
        priors = None if priors is None else priors[None]
        h_sym = quantize_symbols(self.hyper_enc(u))
        hp = self.hyper_prior.numpy_params(tuple(h_sym.shape[1:]))
        hyper_chunk = entropy.encode_symbols(
            h_sym[0].numpy().astype(np.int64), hp, hyper_schedule)
        hyper_feat = self.hyper_dec(h_sym)
        fusion_feat = self._fusion_features(hyper_feat, priors)
        sym = quantize_symbols(u)
        chunk = entropy.encode_grid(sym[0].numpy().astype(np.int64),
                                    self._provider(fusion_feat, schedule),
                                    schedule)
        return chunk, hyper_chunk, sym[0]

    @torch.no_grad()
    def decode(self, chunk, hyper_chunk, priors, schedule, hyper_schedule,
               frame_index=None):
        """Exact mirror of :meth:`encode`; returns the symbol tensor."""
        priors = None if priors is None else priors[None]
        h_shape = (self.hyper_ch,) + hyper_schedule.shape
        hp = self.hyper_prior.numpy_params(h_shape)
        h_sym = entropy.decode_symbols(hyper_chunk, hp, hyper_schedule,
                                       shape=h_shape, frame_index=frame_index)
        h_sym = torch.from_numpy(h_sym.astype(np.float32))[None]
        hyper_feat = self.hyper_dec(h_sym)
        fusion_feat = self._fusion_features(hyper_feat, priors)
        shape = (self.latent_ch,) + schedule.shape
        sym = entropy.decode_grid(chunk, shape,
                                  self._provider(fusion_feat, schedule),
                                  schedule, frame_index=frame_index)
        return torch.from_numpy(sym.astype(np.float32))
