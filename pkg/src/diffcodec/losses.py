"""Training losses and the differentiable P-frame forward pass.

All rate terms use the differentiable bit estimate normalized per pixel.
Distortion is MSE; the perceptual term is an MSE over the frozen frame
autoencoder's encoder activations.
"""

from dataclasses import dataclass

import torch

from .errors import RejectedInputError
from .motion import warp

PERIODIC_WEIGHTS = (0.5, 1.2, 0.5, 0.9)
PERCEPTUAL_WEIGHT = 0.025


def periodic_weight(t):
    """Frame weight for P frame index t >= 1; period 4."""
    if t < 1:
        raise RejectedInputError(f"periodic weight defined for t >= 1, got {t}")
    return PERIODIC_WEIGHTS[(t - 1) % 4]


@dataclass
class LossWeights:
    lam: float
    w_t: float
    w_p: float = PERCEPTUAL_WEIGHT

    @classmethod
    def for_frame(cls, lam, t, w_p=PERCEPTUAL_WEIGHT):
        return cls(lam=lam, w_t=periodic_weight(t), w_p=w_p)


def _mse(a, b):
    return torch.mean((a - b) ** 2)


def _num_pixels(x):
    return x.shape[0] * x.shape[-2] * x.shape[-1] if x.ndim == 4 \
        else x.shape[-2] * x.shape[-1]


def perceptual_mse(x, x_hat, feat_extractor):
    """Mean MSE over the extractor's feature maps (extractor stays frozen)."""
    fa = feat_extractor(x)
    fb = feat_extractor(x_hat)
    return sum(_mse(a, b) for a, b in zip(fa, fb)) / len(fa)


def loss_motion_distortion(x, x_warped, lw):
    return lw.w_t * lw.lam * _mse(x, x_warped)


def loss_contextual_distortion(x, x_hat, lw):
    return lw.w_t * lw.lam * _mse(x, x_hat)


def loss_motion_rd(x, x_warped, bits_m, lw):
    return bits_m / _num_pixels(x) + loss_motion_distortion(x, x_warped, lw)


def loss_contextual_rd(x, x_hat, bits_y, lw):
    return bits_y / _num_pixels(x) + loss_contextual_distortion(x, x_hat, lw)


def loss_compress_rd(x, x_hat, bits_m, bits_y, lw):
    return (bits_m + bits_y) / _num_pixels(x) \
        + loss_contextual_distortion(x, x_hat, lw)


def loss_compress_rdp(x, x_hat, bits_m, bits_y, lw, feat_extractor):
    """Rate + w_t*lambda*(MSE + w_p*perceptual MSE)."""
    d = _mse(x, x_hat) + lw.w_p * perceptual_mse(x, x_hat, feat_extractor)
    return (bits_m + bits_y) / _num_pixels(x) + lw.w_t * lw.lam * d


def loss_diffusion(eps, eps_theta):
    return _mse(eps, eps_theta)


def p_frame_forward(model, x, ref, feature, prev_latent, lambda_index):
    """One differentiable conditional coding step.

    ``x`` and ``ref`` are (B,3,H,W); ``feature`` is the buffered feature at
    1/8 resolution; ``prev_latent`` is the previous coded latent (entropy
    prior) or None.  Returns a dict with bits, reconstructions and the
    state to feed into the next step of a cascade unroll.
    """
    flow = model.flow_net(x, ref)
    bits_m, flow_hat = model.mv_codec.bits_train(flow)
    x_warped = warp(ref, flow_hat)
    c0, c1 = model.ctx_miner(feature, flow_hat)
    y = model.frame_ae.encoder(x)
    q = model.gains.q_for_lambda(lambda_index)
    bits_y, y_hat, feature_new, u_hat = model.ctx_codec.bits_train(
        y, c0, c1, prev_latent, q)
    x_hat = model.frame_ae.decoder(y_hat).clamp(0.0, 1.0)
    return {
        "bits_m": bits_m, "bits_y": bits_y,
        "x_warped": x_warped, "x_hat": x_hat,
        "y": y, "y_hat": y_hat, "c0": c0, "c1": c1, "q": q,
        "feature": feature_new, "u_hat": u_hat, "flow_hat": flow_hat,
    }


def loss_compress_rdp_cascade(frames, model, lam, T, start_t=1):
    """Mean RDP loss over a T-step recurrent unroll.

    ``frames`` is a list of (B,3,H,W) tensors; frames[0] is the reference
    (conditioning only, not scored) and frames[1..T] are coded in sequence,
    each conditioned on the previous step's decoded output and buffers.
    """
    if T < 1:
        raise RejectedInputError(f"cascade length must be >= 1, got {T}")
    if len(frames) < T + 1:
        raise RejectedInputError(
            f"need {T + 1} frames for a T={T} cascade, got {len(frames)}")
    ref = frames[0]
    feature = model.ctx_miner.feature_from_latent(model.frame_ae.encoder(ref))
    prev_latent = None
    total = 0.0
    for step in range(1, T + 1):
        lw = LossWeights.for_frame(lam, start_t + step - 1)
        out = p_frame_forward(model, frames[step], ref, feature,
                              prev_latent, _anchor_index(model, lam))
        total = total + loss_compress_rdp(frames[step], out["x_hat"],
                                          out["bits_m"], out["bits_y"], lw,
                                          model.frame_ae.encoder_features)
        ref = out["x_hat"]
        feature = out["feature"]
        prev_latent = out["u_hat"]
    return total / T


def _anchor_index(model, lam):
    values = list(model.config.lambda_values)
    if lam not in values:
        raise RejectedInputError(f"lambda {lam} is not one of {values}")
    return values.index(lam)
