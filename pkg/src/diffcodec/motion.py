"""Optical flow estimation, bilinear warping and motion compression."""

import torch
import torch.nn.functional as F
from torch import nn

from . import entropy
from .coding import LatentCodec
from .errors import RejectedInputError
from .layers import ResBlock, Upsample, conv3


def warp(source, flow):
    """Bilinear backward warp with border replication.

    ``source`` is (B,C,H,W) or (C,H,W); ``flow`` matches spatially with two
    channels (dx, dy) in pixels.  Implemented with integer gathers so that
    zero flow reproduces the source exactly.
    """
    squeeze = source.ndim == 3
    if squeeze:
        source, flow = source[None], flow[None]
    if flow.shape[1] != 2 or flow.shape[2:] != source.shape[2:]:
        raise RejectedInputError(
            f"flow shape {tuple(flow.shape)} does not match source {tuple(source.shape)}")
    b, c, h, w = source.shape
    ys = torch.arange(h, dtype=source.dtype, device=source.device)
    xs = torch.arange(w, dtype=source.dtype, device=source.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    x = gx[None] + flow[:, 0]
    y = gy[None] + flow[:, 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)

    def gather(yy, xx):
        yy = yy.long().clamp(0, h - 1)
        xx = xx.long().clamp(0, w - 1)
        idx = (yy * w + xx).reshape(b, 1, -1).expand(b, c, h * w)
        return source.reshape(b, c, -1).gather(2, idx).reshape(b, c, h, w)

    out = (gather(y0, x0) * (1 - fy) * (1 - fx)
           + gather(y0, x0 + 1) * (1 - fy) * fx
           + gather(y0 + 1, x0) * fy * (1 - fx)
           + gather(y0 + 1, x0 + 1) * fy * fx)
    return out[0] if squeeze else out


def resize_flow(flow, size):
    """Resize a flow field, rescaling displacements with the resolution."""
    squeeze = flow.ndim == 3
    if squeeze:
        flow = flow[None]
    h, w = flow.shape[2:]
    nh, nw = size
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    out = torch.stack([out[:, 0] * (nw / w), out[:, 1] * (nh / h)], dim=1)
    return out[0] if squeeze else out


class PyramidFlowNet(nn.Module):
    """Coarse-to-fine residual flow over a small image pyramid."""

    def __init__(self, levels=3, channels=24, max_displacement=8.0):
        super().__init__()
        self.levels = levels
        self.max_displacement = max_displacement
        self.blocks = nn.ModuleList()
        for _ in range(levels):
            self.blocks.append(nn.Sequential(
                conv3(8, channels), nn.GELU(),
                conv3(channels, channels), nn.GELU(),
                conv3(channels, channels), nn.GELU(),
                conv3(channels, 2),
            ))

    def forward(self, current, previous):
        squeeze = current.ndim == 3
        if squeeze:
            current, previous = current[None], previous[None]
        if current.shape != previous.shape:
            raise RejectedInputError("flow estimation needs equal frame dims")
        pyr_c = [current]
        pyr_p = [previous]
        for _ in range(self.levels - 1):
            pyr_c.append(F.avg_pool2d(pyr_c[-1], 2))
            pyr_p.append(F.avg_pool2d(pyr_p[-1], 2))
        flow = torch.zeros_like(pyr_c[-1][:, :2])
        for lvl in range(self.levels - 1, -1, -1):
            if flow.shape[2:] != pyr_c[lvl].shape[2:]:
                flow = resize_flow(flow, pyr_c[lvl].shape[2:])
            warped = warp(pyr_p[lvl], flow)
            inp = torch.cat([pyr_c[lvl], warped, flow], dim=1)
            # per-level bound keeps the warp away from the border-replicated
            # flat region where the loss surface has no gradient
            bound = self.max_displacement / (2 ** lvl)
            flow = (flow + self.blocks[lvl](inp)).clamp(-bound, bound)
        return flow[0] if squeeze else flow


class MotionCodec(nn.Module):
    """Compress a 2-channel flow field through a 4x-downsampled latent.

    The entropy model is a hyperprior plus the quadtree group schedule;
    no temporal priors are used on the motion side.
    """

    def __init__(self, latent_ch=8, hyper_ch=8):
        super().__init__()
        self.latent_ch = latent_ch
        self.analysis = nn.Sequential(
            conv3(2, 16, stride=2), nn.GELU(),
            conv3(16, 16), nn.GELU(),
            conv3(16, latent_ch, stride=2),
        )
        self.synthesis = nn.Sequential(
            conv3(latent_ch, 16),
            ResBlock(16),
            Upsample(16, 16), nn.GELU(),
            Upsample(16, 16), nn.GELU(),
            conv3(16, 2),
        )
        self.entropy = LatentCodec(latent_ch, hyper_ch=hyper_ch, prior_ch=0)

    def bits_train(self, flow):
        """Differentiable (bits, reconstructed flow) for training batches."""
        u = self.analysis(flow)
        sched = entropy.build_quadtree_schedule(u.shape[-2], u.shape[-1])
        bits, u_hat = self.entropy.bits_train(u, None, sched)
        return bits, self.synthesis(u_hat)

    @torch.no_grad()
    def encode(self, flow):
        """Code a (2,H,W) flow; returns (chunk, hyper chunk, decoded flow)."""
        u = self.analysis(flow[None])[0]
        sched = entropy.build_quadtree_schedule(u.shape[-2], u.shape[-1])
        hsched = entropy.build_single_group_schedule(u.shape[-2] // 4, u.shape[-1] // 4)
        chunk, hyper_chunk, sym = self.entropy.encode(u, None, sched, hsched)
        flow_hat = self.synthesis(sym[None])[0]
        return chunk, hyper_chunk, flow_hat

    @torch.no_grad()
    def decode(self, chunk, hyper_chunk, frame_hw, frame_index=None):
        """Mirror of :meth:`encode` for a frame of known dims."""
        h, w = frame_hw
        sched = entropy.build_quadtree_schedule(h // 4, w // 4)
        hsched = entropy.build_single_group_schedule(h // 16, w // 16)
        sym = self.entropy.decode(chunk, hyper_chunk, None, sched, hsched,
                                  frame_index=frame_index)
        return self.synthesis(sym[None])[0]
