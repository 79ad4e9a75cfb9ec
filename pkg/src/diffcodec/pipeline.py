"""GOP-structured sequence coding and the bitstream container.

The encoder runs its own decode path for every bit-affecting state, so
encoder and decoder buffers can never diverge; the diffusion trajectory is
seeded from the header, making decoding fully deterministic given the
container and model weights alone.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .autoencoder import FRAME_DIVISOR
from .diffusion import DiffusionBuffer, TdirConfig, make_schedule, make_subschedule, run_tdir
from .entropy import Bitchunk
from .errors import ConfigError, RejectedInputError, StreamExhaustedError
from .qpp import compute_ratio

MAGIC = b"DVCM"
VERSION = 1
_HEADER = struct.Struct(">4sBHHHBBBBQ16s")
_FRAME_HEAD = struct.Struct(">BIII")
_SEED_STRIDE = 1000003  # per-frame rng stream spacing


@dataclass
class SequenceConfig:
    width: int
    height: int
    frame_count: int
    intra_period: int = 32
    lambda_index: float = 3.0
    DS: int = 50
    D: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.intra_period < 1:
            raise ConfigError("intra_period must be >= 1")
        if self.width % FRAME_DIVISOR or self.height % FRAME_DIVISOR:
            raise ConfigError(
                f"frame dims must be divisible by {FRAME_DIVISOR}, "
                f"got {self.width}x{self.height}")
        if self.frame_count < 1:
            raise ConfigError("frame_count must be >= 1")
        if not (0.0 <= self.lambda_index <= 3.0):
            raise ConfigError("lambda_index outside [0, 3]")
        if not (1 <= self.D <= self.DS):
            raise ConfigError("need 1 <= D <= DS")
        if round(self.lambda_index * 64) > 255:
            raise ConfigError("lambda_index does not fit fixed-point u8")


@dataclass
class FrameRecord:
    frame_type: int  # 0 = I, 1 = P
    mv_chunk: bytes
    ctx_chunk: bytes
    hyper_chunk: bytes  # u32 mv-hyper sub-length + mv hyper + ctx hyper

    def split_hyper(self):
        (n,) = struct.unpack(">I", self.hyper_chunk[:4])
        return self.hyper_chunk[4:4 + n], self.hyper_chunk[4 + n:]

    @staticmethod
    def pack_hyper(mv_hyper, ctx_hyper):
        return struct.pack(">I", len(mv_hyper)) + mv_hyper + ctx_hyper


@dataclass
class BitstreamContainer:
    config: SequenceConfig
    ae_hash: bytes
    frames: list = field(default_factory=list)
    truncated_at: int | None = None

    def to_bytes(self):
        cfg = self.config
        out = [_HEADER.pack(MAGIC, VERSION, cfg.width, cfg.height,
                            cfg.frame_count, cfg.intra_period,
                            round(cfg.lambda_index * 64), cfg.DS, cfg.D,
                            cfg.seed, self.ae_hash)]
        for fr in self.frames:
            out.append(_FRAME_HEAD.pack(fr.frame_type, len(fr.mv_chunk),
                                        len(fr.ctx_chunk), len(fr.hyper_chunk)))
            out.extend((fr.mv_chunk, fr.ctx_chunk, fr.hyper_chunk))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise StreamExhaustedError("stream shorter than header")
        magic, version, w, h, n, ip, lam_q, ds, d, seed, ae_hash = \
            _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise RejectedInputError("bad magic")
        if version != VERSION:
            raise RejectedInputError(f"unsupported stream version {version}")
        cfg = SequenceConfig(width=w, height=h, frame_count=n,
                             intra_period=ip, lambda_index=lam_q / 64.0,
                             DS=ds, D=d, seed=seed)
        box = cls(config=cfg, ae_hash=ae_hash)
        pos = _HEADER.size
        for k in range(n):
            if pos + _FRAME_HEAD.size > len(data):
                box.truncated_at = k
                return box
            ftype, lm, lc, lh = _FRAME_HEAD.unpack_from(data, pos)
            pos += _FRAME_HEAD.size
            if pos + lm + lc + lh > len(data):
                box.truncated_at = k
                return box
            mv = bytes(data[pos:pos + lm]); pos += lm
            ctx = bytes(data[pos:pos + lc]); pos += lc
            hyp = bytes(data[pos:pos + lh]); pos += lh
            box.frames.append(FrameRecord(ftype, mv, ctx, hyp))
        return box

    def total_bits(self):
        return 8 * len(self.to_bytes())

    def bpp(self):
        cfg = self.config
        return self.total_bits() / (cfg.frame_count * cfg.width * cfg.height)


@dataclass
class CodingResult:
    container: BitstreamContainer
    reconstructions: list | None
    frame_bits: list
    denoiser_calls: list
    frame_buffers: list

    def bpp(self):
        return self.container.bpp()


def _check_frames(frames, cfg):
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise RejectedInputError("expected (T,3,H,W) frames")
    if frames.shape[0] != cfg.frame_count:
        raise RejectedInputError(
            f"config says {cfg.frame_count} frames, got {frames.shape[0]}")
    if frames.shape[2] != cfg.height or frames.shape[3] != cfg.width:
        raise RejectedInputError("frame dims do not match config")


def _frame_rng(cfg, t):
    return torch.Generator().manual_seed(
        (cfg.seed * _SEED_STRIDE + t) % (2 ** 63))


def _chunk(b):
    return Bitchunk(bytes(b), 8 * len(b))


class _CodingLoop:
    """Shared encoder/decoder state machine for one sequence."""

    def __init__(self, model, cfg, run_diffusion, prompt_ratio=None):
        self.model = model
        self.cfg = cfg
        self.run_diffusion = run_diffusion
        self.q = model.gains.q_for_lambda(cfg.lambda_index)
        self.sched = make_schedule(model.config.diffusion_steps_total,
                                   model.config.beta_min, model.config.beta_max)
        self.tdir = TdirConfig(DS=cfg.DS, D=cfg.D)
        self.tmap = self.tdir.resolve_map(self.sched.N)
        self.sub = make_subschedule(self.sched, self.tmap)
        # prompt_ratio overrides the gain-derived prompt (QPP-off ablation)
        ratio = compute_ratio(self.q) if prompt_ratio is None else prompt_ratio
        self.ratio = float(ratio)
        self.tokens = model.prompt(ratio) if run_diffusion else None
        self.buffer = DiffusionBuffer(cfg.DS)
        self.feature = None
        self.prev_latent = None
        self.ref_recon = None
        self.first_p = True

    def seed_intra(self, y_hat):
        """Shared post-I-frame state: buffers reset, feature reseeded."""
        ae = self.model.frame_ae
        recon = ae.decode_frame(y_hat)
        self.feature = self.model.ctx_miner.feature_from_latent(
            ae.encode_frame(recon))
        self.prev_latent = None
        self.ref_recon = recon
        self.buffer.clear()
        self.first_p = True
        return recon

    def p_frame_recon(self, sym, c0, c1, t):
        """Shared P-frame reconstruction from decoded symbols."""
        y_hat, self.feature = self.model.ctx_codec.reconstruct(sym, c0, c1,
                                                               self.q)
        self.prev_latent = sym
        self.ref_recon = self.model.frame_ae.decode_frame(y_hat)
        calls = 0
        if self.run_diffusion:
            before = self.model.denoiser.call_count
            y_out = self._diffuse(y_hat, c0, t)
            calls = self.model.denoiser.call_count - before
            recon = self.model.frame_ae.decode_frame(y_out)
        else:
            recon = self.ref_recon
        self.first_p = False
        return recon, calls

    def _diffuse(self, y_hat, c0, t):
        den = self.model.denoiser

        def denoise_fn(z, k):
            n = int(self.tmap[k])
            return den(z[None], n, self.sub.alpha_bar[k], y_hat[None],
                       c0[None], self.tokens, self.ratio)[0]

        return run_tdir(y_hat, denoise_fn, self.buffer, self.tdir, self.sched,
                        self.first_p, _frame_rng(self.cfg, t), frame_id=t)


@torch.no_grad()
def encode_sequence(frames, cfg, model, want_reconstructions=False):
    """Code a (T,3,H,W) tensor into a container; optionally also return the
    encoder-side reconstructions (runs the diffusion decoder)."""
    _check_frames(frames, cfg)
    model.eval()
    loop = _CodingLoop(model, cfg, run_diffusion=want_reconstructions)
    box = BitstreamContainer(config=cfg, ae_hash=model.ae_hash_bytes())
    recons = [] if want_reconstructions else None
    frame_bits, calls_log, buffers = [], [], []
    ae = model.frame_ae
    for t in range(cfg.frame_count):
        x = frames[t]
        if t % cfg.intra_period == 0:
            y = ae.encode_frame(x)
            chunk, hyper, y_hat = model.intra.encode(y, cfg.lambda_index)
            rec = FrameRecord(0, b"", chunk.data,
                              FrameRecord.pack_hyper(b"", hyper.data))
            recon = loop.seed_intra(y_hat)
            calls = 0
        else:
            flow = model.flow_net(x, loop.ref_recon)
            mv_chunk, mv_hyper, flow_hat = model.mv_codec.encode(flow)
            c0, c1 = model.ctx_miner(loop.feature, flow_hat)
            y = ae.encode_frame(x)
            ctx_chunk, ctx_hyper, sym = model.ctx_codec.encode(
                y, c0, c1, loop.prev_latent, loop.q)
            rec = FrameRecord(1, mv_chunk.data, ctx_chunk.data,
                              FrameRecord.pack_hyper(mv_hyper.data,
                                                     ctx_hyper.data))
            recon, calls = loop.p_frame_recon(sym, c0, c1, t)
        box.frames.append(rec)
        frame_bits.append(8 * (len(rec.mv_chunk) + len(rec.ctx_chunk)
                               + len(rec.hyper_chunk)) + 8 * _FRAME_HEAD.size)
        calls_log.append(calls)
        buffers.append(list(loop.buffer.slots) if want_reconstructions else None)
        if want_reconstructions:
            recons.append(recon)
    return CodingResult(container=box, reconstructions=recons,
                        frame_bits=frame_bits, denoiser_calls=calls_log,
                        frame_buffers=buffers)


@torch.no_grad()
def decode_sequence(container, model, use_diffusion=True, prompt_ratio=None):
    """Decode a container; needs only the container and model weights.

    On a truncated stream the complete frames decode normally and a
    StreamExhaustedError carrying them is raised for the first bad frame.
    """
    cfg = container.config
    if container.ae_hash != model.ae_hash_bytes():
        raise ConfigError("stream was produced with different autoencoder "
                          "weights (hash mismatch)")
    model.eval()
    loop = _CodingLoop(model, cfg, run_diffusion=use_diffusion,
                       prompt_ratio=prompt_ratio)
    out = []
    lat_h, lat_w = cfg.height // 8, cfg.width // 8

    def bail(t, reason):
        raise StreamExhaustedError(f"stream ends inside frame {t}: {reason}",
                                   frame_index=t, frames=out)

    for t in range(cfg.frame_count):
        if t >= len(container.frames):
            bail(t, "record missing")
        rec = container.frames[t]
        mv_hyper, ctx_hyper = rec.split_hyper()
        try:
            if rec.frame_type == 0:
                y_hat = model.intra.decode(_chunk(rec.ctx_chunk),
                                           _chunk(ctx_hyper), (lat_h, lat_w),
                                           cfg.lambda_index, frame_index=t)
                recon = loop.seed_intra(y_hat)
            else:
                flow_hat = model.mv_codec.decode(
                    _chunk(rec.mv_chunk), _chunk(mv_hyper),
                    (cfg.height, cfg.width), frame_index=t)
                c0, c1 = model.ctx_miner(loop.feature, flow_hat)
                sym = model.ctx_codec.decode_symbols(
                    _chunk(rec.ctx_chunk), _chunk(ctx_hyper), c1,
                    loop.prev_latent, frame_index=t)
                recon, _ = loop.p_frame_recon(sym, c0, c1, t)
        except StreamExhaustedError as e:
            bail(t, str(e))
        out.append(recon)
    if container.truncated_at is not None:
        bail(container.truncated_at, "container truncated")
    return torch.stack(out)


# -- frame I/O -------------------------------------------------------------

def load_png_folder(path):
    """All .png files in a folder, sorted by name, as a (T,3,H,W) tensor."""
    import os
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if not names:
        raise RejectedInputError(f"no .png files in {path}")
    frames = []
    for name in names:
        img = Image.open(os.path.join(path, name)).convert("RGB")
        frames.append(torch.from_numpy(
            np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0))
    return torch.stack(frames)


def save_png_folder(frames, path):
    import os
    os.makedirs(path, exist_ok=True)
    for t, fr in enumerate(frames):
        arr = (fr.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(
            os.path.join(path, f"frame_{t:05d}.png"))


def load_yuv420(path, width, height, frame_count):
    """Raw planar 8-bit YUV 4:2:0 to RGB frames (BT.601 limited range)."""
    frame_bytes = width * height * 3 // 2
    with open(path, "rb") as f:
        data = f.read(frame_bytes * frame_count)
    if len(data) < frame_bytes * frame_count:
        raise RejectedInputError("yuv file shorter than requested frames")
    out = []
    for t in range(frame_count):
        raw = np.frombuffer(data, dtype=np.uint8, count=frame_bytes,
                            offset=t * frame_bytes)
        y = raw[:width * height].reshape(height, width).astype(np.float32)
        usz = width * height // 4
        u = raw[width * height:width * height + usz].reshape(
            height // 2, width // 2).astype(np.float32)
        v = raw[width * height + usz:].reshape(
            height // 2, width // 2).astype(np.float32)
        u = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
        v = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)
        yf = (y - 16.0) / 219.0
        uf = (u - 128.0) / 224.0
        vf = (v - 128.0) / 224.0
        r = yf + 1.402 * vf
        g = yf - 0.344136 * uf - 0.714136 * vf
        b = yf + 1.772 * uf
        rgb = np.clip(np.stack([r, g, b]), 0.0, 1.0)
        out.append(torch.from_numpy(rgb))
    return torch.stack(out)
