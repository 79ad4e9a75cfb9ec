"""Multi-stage training driver.

Stage 0 pretrains the frame autoencoder and the intra codec; stages 1-8
follow the staged schedule (motion, contextual, joint, perceptual, cascade,
diffusion), each with its own trainable set, lambda set, epoch count and
learning-rate milestones.  Parameters outside a stage's trainable set are
hash-checked to be bit-identical before and after the stage.
"""

import csv
import random
from dataclasses import dataclass

import numpy as np
import torch

from . import losses
from .diffusion import add_noise, make_schedule
from .errors import ConfigError, InvariantError, RejectedInputError
from .qpp import compute_ratio


@dataclass
class StageConfig:
    stage_id: int
    trainable_groups: tuple
    lambda_set: tuple
    epochs: int
    lr_milestones: tuple
    lr_list: tuple
    loss_id: str
    cascade_T: int = 1
    attention_only: bool = False

    def __post_init__(self):
        if len(self.lr_milestones) != len(self.lr_list):
            raise ConfigError("lr list length must match milestones")


_LR5 = (1e-4, 5e-5, 1e-5, 5e-6)
_ALL_LAMBDAS = (16, 48, 128, 384)

STAGE_TABLE = {
    1: StageConfig(1, ("motion",), (384,), 5, (0,), (1e-4,), "motion_d"),
    2: StageConfig(2, ("contextual",), (384,), 5, (0,), (1e-4,), "contextual_d"),
    3: StageConfig(3, ("motion",), (384,), 8, (0,), (1e-4,), "motion_rd"),
    4: StageConfig(4, ("contextual",), (384,), 8, (0,), (1e-4,), "contextual_rd"),
    5: StageConfig(5, ("motion", "contextual"), (384,), 5,
                   (0, 2, 3, 4), _LR5, "compress_rd"),
    6: StageConfig(6, ("motion", "contextual"), _ALL_LAMBDAS, 20,
                   (0, 8, 12, 16, 18), _LR5 + (1e-6,), "compress_rdp"),
    7: StageConfig(7, ("motion", "contextual"), _ALL_LAMBDAS, 10,
                   (0, 4, 7, 9), (5e-5, 1e-5, 5e-6, 1e-6),
                   "compress_rdp_cascade", cascade_T=4),
    8: StageConfig(8, ("diffusion",), _ALL_LAMBDAS, 50,
                   (0, 30, 38, 45, 48), (5e-5, 2.5e-5, 1e-5, 5e-6, 1e-6),
                   "diffusion", attention_only=True),
}


def lr_for_epoch(cfg, epoch):
    """Replay the stage's milestone schedule for a given epoch index."""
    lr = cfg.lr_list[0]
    for m, v in zip(cfg.lr_milestones, cfg.lr_list):
        if epoch >= m:
            lr = v
    return lr


# -- synthetic clips ------------------------------------------------------

def make_clip(rng, frames=7, size=64):
    """One clip: textured panning background plus two moving sprites."""
    big = size * 2
    coarse = rng.random((3, big // 8, big // 8)).astype(np.float32)
    tex = torch.nn.functional.interpolate(torch.from_numpy(coarse)[None],
                                          size=(big, big), mode="bilinear",
                                          align_corners=False)[0].numpy()
    pan = rng.integers(-3, 4, size=2)
    sprites = []
    for _ in range(2):
        pos = rng.integers(8, size - 16, size=2).astype(np.float64)
        vel = rng.uniform(-2.5, 2.5, size=2)
        col = rng.random(3).astype(np.float32)
        sz = int(rng.integers(6, 14))
        sprites.append([pos, vel, col, sz])
    out = np.empty((frames, 3, size, size), dtype=np.float32)
    for t in range(frames):
        oy = (size // 2 + t * pan[1]) % size
        ox = (size // 2 + t * pan[0]) % size
        frame = tex[:, oy:oy + size, ox:ox + size].copy()
        for pos, vel, col, sz in sprites:
            y = int(pos[1] + t * vel[1]) % (size - sz)
            x = int(pos[0] + t * vel[0]) % (size - sz)
            frame[:, y:y + sz, x:x + sz] = col[:, None, None]
        out[t] = np.clip(frame, 0.0, 1.0)
    return torch.from_numpy(out)


def make_dataset(n_clips=8, seed=0, frames=7, size=64):
    rng = np.random.default_rng(seed)
    return [make_clip(rng, frames=frames, size=size) for _ in range(n_clips)]


# -- stage losses ---------------------------------------------------------

def _single_frame_loss(model, clip, loss_id, lam, t, lambda_index):
    x = clip[t][None]
    ref = clip[t - 1][None]
    feature = model.ctx_miner.feature_from_latent(model.frame_ae.encoder(ref))
    out = losses.p_frame_forward(model, x, ref, feature, None, lambda_index)
    lw = losses.LossWeights.for_frame(lam, t)
    if loss_id == "motion_d":
        return losses.loss_motion_distortion(x, out["x_warped"], lw)
    if loss_id == "contextual_d":
        return losses.loss_contextual_distortion(x, out["x_hat"], lw)
    if loss_id == "motion_rd":
        return losses.loss_motion_rd(x, out["x_warped"], out["bits_m"], lw)
    if loss_id == "contextual_rd":
        return losses.loss_contextual_rd(x, out["x_hat"], out["bits_y"], lw)
    if loss_id == "compress_rd":
        return losses.loss_compress_rd(x, out["x_hat"], out["bits_m"],
                                       out["bits_y"], lw)
    if loss_id == "compress_rdp":
        return losses.loss_compress_rdp(x, out["x_hat"], out["bits_m"],
                                        out["bits_y"], lw,
                                        model.frame_ae.encoder_features)
    raise ConfigError(f"unknown loss id {loss_id!r}")


def _diffusion_loss(model, clip, lam, t, lambda_index, sched, gen):
    x = clip[t][None]
    ref = clip[t - 1][None]
    feature = model.ctx_miner.feature_from_latent(model.frame_ae.encoder(ref))
    with torch.no_grad():
        out = losses.p_frame_forward(model, x, ref, feature, None, lambda_index)
    n = int(torch.randint(1, sched.N + 1, (1,), generator=gen))
    eps = torch.randn(out["y"].shape, generator=gen)
    z = add_noise(out["y"], n, eps, sched)
    ratio = compute_ratio(out["q"])
    tokens = model.prompt(ratio)
    eps_theta = model.denoiser(z, n, sched.alpha_bar[n], out["y_hat"],
                               out["c0"], tokens, float(ratio))
    return losses.loss_diffusion(eps, eps_theta)


def stage_loss(model, cfg, clip, lam, rng, sched=None, gen=None):
    """One training-step loss for the stage, on one clip."""
    lambda_index = list(_ALL_LAMBDAS).index(lam)
    if cfg.loss_id == "compress_rdp_cascade":
        start = rng.randrange(0, len(clip) - cfg.cascade_T - 1 + 1)
        frames = [clip[start + i][None] for i in range(cfg.cascade_T + 1)]
        return losses.loss_compress_rdp_cascade(frames, model, lam,
                                                cfg.cascade_T)
    t = rng.randrange(1, len(clip))
    if cfg.loss_id == "diffusion":
        return _diffusion_loss(model, clip, lam, t, lambda_index, sched, gen)
    return _single_frame_loss(model, clip, cfg.loss_id, lam, t, lambda_index)


def eval_stage_loss(model, cfg, dataset, seed=1234):
    """Deterministic mean stage loss over the dataset (fixed frame/lambda)."""
    was_training = model.training
    model.eval()
    rng = random.Random(seed)
    gen = torch.Generator().manual_seed(seed)
    sched = make_schedule(model.config.diffusion_steps_total,
                          model.config.beta_min, model.config.beta_max)
    total = 0.0
    with torch.no_grad():
        for clip in dataset:
            lam = cfg.lambda_set[rng.randrange(len(cfg.lambda_set))]
            total += float(stage_loss(model, cfg, clip, lam, rng, sched, gen))
    if was_training:
        model.train()
    return total / len(dataset)


# -- stage driver ---------------------------------------------------------

def run_stage(model, cfg, dataset, steps_per_epoch=50, seed=0, log_path=None,
              epochs=None, lr_scale=1.0, batch_clips=1):
    """Train one stage; returns the list of per-step losses.

    ``epochs`` overrides the table's epoch count for smoke runs; the lr
    schedule is replayed against the table's milestones either way, and
    ``lr_scale`` multiplies it (short smoke runs need larger steps).
    ``batch_clips`` averages the loss over several sampled clips per
    optimizer step.
    """
    if not dataset:
        raise RejectedInputError("empty dataset")
    torch.manual_seed(seed)
    rng = random.Random(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    sched = make_schedule(model.config.diffusion_steps_total,
                          model.config.beta_min, model.config.beta_max)

    frozen = [g for g in ("autoencoder", "intra", "motion", "contextual",
                          "diffusion") if g not in cfg.trainable_groups]
    before = {g: model._hash_group(g) for g in frozen}
    for p in model.parameters():
        p.requires_grad_(False)
    params = list(model.group_parameters(cfg.trainable_groups,
                                         attention_only=cfg.attention_only))
    for p in params:
        p.requires_grad_(True)
    frozen_denoiser = None
    if cfg.attention_only and "diffusion" in cfg.trainable_groups:
        frozen_denoiser = {n: model.denoiser.state_dict()[n].clone()
                           for n in model.denoiser.frozen_backbone_names()}

    opt = torch.optim.Adam(params, lr=cfg.lr_list[0])
    model.train()
    log_rows = []
    losses_out = []
    step = 0
    n_epochs = cfg.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        lr = lr_for_epoch(cfg, epoch) * lr_scale
        for group in opt.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            loss = 0.0
            for _ in range(batch_clips):
                clip = dataset[rng.randrange(len(dataset))]
                lam = cfg.lambda_set[rng.randrange(len(cfg.lambda_set))]
                loss = loss + stage_loss(model, cfg, clip, lam, rng, sched,
                                         gen)
            loss = loss / batch_clips
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            losses_out.append(float(loss.detach()))
            log_rows.append({"step": step, "stage": cfg.stage_id,
                             "epoch": epoch, "lr": lr, "lambda": lam,
                             "loss": float(loss.detach())})
            step += 1
    model.eval()

    for g in frozen:
        if model._hash_group(g) != before[g]:
            raise InvariantError(f"frozen group {g!r} changed during stage "
                                 f"{cfg.stage_id}")
    if frozen_denoiser is not None:
        now = model.denoiser.state_dict()
        for n, t in frozen_denoiser.items():
            if not torch.equal(now[n], t):
                raise InvariantError(
                    f"denoiser backbone parameter {n!r} changed in stage 8")

    if log_path is not None:
        with open(log_path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(log_rows[0]))
            if f.tell() == 0:
                writer.writeheader()
            writer.writerows(log_rows)
    return losses_out


# -- stage 0: autoencoder + intra codec -----------------------------------

def run_stage0(model, dataset, ae_steps=300, intra_steps=200, lr=1e-3,
               seed=0, log_path=None):
    """Pretrain the frame autoencoder, then the intra codec on its latents.

    The autoencoder is frozen before intra training and stays frozen for
    every later stage.
    """
    torch.manual_seed(seed)
    rng = random.Random(seed)
    frames = torch.cat([clip for clip in dataset], dim=0)

    ae_params = list(model.frame_ae.parameters())
    for p in model.parameters():
        p.requires_grad_(False)
    for p in ae_params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(ae_params, lr=lr)
    model.train()
    rows = []
    for step in range(ae_steps):
        idx = [rng.randrange(len(frames)) for _ in range(4)]
        x = frames[idx]
        x_hat = model.frame_ae.decoder(model.frame_ae.encoder(x))
        loss = torch.mean((x - x_hat) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"step": step, "stage": 0, "phase": "ae",
                     "lambda": "", "loss": float(loss.detach())})

    for p in ae_params:
        p.requires_grad_(False)
    ae_hash = model._hash_group("autoencoder")

    intra_params = list(model.intra.parameters())
    for p in intra_params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(intra_params, lr=1e-4)
    for step in range(intra_steps):
        idx = [rng.randrange(len(frames)) for _ in range(4)]
        x = frames[idx]
        lam = _ALL_LAMBDAS[rng.randrange(4)]
        with torch.no_grad():
            y = model.frame_ae.encoder(x)
        bits, y_hat = model.intra.bits_train(y, list(_ALL_LAMBDAS).index(lam))
        x_hat = model.frame_ae.decoder(y_hat)
        num_px = x.shape[0] * x.shape[-2] * x.shape[-1]
        loss = bits / num_px + lam * torch.mean((x - x_hat) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"step": ae_steps + step, "stage": 0, "phase": "intra",
                     "lambda": lam, "loss": float(loss.detach())})
    model.eval()

    if model._hash_group("autoencoder") != ae_hash:
        raise InvariantError("autoencoder changed during intra training")
    if log_path is not None:
        with open(log_path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            if f.tell() == 0:
                writer.writeheader()
            writer.writerows(rows)
    return rows


def run_all_stages(model, dataset, steps_per_epoch=50, seed=0, log_path=None,
                   epochs_override=None, checkpoint_dir=None):
    """Stage 0 through 8 in sequence; optional per-stage checkpoints."""
    import os
    run_stage0(model, dataset, seed=seed, log_path=log_path)
    if checkpoint_dir is not None:
        model.save(os.path.join(checkpoint_dir, "stage0.pt"))
    for sid in range(1, 9):
        cfg = STAGE_TABLE[sid]
        run_stage(model, cfg, dataset, steps_per_epoch=steps_per_epoch,
                  seed=seed + sid, log_path=log_path,
                  epochs=epochs_override)
        if checkpoint_dir is not None:
            model.save(os.path.join(checkpoint_dir, f"stage{sid}.pt"))
    return model
