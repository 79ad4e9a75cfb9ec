"""Timing diagnostics and the ablation study driver."""

import dataclasses
import time

import torch

from .diffusion import (DiffusionBuffer, DiffusionState, TdirConfig, add_noise,
                        independent_step, make_schedule, make_subschedule,
                        reuse_step)
from .errors import RejectedInputError
from .metrics import median_time, psnr
from .pipeline import decode_sequence, encode_sequence
from .qpp import compute_ratio


@torch.no_grad()
def timing_report(model, frame_hw=(256, 256), DS=50, repeats=20, seed=0):
    """Median step and P-frame-trajectory times at a given frame size.

    Reports the independent/reuse step time ratio and full trajectory
    times for D=DS (no reuse) and D=DS/2.
    """
    h, w = frame_hw
    torch.manual_seed(seed)
    c_lat = model.config.c_lat
    y_hat = torch.randn(c_lat, h // 8, w // 8)
    c0 = torch.randn(model.config.feature_channels, h // 8, w // 8)
    q = model.gains.q_for_lambda(3.0)
    tokens = model.prompt(compute_ratio(q))
    sched = make_schedule(model.config.diffusion_steps_total,
                          model.config.beta_min, model.config.beta_max)
    tdir = TdirConfig(DS=DS, D=DS)
    tmap = tdir.resolve_map(sched.N)
    sub = make_subschedule(sched, tmap)

    def denoise_fn(z, k):
        return model.denoiser(z[None], int(tmap[k]), sub.alpha_bar[k],
                              y_hat[None], c0[None], tokens)[0]

    rng = torch.Generator().manual_seed(seed)
    k = sub.N
    eps = torch.randn(y_hat.shape, generator=rng)
    z = torch.as_tensor(add_noise(y_hat, k, eps, sub))
    buffer = DiffusionBuffer(DS)

    def one_independent():
        independent_step(DiffusionState(z=z, k=k, ds=0), denoise_fn, sub,
                         rng, buffer)

    t_ind = median_time(one_independent, repeats=repeats)

    buffer.store(0, y_hat)

    def one_reuse():
        reuse_step(DiffusionState(z=z, k=k, ds=0), buffer, sub, rng)

    t_reuse = median_time(one_reuse, repeats=repeats)

    def trajectory(D):
        cfg = TdirConfig(DS=DS, D=D)
        buf = DiffusionBuffer(DS)
        for ds in range(DS):
            buf.store(ds, y_hat)
        state = DiffusionState(z=z.clone(), k=sub.N, ds=0)
        n_reuse = DS - D
        for _ in range(DS):
            if state.ds < n_reuse:
                state = reuse_step(state, buf, sub, rng)
            else:
                state = independent_step(state, denoise_fn, sub, rng, buf)
        return cfg

    t_full = median_time(lambda: trajectory(DS), repeats=max(3, repeats // 4))
    t_half = median_time(lambda: trajectory(DS // 2),
                         repeats=max(3, repeats // 4))
    return {
        "independent_step_s": t_ind,
        "reuse_step_s": t_reuse,
        "step_ratio": t_ind / t_reuse,
        "pframe_D_eq_DS_s": t_full,
        "pframe_D_half_s": t_half,
        "pframe_speedup_pct": 100.0 * (1.0 - t_half / t_full),
    }


DEFAULT_ABLATION_MODES = (
    ("no_diffusion", {"use_diffusion": False}),
    ("tdir_off_D_eq_DS", {"D": "DS"}),
    ("tdir_on", {}),
    ("qpp_off", {"prompt_ratio": 1.0}),
)


@torch.no_grad()
def ablation_suite(model, frames, base_cfg, modes=None, d_sweep=()):
    """Run the configured decode modes over one coded sequence.

    Every mode appears exactly once in the output; D-sweep rows are added
    after the named modes.  Rows carry bpp, mean PSNR, mean MSE to the
    source, and the decode wall time.
    """
    modes = list(DEFAULT_ABLATION_MODES if modes is None else modes)
    for d in d_sweep:
        modes.append((f"D_{d}", {"D": int(d)}))
    names = [m[0] for m in modes]
    if len(set(names)) != len(names):
        raise RejectedInputError("duplicate ablation mode names")

    rows = []
    for name, opts in modes:
        d = opts.get("D", base_cfg.D)
        if d == "DS":
            d = base_cfg.DS
        cfg = dataclasses.replace(base_cfg, D=d)
        result = encode_sequence(frames, cfg, model)
        t0 = time.perf_counter()
        recon = decode_sequence(result.container, model,
                                use_diffusion=opts.get("use_diffusion", True),
                                prompt_ratio=opts.get("prompt_ratio"))
        dt = time.perf_counter() - t0
        mse = float(torch.mean((recon - frames) ** 2))
        mean_psnr = sum(psnr(recon[t].numpy(), frames[t].numpy())
                        for t in range(len(frames))) / len(frames)
        rows.append({"mode": name, "D": cfg.D, "DS": cfg.DS,
                     "bpp": result.bpp(), "psnr": mean_psnr, "mse": mse,
                     "decode_s": dt})
    return rows
