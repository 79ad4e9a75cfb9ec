"""Show the two diffusion modes: independent steps that evaluate the
denoiser, and reuse steps that recycle the previous frame's predictions."""

import torch

from diffcodec.diffusion import (DiffusionBuffer, TdirConfig, make_schedule,
                                 run_tdir)

sched = make_schedule(1000, 1e-4, 0.02)
print(f"schedule: N={sched.N}, alpha_bar[1]={sched.alpha_bar[1]:.6f}, "
      f"alpha_bar[N]={sched.alpha_bar[-1]:.2e}")

calls = []


def denoise_fn(z, k):
    calls.append(k)
    return torch.tanh(0.3 * z) * 0.1  # stand-in noise estimate


y_hat = torch.randn(4, 8, 8)
cfg = TdirConfig(DS=10, D=4)
buf = DiffusionBuffer(cfg.DS)

# The first P frame after an intra frame runs every step independently and
# fills the buffer.
out1 = run_tdir(y_hat, denoise_fn, buf, cfg, sched, is_first_p=True,
                rng=torch.Generator().manual_seed(0))
print(f"first P frame: {len(calls)} denoiser calls (all independent)")

# Later frames reuse the first DS - D buffered predictions and only call
# the denoiser for the D low-noise steps.
calls.clear()
out2 = run_tdir(y_hat * 0.98, denoise_fn, buf, cfg, sched, is_first_p=False,
                rng=torch.Generator().manual_seed(1))
print(f"next P frame: {len(calls)} denoiser calls "
      f"(reused {cfg.DS - cfg.D} steps)")

# With D=DS the controller degenerates to plain sampling: bit-identical to
# a controller that never reuses.
full = TdirConfig(DS=10, D=10)
a = run_tdir(y_hat, denoise_fn, DiffusionBuffer(10), full, sched, True,
             rng=torch.Generator().manual_seed(2))
b = run_tdir(y_hat, denoise_fn, DiffusionBuffer(10), full, sched, False,
             rng=torch.Generator().manual_seed(2))
print("D=DS equals reuse-disabled sampling:", torch.equal(a, b))
