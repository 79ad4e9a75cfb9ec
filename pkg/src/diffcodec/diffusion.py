"""DDPM schedule, sampling math and the two-mode step-reuse controller.

The reverse process is standard DDPM: predict noise, derive the noise-free
latent, compute posterior mean/variance, sample.  The controller keeps a
per-timestep buffer of predicted noise-free latents from the previous
frame and, for the early (high-noise) part of the trajectory, substitutes
the buffered prediction for the denoiser evaluation.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InvariantError, RejectedInputError


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar tables, indexed 0..N with alpha_bar[0] = 1."""

    N: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(N, beta_min=1e-4, beta_max=0.02):
    if not (0.0 < beta_min < beta_max < 1.0):
        raise RejectedInputError(f"invalid beta range ({beta_min}, {beta_max})")
    if N < 1:
        raise RejectedInputError("N must be >= 1")
    beta = np.zeros(N + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_min, beta_max, N)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    return NoiseSchedule(N=N, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def default_timestep_map(N, steps):
    """steps timesteps spread uniformly over [1, N]; map[0] is fixed at 0."""
    if steps < 1 or steps > N:
        raise ConfigError(f"need 1 <= steps <= N, got steps={steps}, N={N}")
    n = np.rint(np.arange(0, steps + 1) * (N / steps)).astype(np.int64)
    n[0] = 0
    n[steps] = N
    if np.any(np.diff(n) <= 0):
        raise ConfigError("timestep map is not strictly increasing")
    return n


def make_subschedule(sched, timestep_map):
    """Restrict a schedule to a strided subset of its timesteps.

    The result is itself a valid schedule over indices 0..DS whose
    cumulative products match the parent at the mapped timesteps, so all
    sampling math applies unchanged to strided trajectories.
    """
    m = np.asarray(timestep_map, dtype=np.int64)
    if m[0] != 0 or np.any(np.diff(m) <= 0) or m[-1] > sched.N:
        raise ConfigError("invalid timestep map")
    alpha_bar = sched.alpha_bar[m]
    alpha = np.empty_like(alpha_bar)
    alpha[0] = 1.0
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    beta = 1.0 - alpha
    return NoiseSchedule(N=len(m) - 1, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_n(n, sched, lowest=0):
    if not (lowest <= n <= sched.N):
        raise RejectedInputError(f"timestep {n} outside [{lowest}, {sched.N}]")


def add_noise(y_hat, n, eps, sched):
    """Forward noising: z = sqrt(a_bar[n]) y + sqrt(1 - a_bar[n]) eps."""
    _check_n(n, sched)
    if eps.shape != y_hat.shape:
        raise RejectedInputError("noise shape must match latent shape")
    ab = sched.alpha_bar[n]
    return float(np.sqrt(ab)) * y_hat + float(np.sqrt(1.0 - ab)) * eps


def predict_noise_free(z, n, eps_theta, sched):
    """Invert the forward noising given a noise estimate (undefined at n=0)."""
    _check_n(n, sched, lowest=1)
    if eps_theta.shape != z.shape:
        raise RejectedInputError("eps shape must match state shape")
    ab = sched.alpha_bar[n]
    return (z - float(np.sqrt(1.0 - ab)) * eps_theta) / float(np.sqrt(ab))


def posterior_params(y_ddot, z, n, sched):
    """Mean and variance of p(z^{n-1} | z^n, noise-free latent)."""
    _check_n(n, sched, lowest=1)
    ab_n = sched.alpha_bar[n]
    ab_p = sched.alpha_bar[n - 1]
    a_n = sched.alpha[n]
    c_y = np.sqrt(ab_p) * (1.0 - a_n) / (1.0 - ab_n)
    c_z = (1.0 - ab_p) * np.sqrt(a_n) / (1.0 - ab_n)
    sigma2 = (1.0 - a_n) * (1.0 - ab_p) / (1.0 - ab_n)
    mu = float(c_y) * y_ddot + float(c_z) * z
    return mu, float(sigma2)


def posterior_sample(mu, sigma2, rng):
    if sigma2 < 0:
        raise InvariantError(f"negative posterior variance {sigma2}")
    if sigma2 == 0:
        return mu.clone()
    g = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    return mu + float(np.sqrt(sigma2)) * g


@dataclass
class TdirConfig:
    """Step-reuse controller settings.

    DS is the total number of diffusion steps per frame, D the number of
    independent (denoiser-evaluating) steps at the low-noise end of the
    trajectory; the remaining DS - D high-noise steps reuse buffered
    predictions from the previous frame.
    """

    DS: int = 50
    D: int = 25
    timestep_map: np.ndarray | None = None

    def __post_init__(self):
        if not (1 <= self.D <= self.DS):
            raise ConfigError(f"need 1 <= D <= DS, got D={self.D}, DS={self.DS}")

    def resolve_map(self, N):
        if self.timestep_map is not None:
            return np.asarray(self.timestep_map, dtype=np.int64)
        return default_timestep_map(N, self.DS)


class DiffusionBuffer:
    """Per-step store of predicted noise-free latents from one frame.

    ``ds`` counts trajectory progress: ds=0 is the first (highest-noise)
    sampling step.  Cleared at every intra frame.
    """

    def __init__(self, size):
        self.size = size
        self.slots = [None] * size
        self.frame_id = None

    def store(self, ds, y_ddot):
        self.slots[ds] = y_ddot

    def get(self, ds):
        y = self.slots[ds]
        if y is None:
            raise InvariantError(f"diffusion buffer slot {ds} is empty")
        return y

    def is_complete(self):
        return all(s is not None for s in self.slots)

    def clear(self):
        self.slots = [None] * self.size
        self.frame_id = None


@dataclass
class DiffusionState:
    z: torch.Tensor
    k: int   # index into the strided schedule; current timestep is map[k]
    ds: int  # trajectory progress index, 0-based


def independent_step(state, denoise_fn, subsched, rng, buffer):
    """Full reverse step: denoiser eval, noise-free prediction, sampling."""
    if state.k < 1:
        raise RejectedInputError("cannot step below timestep index 1")
    eps_theta = denoise_fn(state.z, state.k)
    y_ddot = predict_noise_free(state.z, state.k, eps_theta, subsched)
    mu, sigma2 = posterior_params(y_ddot, state.z, state.k, subsched)
    z_prev = posterior_sample(mu, sigma2, rng)
    if buffer is not None:
        buffer.store(state.ds, y_ddot)
    return DiffusionState(z=z_prev, k=state.k - 1, ds=state.ds + 1)


def reuse_step(state, buffer, subsched, rng):
    """Reverse step without a denoiser eval: the noise-free latent comes
    from the previous frame's buffer slot and is carried forward."""
    if state.k < 1:
        raise RejectedInputError("cannot step below timestep index 1")
    y_ddot = buffer.get(state.ds)
    mu, sigma2 = posterior_params(y_ddot, state.z, state.k, subsched)
    z_prev = posterior_sample(mu, sigma2, rng)
    buffer.store(state.ds, y_ddot)
    return DiffusionState(z=z_prev, k=state.k - 1, ds=state.ds + 1)


def run_tdir(y_hat, denoise_fn, buffer, cfg, sched, is_first_p, rng,
             frame_id=None):
    """Run the full per-frame trajectory and return the denoised latent.

    ``denoise_fn(z, k)`` must evaluate the conditioned denoiser at strided
    index ``k`` (the caller closes over conditioning and prompt tokens).
    The first P frame of a group of pictures always runs every step
    independently; later frames reuse the first DS - D steps.
    """
    sub = make_subschedule(sched, cfg.resolve_map(sched.N))
    n_reuse = 0 if is_first_p else cfg.DS - cfg.D
    if n_reuse > 0 and not buffer.is_complete():
        raise InvariantError("reuse requested with incomplete diffusion buffer")
    eps = torch.randn(y_hat.shape, generator=rng, dtype=y_hat.dtype,
                      device=y_hat.device)
    state = DiffusionState(z=add_noise(y_hat, sub.N, eps, sub), k=sub.N, ds=0)
    for _ in range(cfg.DS):
        if state.ds < n_reuse:
            state = reuse_step(state, buffer, sub, rng)
        else:
            state = independent_step(state, denoise_fn, sub, rng, buffer)
    buffer.frame_id = frame_id
    return state.z
