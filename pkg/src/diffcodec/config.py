"""Model/codec configuration."""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    # latent autoencoder
    c_lat: int = 4
    ae_channels: tuple = (32, 64, 64)
    # motion
    flow_levels: int = 3
    flow_channels: int = 24
    max_displacement: float = 64.0
    mv_latent_channels: int = 8
    mv_down_factor: int = 4
    # contextual coding
    feature_channels: int = 24
    ctx_latent_channels: int = 24
    hyper_channels: int = 8
    # diffusion decoder
    denoiser_channels: tuple = (32, 48, 64)
    time_embed_dim: int = 128
    # QP prompt
    prompt_tokens: int = 8
    prompt_dim: int = 128
    # schedules / rates
    diffusion_steps_total: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lambda_values: tuple = (16.0, 48.0, 128.0, 384.0)

    def __post_init__(self):
        if self.c_lat < 1:
            raise ConfigError("c_lat must be >= 1")
        if len(self.lambda_values) != 4:
            raise ConfigError("exactly four lambda anchors are supported")

    def with_overrides(self, **kw):
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for k in ("ae_channels", "denoiser_channels", "lambda_values"):
            if k in d and isinstance(d[k], str):
                d[k] = tuple(float(x) if "." in x else int(x)
                             for x in d[k].split(","))
        return cls(**d)
