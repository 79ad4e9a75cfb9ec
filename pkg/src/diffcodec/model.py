"""The full codec model: every learned module in one bundle.

Groups modules by training role (autoencoder / intra / motion / contextual /
diffusion) so stage drivers can freeze and hash whole groups, and handles
checkpoint serialization with a config snapshot and the autoencoder weight
hash that the bitstream header carries.
"""

import dataclasses
import hashlib

import torch
from torch import nn

from .autoencoder import FrameAutoencoder
from .config import ModelConfig
from .contextual import ContextMiner, ContextualCodec, GainVectors
from .denoiser import ConditionalDenoiser
from .errors import ConfigError
from .intra import IntraCodec
from .layers import parameter_hash
from .motion import MotionCodec, PyramidFlowNet
from .qpp import PromptEmbedder

CHECKPOINT_VERSION = 1

GROUP_NAMES = ("autoencoder", "intra", "motion", "contextual", "diffusion")


class CodecModel(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.frame_ae = FrameAutoencoder(c_lat=cfg.c_lat, channels=cfg.ae_channels)
        self.intra = IntraCodec(c_lat=cfg.c_lat, hyper_ch=cfg.hyper_channels)
        self.flow_net = PyramidFlowNet(levels=cfg.flow_levels,
                                       channels=cfg.flow_channels,
                                       max_displacement=cfg.max_displacement)
        self.mv_codec = MotionCodec(latent_ch=cfg.mv_latent_channels,
                                    hyper_ch=cfg.hyper_channels)
        self.ctx_miner = ContextMiner(c_lat=cfg.c_lat,
                                      feature_ch=cfg.feature_channels,
                                      context_ch=cfg.feature_channels)
        self.ctx_codec = ContextualCodec(c_lat=cfg.c_lat,
                                         context_ch=cfg.feature_channels,
                                         feature_ch=cfg.feature_channels,
                                         latent_ch=cfg.ctx_latent_channels,
                                         hyper_ch=cfg.hyper_channels)
        self.gains = GainVectors(cfg.c_lat)
        self.denoiser = ConditionalDenoiser(c_lat=cfg.c_lat,
                                            context_ch=cfg.feature_channels,
                                            channels=cfg.denoiser_channels,
                                            time_dim=cfg.time_embed_dim,
                                            token_dim=cfg.prompt_dim)
        self.prompt = PromptEmbedder(n_tokens=cfg.prompt_tokens,
                                     dim=cfg.prompt_dim)

    # -- grouping ---------------------------------------------------------

    def group_modules(self, name):
        groups = {
            "autoencoder": [self.frame_ae],
            "intra": [self.intra],
            "motion": [self.flow_net, self.mv_codec],
            "contextual": [self.ctx_miner, self.ctx_codec, self.gains],
            "diffusion": [self.denoiser, self.prompt],
        }
        if name not in groups:
            raise ConfigError(f"unknown module group {name!r}")
        return groups[name]

    def group_parameters(self, names, attention_only=False):
        """Parameters of the named groups.

        With ``attention_only`` the diffusion group is restricted to the
        denoiser's attention layers and adapter branch (the prompt embedder
        stays trainable since it only feeds those layers).
        """
        for name in names:
            for mod in self.group_modules(name):
                if attention_only and mod is self.denoiser:
                    yield from mod.attention_and_adapter_parameters()
                else:
                    yield from mod.parameters()

    def group_hashes(self):
        return {name: self._hash_group(name) for name in GROUP_NAMES}

    def _hash_group(self, name):
        h = hashlib.sha256()
        for mod in self.group_modules(name):
            h.update(parameter_hash(mod))
        return h.hexdigest()[:16]

    def ae_hash_bytes(self):
        """16-byte autoencoder weight digest stored in stream headers."""
        return self.frame_ae.parameter_hash()

    # -- checkpoints ------------------------------------------------------

    def save(self, path):
        torch.save({
            "version": CHECKPOINT_VERSION,
            "config": dataclasses.asdict(self.config),
            "state_dict": self.state_dict(),
            "ae_hash": self.frame_ae.parameter_hash().hex(),
        }, path)

    @classmethod
    def load(cls, path):
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(
                f"checkpoint version {blob.get('version')} unsupported")
        model = cls(ModelConfig.from_dict(blob["config"]))
        model.load_state_dict(blob["state_dict"])
        if model.frame_ae.parameter_hash().hex() != blob["ae_hash"]:
            raise ConfigError("checkpoint autoencoder hash mismatch")
        return model
