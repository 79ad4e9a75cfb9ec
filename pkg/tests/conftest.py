"""Shared fixtures: synthetic data and a disk-cached smoke-trained model."""

import hashlib
import os

import numpy as np
import pytest
import torch

from diffcodec import training
from diffcodec.model import CodecModel

_CACHE_DIR = os.path.join(os.path.dirname(__file__), "_cache")

# one entry per stage: (epochs, steps_per_epoch)
_RECIPE = {
    "seed": 7,
    "dataset": (8, 0, 7, 64),  # n_clips, seed, frames, size
    "stage0": (2000, 1200),
    1: (2, 100), 2: (2, 120), 3: (2, 100), 4: (2, 120),
    5: (3, 120), 6: (6, 150), 7: (3, 60), 8: (40, 150),
}


def _recipe_digest():
    text = repr(sorted(_RECIPE.items(), key=str)) + "v6"
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def make_pan_clip(seed=0, frames=8, size=64, pan=(2, 1)):
    """Smoothly panning textured background, no independent objects."""
    rng = np.random.default_rng(seed)
    big = size * 2
    coarse = rng.random((3, big // 8, big // 8)).astype(np.float32)
    tex = torch.nn.functional.interpolate(torch.from_numpy(coarse)[None],
                                          size=(big, big), mode="bilinear",
                                          align_corners=False)[0]
    out = torch.empty(frames, 3, size, size)
    for t in range(frames):
        oy = (size // 2 + t * pan[1]) % size
        ox = (size // 2 + t * pan[0]) % size
        out[t] = tex[:, oy:oy + size, ox:ox + size]
    return out.clamp(0, 1)


def train_toy_model(progress=print):
    n_clips, dseed, nframes, size = _RECIPE["dataset"]
    dataset = training.make_dataset(n_clips, seed=dseed, frames=nframes,
                                    size=size)
    torch.manual_seed(_RECIPE["seed"])
    model = CodecModel()
    ae_steps, intra_steps = _RECIPE["stage0"]
    training.run_stage0(model, dataset, ae_steps=ae_steps,
                        intra_steps=intra_steps, seed=_RECIPE["seed"])
    progress("stage 0 done")
    for sid in range(1, 9):
        epochs, spe = _RECIPE[sid]
        training.run_stage(model, training.STAGE_TABLE[sid], dataset,
                           steps_per_epoch=spe, seed=_RECIPE["seed"] + sid,
                           epochs=epochs)
        progress(f"stage {sid} done")
    return model


@pytest.fixture(scope="session")
def dataset():
    n_clips, dseed, nframes, size = _RECIPE["dataset"]
    return training.make_dataset(n_clips, seed=dseed, frames=nframes,
                                 size=size)


@pytest.fixture(scope="session")
def trained_model():
    os.makedirs(_CACHE_DIR, exist_ok=True)
    path = os.path.join(_CACHE_DIR, f"toy_{_recipe_digest()}.pt")
    if os.path.exists(path):
        return CodecModel.load(path)
    model = train_toy_model()
    model.save(path)
    return model


@pytest.fixture(scope="session")
def pan_clip():
    return make_pan_clip(seed=11, frames=8)


@pytest.fixture()
def fresh_model():
    torch.manual_seed(0)
    return CodecModel()
