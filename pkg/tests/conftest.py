import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from stun.core import EncoderSpec, ExperimentConfig  # noqa: E402
from stun.synthdata import SynthSpec, generate  # noqa: E402

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_spec():
    return EncoderSpec(widths=(4, 8), embedding_dim=8)


@pytest.fixture
def tiny_cfg(tiny_spec):
    return ExperimentConfig(encoder=tiny_spec, image_shape=(3, 16, 16), lr=1e-3, student_lr=1e-3,
                            teacher_epochs=2, student_epochs=2, pfe_epochs=2, mc_dropout_epochs=1, mc_passes=4)


@pytest.fixture(scope="session")
def tiny_data():
    return generate(SynthSpec(num_places=6, samples_per_place=4, image_shape=(3, 16, 16), seed=3))


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def images(n, shape=(3, 16, 16), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((n, *shape), generator=g)
