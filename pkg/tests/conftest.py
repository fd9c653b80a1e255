from pathlib import Path

import numpy as np
import pytest
import torch

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CKPT = ROOT / "checkpoints" / "reference.ckpt"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def tiny_model_config():
    from faceinpaint.config import ModelConfig
    return ModelConfig(widths=(8, 16, 16), time_dim=16, text_dim=8, vision_dim=8, attn_dim=8,
                       score_hidden=8, groups=4, patch=8)


@pytest.fixture
def tiny_model():
    from faceinpaint.pipeline import EditModel
    return EditModel(tiny_model_config()).eval()


@pytest.fixture(scope="session")
def schedule():
    from faceinpaint.diffusion import make_schedule
    return make_schedule(1000)


@pytest.fixture(scope="session")
def reference_ckpt():
    if not REFERENCE_CKPT.exists():
        pytest.skip("reference checkpoint not present")
    return REFERENCE_CKPT
