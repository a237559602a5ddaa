import numpy as np
import pytest
import torch

from pepseg.config import ModelConfig, RunConfig
from pepseg.data import SynthSpec, generate_dataset
from pepseg.model import PEPModel
from pepseg.supervision import Instance, Scene


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(encoder_widths=(8, 8, 8, 8, 8), feat_channels=8, head_channels=8,
                head_layers=1, descriptor_dim=8, excavate_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_run_config(**model_overrides) -> RunConfig:
    return RunConfig(model=tiny_model_config(**model_overrides))


def square_scene(boxes, size=64, image_id=0):
    """Scene of axis-aligned boxes (r0, c0, r1, c1, class); later boxes occlude earlier ones."""
    image = np.full((3, size, size), 0.1, dtype=np.float32)
    masks = []
    for r0, c0, r1, c1, cls in boxes:
        m = np.zeros((size, size), dtype=bool)
        m[r0:r1, c0:c1] = True
        for other in masks:
            other &= ~m
        masks.append(m)
        image[(cls - 1) % 3, r0:r1, c0:c1] = 0.9
    return Scene(image, [Instance(b[4], m) for b, m in zip(boxes, masks)], image_id)


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return PEPModel(tiny_cfg.model)


@pytest.fixture(scope="session")
def synth_scenes():
    return generate_dataset(4, SynthSpec(num_instances=(2, 4), overlap_bias=0.7, seed=3))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
