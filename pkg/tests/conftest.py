import logging

import numpy as np
import pytest
import torch

from cpcseg.data import Sample
from cpcseg.encoder import EncoderConfig, init_toy_encoder

torch.set_num_threads(1)
logging.getLogger("cpcseg").setLevel(logging.ERROR)

SMALL = EncoderConfig(widths=(4, 4, 8), downsample=4)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_encoder():
    return init_toy_encoder(SMALL, seed=3)


@pytest.fixture
def small_encoder64():
    return init_toy_encoder(SMALL, seed=3, dtype=torch.float64)


def disk_sample(sid, size=16, seed=0, channels=3):
    """A bright disk on a dark background, with its mask."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    r = rng.uniform(0.2, 0.3) * size
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
    image = 0.25 + 0.5 * mask + 0.05 * rng.standard_normal((size, size))
    image = np.repeat(np.clip(image, 0, 1)[..., None], channels, axis=2).astype(np.float32)
    return Sample(sid, image, mask)


@pytest.fixture
def tiny_pool():
    return [disk_sample(f"s{i}", seed=i) for i in range(4)]
