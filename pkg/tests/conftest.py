import numpy as np
import pytest

from selfres.model import ModelConfig, init_weights
from selfres.pipeline import Prompt
from selfres.vision import EventSpec, generate_planted_video

SMALL = ModelConfig(num_layers=4, num_heads=2, model_dim=16, head_dim=8, vocab_size=32,
                    vision_dim=12, default_context=40, reflection_layer=2, seed=7)
PROMPT = Prompt(system=(1, 2, 3), query=(5, 6, 7))

ACCEPTANCE_LINES = []


def small_video(seed=0, beta=0.0, num_frames=16, patches=4, vision_dim=12):
    direction = np.zeros(vision_dim)
    direction[0] = 1.0
    event = EventSpec((4, 7), (1, 2), tuple(direction), beta)
    return generate_planted_video(seed, num_frames, patches, vision_dim, event)


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(SMALL)


@pytest.fixture
def prompt():
    return PROMPT


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
