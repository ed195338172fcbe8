import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mpa.encoder import EncoderConfig

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_config():
    # 64-bit, few channels: cheap enough for whole-pipeline finite differences
    return EncoderConfig(widths=(3, 4, 4, 3), strides=(1, 2, 2, 1), dtype="float64")


def clustered_features(mask, channels=4, seed=0, noise=0.0):
    """Feature map whose fg pixels share one vector and bg pixels another (orthogonal)."""
    rng = np.random.default_rng(seed)
    fg = np.zeros(channels)
    bg = np.zeros(channels)
    fg[0], bg[1] = 1.0, 1.0
    m = np.asarray(mask, dtype=float)
    f = fg[:, None, None] * m[None] + bg[:, None, None] * (1 - m)[None]
    return f + noise * rng.normal(size=f.shape)


# acceptance summary: one line per criterion at the end of the run ---------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
