import sys

import numpy as np
import pytest
from hypothesis import settings

from ddpcil import encoder as enc
from ddpcil.datagen import SyntheticSpec, generate

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

TINY = enc.EncoderConfig(
    num_layers=3, num_heads=2, embed_dim=8, prompt_len=3, attach_depth=2,
    ff_width=12, text_layers=2, grid=(4, 4, 2), patch_size=2,
)


@pytest.fixture(scope="session")
def tiny_weights():
    return enc.init_frozen_encoder(TINY, 11)


@pytest.fixture(scope="session")
def small_data():
    """Six classes on a 4x4x2 grid, small enough for end-to-end protocol tests."""
    return generate(SyntheticSpec(num_classes=6, grid=(4, 4, 2), train_per_class=8, test_per_class=6, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
