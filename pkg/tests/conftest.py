import numpy as np
import pytest
import torch

from viewmap.config import FieldConfig, RenderConfig


def tiny_field(dtype: str = "float64", **kw) -> FieldConfig:
    """Small grids and MLPs: two dense levels, two hashed levels."""
    base = dict(n_levels=4, n_features=2, base_resolution=4, growth=1.5, log2_hash_size=9, geo_features=3,
                density_hidden=8, color_hidden=8, color_layers=2, prop_levels=2, prop_base_resolution=4,
                prop_growth=1.5, prop_log2_hash_size=6, prop_hidden=8, dtype=dtype)
    base.update(kw)
    return FieldConfig(**base)


def small_render(**kw) -> RenderConfig:
    base = dict(n_proposal=16, n_main=8, chunk=4096)
    base.update(kw)
    return RenderConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
