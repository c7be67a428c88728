import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from gaitscale.models import ModelConfig

# every test runs with one BLAS thread so float results are reproducible
_LIMITS = threadpool_limits(1)


TINY = dict(
    variant="shallow",
    base_stage_widths=(4, 4, 4, 4),
    base_stage_heads=(2, 2, 2, 2),
    head_dim=2,
    emb_size=3,
    crop_length=3,
    mlp_ratio=1,
)


def tiny_config(family="gaitpt_v2", **kw) -> ModelConfig:
    return ModelConfig(family=family, **{**TINY, **kw})


SMALL = dict(
    variant="shallow",
    base_stage_widths=(8, 8, 16, 16),
    base_stage_heads=(1, 1, 2, 2),
    head_dim=8,
    emb_size=16,
    crop_length=8,
    mlp_ratio=2,
)


def small_config(family="gaitpt_v2", **kw) -> ModelConfig:
    return ModelConfig(family=family, **{**SMALL, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------------
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
