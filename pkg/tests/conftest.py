import sys

import numpy as np
import pytest

from damamba import kernels
from damamba.config import Config, ModelConfig


def tiny_model_config(**kw) -> ModelConfig:
    """Smallest sensible model: d=4, one layer everywhere, no dropout."""
    base = dict(d=4, k_a=4, k_v=4, layers=1, ctx_layers=1, d_state=3, chunk_size=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**model_kw) -> Config:
    cfg = Config()
    cfg.model = tiny_model_config(**model_kw)
    cfg.train.batch_windows = 4
    cfg.train.epochs = 1
    cfg.train.lr = 1e-3
    cfg.train.warmup_steps = 2
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["python", "compiled"])
def scan_backend(request):
    if request.param == "compiled" and not kernels.HAVE_COMPILED:
        pytest.skip("compiled scan extension not built")
    prev = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
