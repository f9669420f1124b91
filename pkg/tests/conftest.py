import numpy as np
import pytest

from psdebnn.model import ModelConfig, PsdeBnn

ACCEPTANCE = pytest.StashKey[list]()


def small_config(**kw):
    base = dict(
        d_x=2,
        num_classes=2,
        hidden_widths=(8,),
        drift_hidden=(4,),
        sigma=0.3,
        t1=0.0,
        t2=0.5,
        jump_mode="learnable",
        num_steps=10,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return PsdeBnn(small_config())


@pytest.fixture
def make_model():
    return lambda **kw: PsdeBnn(small_config(**kw))


@pytest.fixture
def batch():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 2))
    y = np.array([0, 1, 1, 0, 1])
    return x, y


@pytest.fixture
def record(request):
    """Log one acceptance line: ``record(number, passed, detail)``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def _record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
