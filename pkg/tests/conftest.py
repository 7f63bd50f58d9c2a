import numpy as np
import pytest

from hsproj import projection_head as ph
from hsproj import synthetic_oracle as so


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ph.MapperConfig(d_h=8, d_m=8, d=4, layers=1, heads=2, max_positions=16)


@pytest.fixture(scope="session")
def small_world():
    """A few dozen conversations over a 400-document corpus; generates in well under a second."""
    cfg = so.WorldConfig(seed=3, num_conversations=40, corpus_size=400, d_h=16, d=8, tokens_max=8)
    return so.generate_world(cfg)


@pytest.fixture(scope="session")
def small_mapper_config(small_world):
    cfg = small_world.config
    return ph.MapperConfig(d_h=cfg.d_h, d_m=16, d=cfg.d, layers=1, heads=2, max_positions=cfg.max_positions)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        lines[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
