import numpy as np
import pytest

from rfclip.fixtures import make_fixture, tiny_checkpoint, tiny_run_config


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def tiny_ckpt():
    return tiny_checkpoint()


@pytest.fixture
def tiny_run():
    return tiny_run_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stochastic(rng, n, batch=()):
    m = rng.random(batch + (n, n)) + 1e-3
    return m / m.sum(axis=-1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
