import numpy as np
import pytest
from hypothesis import settings

from sawmotion.motion import MotionSequence, yaws_to_quats

# property tests are seeded: the same examples run on every invocation
settings.register_profile("seeded", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("seeded")


def random_sequence(rng, T=12, S=3, dt=0.02):
    return MotionSequence(rng.normal(size=(T, 3)), yaws_to_quats(rng.uniform(-3, 3, T)),
                          rng.normal(size=(T, S)), rng.normal(size=(T, S)), dt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one result line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
