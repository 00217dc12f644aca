import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from mfstab.potential import PotentialSpec  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def spec15():
    return PotentialSpec.build(1.5)


@pytest.fixture(scope="session")
def spec10():
    return PotentialSpec.build(1.0)


@pytest.fixture(scope="session")
def spec05():
    return PotentialSpec.build(0.5)


@pytest.fixture(scope="session")
def free_spec():
    return PotentialSpec.build(1.5, amplitude=0.0)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
