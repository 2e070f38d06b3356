import numpy as np
import pytest

from pthash.build import BuildConfig, build
from pthash.cli import generate_keys


def int_keys(values):
    """Little-endian 8-byte keys, as read by the identity test hasher."""
    return [int(v).to_bytes(8, "little") for v in values]


@pytest.fixture(scope="session")
def keys_1e3():
    return generate_keys(1000, 42)


@pytest.fixture(scope="session")
def keys_1e5():
    return generate_keys(100_000, 7)


@pytest.fixture(scope="session")
def flat_1e5(keys_1e5):
    return build(keys_1e5, BuildConfig())


def is_permutation(values, n):
    return np.array_equal(np.sort(np.asarray(values, dtype=np.uint64)), np.arange(n, dtype=np.uint64))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
