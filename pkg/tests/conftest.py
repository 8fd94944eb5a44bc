import numpy as np
import pytest

from divehmm.data_model import DepthGrid, TagRecord, default_grid


@pytest.fixture
def grid():
    return default_grid()


@pytest.fixture
def small_grid():
    # five bins with two of them deeper than 800 m
    return DepthGrid((0.0, 200.0, 500.0, 800.0, 1200.0, 1600.0))


def random_record(rng, n, n_bins, tag_id="t", start=0.0, delta=300.0, exposure_index=None):
    """Nearest-neighbour random walk over bins with random celestial labels."""
    bins = [int(rng.integers(1, n_bins + 1))]
    for _ in range(n - 1):
        bins.append(int(np.clip(bins[-1] + rng.integers(-1, 2), 1, n_bins)))
    times = start + delta * np.arange(n)
    return TagRecord(tag_id, times, np.array(bins), rng.integers(0, 3, n), delta, exposure_index)


ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
