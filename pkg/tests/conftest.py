import warnings

import pytest


@pytest.fixture(autouse=True)
def _quiet_grid_warnings():
    # coarse oracle grids legitimately fold noticeable tail mass
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="state grid misses")
        yield
