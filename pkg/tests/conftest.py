import gc

import pytest

from hybridlab.tensor import reset_tape, set_chaos


@pytest.fixture(autouse=True)
def _clean_slate():
    """Every test starts and ends with an empty tape and no fault injection."""
    reset_tape()
    set_chaos(None)
    yield
    set_chaos(None)
    reset_tape()
    gc.collect()
