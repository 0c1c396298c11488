import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from deformunet.engine import set_dtype


@pytest.fixture(autouse=True)
def float64_engine():
    """Verification mode: every test starts in 64-bit precision."""
    set_dtype(np.float64)
    yield
    set_dtype(np.float64)
