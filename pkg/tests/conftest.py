import pytest

import tensor_core as tc


@pytest.fixture(autouse=True)
def float64_default():
    # training state creation switches the global dtype; keep tests independent
    tc.set_default_dtype("float64")
    yield
    tc.set_default_dtype("float64")
