import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fsnet import kernels  # noqa: E402


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run a test once per available pooling backend."""
    prev = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)
