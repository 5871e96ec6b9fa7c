import numpy as np
import pytest
import torch

from nacn2n import ImageGrid


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps small-tensor runs fast and timing stable on shared CPU runners.
    torch.set_num_threads(1)


@pytest.fixture
def grid22():
    return ImageGrid(
        np.array([[0.1, 0.2], [0.3, 0.4]], dtype=np.float32), (0.0, 1.0), "grid22"
    )


def make_grid(values, id="img", value_range=(0.0, 1.0), group=None):
    return ImageGrid(np.asarray(values, dtype=np.float32), value_range, id, group)
