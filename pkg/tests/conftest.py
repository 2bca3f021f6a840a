import numpy as np
import pytest

from plumetrack.geometry import DomainSpec, rasterize


def square(cx, cy, side):
    """Axis-aligned square polygon centered at (cx, cy)."""
    s = side / 2.0
    return np.array([[cx - s, cy - s], [cx + s, cy - s], [cx + s, cy + s], [cx - s, cy + s]])


@pytest.fixture
def open_grid():
    """100 x 100 m obstacle-free grid, h = 10."""
    dom = DomainSpec(bbox_min=[0.0, 0.0], bbox_max=[100.0, 100.0])
    return rasterize(dom, 10.0)


@pytest.fixture
def building_grid():
    """100 x 100 m grid with one 20 x 20 m building in the center, h = 10."""
    dom = DomainSpec(bbox_min=[0.0, 0.0], bbox_max=[100.0, 100.0],
                     buildings=[square(50.0, 50.0, 20.0)])
    return rasterize(dom, 10.0)
