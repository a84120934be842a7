import numpy as np
import pytest

from geometry import PointCloud


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: долгие сквозные прогоны конвейера')


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def plane_cloud(rng):
    """Квадрат 1 × 1 в плоскости z = 0."""
    xy = rng.uniform(0.0, 1.0, size=(400, 2))
    return PointCloud(points=np.column_stack([xy, np.zeros(len(xy))]))


@pytest.fixture
def cylinder_cloud(rng):
    """Боковая поверхность цилиндра r = 0.05, длина 1 вдоль z."""
    n = 2000
    phi = rng.uniform(0.0, 2 * np.pi, n)
    z = rng.uniform(0.0, 1.0, n)
    return PointCloud(points=np.column_stack([0.05 * np.cos(phi), 0.05 * np.sin(phi), z]))
