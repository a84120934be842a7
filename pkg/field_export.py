"""
Экспорт облака точек из решётки плотности: marching cubes + равномерная
выборка точек с поверхности сетки.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np
from skimage import measure
from skimage.filters import threshold_otsu

from geometry import DensityGrid, PointCloud

logger = logging.getLogger(__name__)

# Треугольники с меньшей площадью считаются вырожденными
MIN_TRIANGLE_AREA = 1e-14


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("Индексы треугольников выходят за пределы массива вершин")
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'triangles', triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @classmethod
    def empty(cls) -> 'TriangleMesh':
        return cls(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=np.int64))


def _cleanup(vertices: np.ndarray, triangles: np.ndarray) -> TriangleMesh:
    """Удаляет вырожденные треугольники и неиспользуемые вершины."""
    mesh = TriangleMesh(vertices, triangles)
    if mesh.is_empty:
        return TriangleMesh.empty()
    t = mesh.triangles
    distinct = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    keep = distinct & (mesh.areas() > MIN_TRIANGLE_AREA)
    t = t[keep]
    used, remap = np.unique(t, return_inverse=True)
    return TriangleMesh(vertices=mesh.vertices[used], triangles=remap.reshape(-1, 3))


def marching_cubes(grid: DensityGrid, iso: float) -> TriangleMesh:
    """
    Изоповерхность value = iso, классическая таблица на 256 случаев с линейной
    интерполяцией по рёбрам. Вершины в мировых координатах.
    """
    if not np.isfinite(iso):
        raise ValueError(f"Уровень изоповерхности должен быть конечным: {iso}")
    vmin, vmax = float(grid.values.min()), float(grid.values.max())
    if not vmin < iso < vmax:
        logger.info(f"Все значения решётки по одну сторону от iso={iso:.6g}, сетка пуста")
        return TriangleMesh.empty()

    vertices, faces, _, _ = measure.marching_cubes(
        grid.values, level=iso, spacing=tuple(grid.spacing),
        method='lorensen', allow_degenerate=False,
    )
    mesh = _cleanup(vertices + grid.origin, faces)
    logger.debug(f"marching cubes: {len(mesh.vertices)} вершин, {len(mesh.triangles)} треугольников")
    return mesh


def mesh_edge_stats(mesh: TriangleMesh) -> Dict[str, object]:
    """
    Счётчики использования рёбер и эйлерова характеристика V − E + F.
    Замкнутая сетка: каждое ребро принадлежит ровно двум треугольникам.
    """
    t = mesh.triangles
    edges = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    unique_edges, uses = np.unique(edges, axis=0, return_counts=True)
    v, e, f = len(mesh.vertices), len(unique_edges), len(t)
    return {
        'vertices': v,
        'edges': e,
        'faces': f,
        'euler': v - e + f,
        'watertight': bool(len(uses)) and bool(np.all(uses == 2)),
        'edge_uses': uses,
    }


def sample_mesh(mesh: TriangleMesh, points_per_unit_area: float, seed: int) -> PointCloud:
    """
    Точки на поверхности: общее число = round(плотность · площадь),
    распределение по треугольникам мультиномиальное по площадям,
    положение внутри треугольника - равномерное барицентрическое.
    """
    if points_per_unit_area <= 0:
        raise ValueError(f"Плотность выборки должна быть > 0, получено {points_per_unit_area}")
    if mesh.is_empty:
        return PointCloud.empty()

    areas = mesh.areas()
    total = float(areas.sum())
    n = int(round(points_per_unit_area * total))
    if n == 0 or total <= 0:
        return PointCloud.empty()

    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, areas / total)
    tri = np.repeat(np.arange(len(areas)), counts)

    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    points = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c

    normals = np.cross(b - a, c - a)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points=points, normals=normals)


def otsu_iso(grid: DensityGrid) -> float:
    """Порог Оцу по гистограмме значений решётки."""
    return float(threshold_otsu(grid.values))


def resolve_iso(grid: DensityGrid, iso: Optional[Union[float, str]]) -> float:
    if iso is None or (isinstance(iso, str) and iso.lower() == 'auto'):
        value = otsu_iso(grid)
        logger.info(f"iso=auto -> порог Оцу {value:.6g}")
        return value
    return float(iso)


def export_cloud(grid: DensityGrid, iso: Optional[Union[float, str]], density: float, seed: int) -> PointCloud:
    """marching cubes + выборка с поверхности."""
    mesh = marching_cubes(grid, resolve_iso(grid, iso))
    cloud = sample_mesh(mesh, density, seed)
    logger.info(f"Экспорт облака: {len(mesh.triangles)} треугольников -> {len(cloud)} точек")
    return cloud
