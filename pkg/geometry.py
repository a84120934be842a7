"""
Общие геометрические типы и базовая численная обработка облаков точек:
поиск ближайших соседей, PCA и оценка нормалей.

Все типы неизменяемы после создания (массивы переводятся в read-only),
поэтому их можно безопасно передавать между потоками и процессами.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from errors import DegenerateGeometryError

logger = logging.getLogger(__name__)

# Допуски инвариантов
NORMAL_TOLERANCE = 1e-6
VIEW_DIR_TOLERANCE = 1e-9
AXES_TOLERANCE = 1e-6


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def as_vec3(value) -> np.ndarray:
    """Приводит значение к вектору из трёх конечных float64."""
    vec = np.asarray(value, dtype=np.float64).reshape(-1)
    if vec.shape != (3,):
        raise ValueError(f"Ожидался вектор из 3 компонент, получено {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"Вектор содержит NaN/Inf: {vec}")
    return vec


def unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise DegenerateGeometryError("Нельзя нормировать нулевой вектор")
    return vec / norm


# ==================== ТИПЫ ДАННЫХ ====================

@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    Облако точек в единицах сцены.
    points: (n, 3) float64; normals: (n, 3) единичные или None;
    colors: (n, 3) uint8 или None.
    """
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("Облако точек содержит NaN/Inf")
        object.__setattr__(self, 'points', _frozen(points))

        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                raise ValueError(f"Длина normals ({len(normals)}) != числу точек ({len(points)})")
            if not np.all(np.isfinite(normals)):
                raise ValueError("Нормали содержат NaN/Inf")
            if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > NORMAL_TOLERANCE:
                raise ValueError("Нормали должны быть единичными")
            object.__setattr__(self, 'normals', _frozen(normals))

        if self.colors is not None:
            colors = np.asarray(self.colors).reshape(-1, 3)
            if len(colors) != len(points):
                raise ValueError(f"Длина colors ({len(colors)}) != числу точек ({len(points)})")
            object.__setattr__(self, 'colors', _frozen(colors.astype(np.uint8)))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    @cached_property
    def tree(self) -> cKDTree:
        """k-d дерево по точкам (строится один раз)."""
        if self.is_empty:
            raise ValueError("Нельзя построить k-d дерево для пустого облака")
        return cKDTree(self.points)

    def select(self, index) -> 'PointCloud':
        """Подмножество точек с сохранением нормалей и цветов."""
        index = np.asarray(index)
        return PointCloud(
            points=self.points[index],
            normals=None if self.normals is None else self.normals[index],
            colors=None if self.colors is None else self.colors[index],
        )

    def with_normals(self, normals: np.ndarray) -> 'PointCloud':
        return PointCloud(points=self.points, normals=normals, colors=self.colors)

    def bounding_diagonal(self) -> float:
        if self.is_empty:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    @classmethod
    def empty(cls) -> 'PointCloud':
        return cls(points=np.zeros((0, 3)))

    @classmethod
    def concat(cls, clouds: Sequence['PointCloud']) -> 'PointCloud':
        """Объединение облаков; нормали/цвета сохраняются, только если есть у всех."""
        clouds = [c for c in clouds if not c.is_empty]
        if not clouds:
            return cls.empty()
        normals = None
        colors = None
        if all(c.normals is not None for c in clouds):
            normals = np.vstack([c.normals for c in clouds])
        if all(c.colors is not None for c in clouds):
            colors = np.vstack([c.colors for c in clouds])
        return cls(points=np.vstack([c.points for c in clouds]), normals=normals, colors=colors)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Позиция камеры и единичное направление взгляда."""
    position: np.ndarray
    view_dir: np.ndarray

    def __post_init__(self):
        position = as_vec3(self.position)
        view_dir = as_vec3(self.view_dir)
        if abs(np.linalg.norm(view_dir) - 1.0) > VIEW_DIR_TOLERANCE:
            raise ValueError(f"view_dir должен быть единичным, |d| = {np.linalg.norm(view_dir)}")
        object.__setattr__(self, 'position', _frozen(position))
        object.__setattr__(self, 'view_dir', _frozen(view_dir))

    @classmethod
    def create(cls, position, view_dir) -> 'CameraPose':
        """Создание позы с нормировкой направления."""
        return cls(position=as_vec3(position), view_dir=unit(as_vec3(view_dir)))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """
    Двумерная бинарная маска. bits: bool-массив формы (height, width),
    строки хранятся подряд (row-major).
    """
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"Маска должна быть двумерной и непустой, получено {bits.shape}")
        object.__setattr__(self, 'bits', _frozen(bits))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    @classmethod
    def zeros(cls, height: int, width: int) -> 'BinaryMask':
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """
    Скалярное поле на регулярной решётке. values имеет форму (nx, ny, nz);
    узел (i, j, k) находится в origin + (i, j, k) * spacing.
    """
    values: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError(f"Решётка должна быть трёхмерной с размером >= 2 по каждой оси, получено {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Значения решётки содержат NaN/Inf")
        spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,))
        if np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
            raise ValueError(f"Шаг решётки должен быть положительным: {spacing}")
        object.__setattr__(self, 'values', _frozen(values))
        object.__setattr__(self, 'origin', _frozen(as_vec3(self.origin)))
        object.__setattr__(self, 'spacing', _frozen(spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    def node_positions(self) -> np.ndarray:
        """Мировые координаты всех узлов, форма (nx, ny, nz, 3)."""
        axes = [self.origin[a] + np.arange(n) * self.spacing[a] for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)


@dataclass(frozen=True, eq=False)
class OrientedBoundingBox:
    """
    Ориентированный ограничивающий параллелепипед.
    axes: строки - ортонормированные оси; half_extents отсортированы по убыванию.
    """
    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(axes @ axes.T - np.eye(3))) > AXES_TOLERANCE:
            raise ValueError("Оси OBB должны быть ортонормированными")
        half = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(half < 0) or np.any(np.diff(half) > 0):
            raise ValueError(f"half_extents должны быть неотрицательны и убывать: {half}")
        object.__setattr__(self, 'center', _frozen(as_vec3(self.center)))
        object.__setattr__(self, 'axes', _frozen(axes))
        object.__setattr__(self, 'half_extents', _frozen(half))

    def face_areas(self) -> np.ndarray:
        """Площади граней 4·h1·h2 >= 4·h1·h3 >= 4·h2·h3."""
        h1, h2, h3 = self.half_extents
        return np.array([4 * h1 * h2, 4 * h1 * h3, 4 * h2 * h3])

    def contains(self, points: np.ndarray, slack: float = 1e-6) -> np.ndarray:
        local = (np.asarray(points) - self.center) @ self.axes.T
        return np.all(np.abs(local) <= self.half_extents + slack, axis=1)


# ==================== ПРЕОБРАЗОВАНИЯ ====================

def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Случайная матрица поворота 3x3 (равномерно на SO(3))."""
    return Rotation.random(random_state=rng).as_matrix()


def transform_points(points: np.ndarray, rotation: Optional[np.ndarray] = None,
                     translation: Optional[np.ndarray] = None, scale: float = 1.0) -> np.ndarray:
    """p' = scale * R p + t."""
    result = np.asarray(points, dtype=np.float64) * scale
    if rotation is not None:
        result = result @ np.asarray(rotation).T
    if translation is not None:
        result = result + as_vec3(translation)
    return result


# ==================== СОСЕДИ, PCA, НОРМАЛИ ====================

def knn(cloud: PointCloud, query, k: int) -> np.ndarray:
    """
    Индексы k ближайших к query точек. Поиск точный; при равных расстояниях
    выигрывает меньший индекс.
    """
    if cloud.is_empty:
        raise ValueError("knn: пустое облако")
    if not 1 <= k <= len(cloud):
        raise ValueError(f"knn: k={k} вне диапазона [1, {len(cloud)}]")
    query = as_vec3(query)

    dist, _ = cloud.tree.query(query, k=k)
    kth = float(np.atleast_1d(dist)[-1])
    # Все кандидаты на границе k-го расстояния, затем точная сортировка
    candidates = np.asarray(cloud.tree.query_ball_point(query, r=kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
    d2 = np.sum((cloud.points[candidates] - query) ** 2, axis=1)
    order = np.lexsort((candidates, d2))
    return candidates[order[:k]]


def pca_eigen(cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    """
    Собственные значения ковариации точек λ1 >= λ2 >= λ3 >= 0 и собственные
    векторы (столбцы, в том же порядке).
    """
    if len(cloud) < 3:
        raise ValueError(f"PCA требует минимум 3 точки, получено {len(cloud)}")
    return _covariance_eigen(cloud.points)


def _covariance_eigen(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    values, vectors = np.linalg.eigh(cov)
    values = np.clip(values[::-1], 0.0, None)
    vectors = vectors[:, ::-1]
    return values, vectors


def estimate_normals(cloud: PointCloud, k: int = 16, strict: bool = True) -> PointCloud:
    """
    Нормаль точки = собственный вектор наименьшего собственного значения
    ковариации её k-окрестности; знак выбирается так, чтобы нормаль смотрела
    от центроида окрестности.

    strict=True: вырожденная окрестность (совпадающие или коллинеарные точки)
    вызывает DegenerateGeometryError. strict=False: такие точки получают
    произвольную нормаль, перпендикулярную главному направлению.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError(f"Размер окрестности k должен быть >= 3, получено {k}")
    if n < k:
        raise ValueError(f"В облаке {n} точек, меньше k={k}")

    _, idx = cloud.tree.query(cloud.points, k=k)
    neighborhoods = cloud.points[idx]
    centroids = neighborhoods.mean(axis=1)
    centered = neighborhoods - centroids[:, None, :]
    cov = np.einsum('nki,nkj->nij', centered, centered) / k
    values, vectors = np.linalg.eigh(cov)

    scale = values[:, 2]
    degenerate = (scale <= 0.0) | (values[:, 1] <= 1e-12 * np.maximum(scale, 1e-300))
    if np.any(degenerate):
        bad = np.flatnonzero(degenerate)
        zero_var = scale[bad[0]] <= 0.0
        kind = "нулевая дисперсия" if zero_var else "коллинеарная окрестность"
        if strict:
            raise DegenerateGeometryError(
                f"Вырожденная окрестность точки {int(bad[0])} ({kind}); всего таких точек: {len(bad)}"
            )
        logger.warning(f"estimate_normals: {len(bad)} точек с вырожденной окрестностью, нормали условные")

    normals = vectors[:, :, 0].copy()
    if np.any(degenerate):
        for i in np.flatnonzero(degenerate):
            axis = vectors[i, :, 2] if scale[i] > 0 else np.array([1.0, 0.0, 0.0])
            helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            normals[i] = np.cross(axis, helper)

    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    outward = np.einsum('ni,ni->n', normals, cloud.points - centroids)
    normals[outward < 0] *= -1.0
    return cloud.with_normals(normals)
