"""
Предобработка ракурсов: центр сцены по позам камер и отбрасывание кадров,
направление которых отклоняется от центра больше допустимого угла.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from errors import DegenerateGeometryError
from formats import read_poses
from geometry import CameraPose, as_vec3

logger = logging.getLogger(__name__)

DEFAULT_MAX_ANGLE_DEG = 20.0
SINGULAR_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ViewSet:
    poses: Sequence[CameraPose]
    image_ids: Sequence[str]

    def __post_init__(self):
        if len(self.poses) != len(self.image_ids):
            raise ValueError(f"Число поз ({len(self.poses)}) != числу image_ids ({len(self.image_ids)})")
        object.__setattr__(self, 'poses', tuple(self.poses))
        object.__setattr__(self, 'image_ids', tuple(str(i) for i in self.image_ids))

    def __len__(self) -> int:
        return len(self.poses)

    @classmethod
    def from_file(cls, path) -> 'ViewSet':
        poses, image_ids = read_poses(path)
        return cls(poses=poses, image_ids=image_ids)


def scene_center(views: ViewSet) -> np.ndarray:
    """
    Точка, минимизирующая сумму квадратов расстояний до лучей взгляда:
    Σ(I − d dᵀ) c = Σ(I − d dᵀ) p.
    """
    if len(views) < 2:
        raise ValueError(f"Для центра сцены нужно минимум 2 позы, получено {len(views)}")

    a = np.zeros((3, 3))
    b = np.zeros(3)
    for pose in views.poses:
        d = pose.view_dir
        projector = np.eye(3) - np.outer(d, d)
        a += projector
        b += projector @ pose.position

    # Лучи параллельны -> наименьшее собственное значение системы равно нулю
    eigenvalues = np.linalg.eigvalsh(a)
    if eigenvalues[0] <= SINGULAR_TOLERANCE * len(views):
        raise DegenerateGeometryError(
            "Все лучи взгляда параллельны, центр сцены не определён"
        )
    center = np.linalg.solve(a, b)
    logger.debug(f"Центр сцены по {len(views)} позам: {center}")
    return center


def view_angles(views: ViewSet, center) -> np.ndarray:
    """Угол (градусы) между направлением камеры и лучом камера -> центр."""
    center = as_vec3(center)
    angles = np.zeros(len(views))
    for i, pose in enumerate(views.poses):
        to_center = center - pose.position
        distance = np.linalg.norm(to_center)
        if distance == 0.0:
            # камера ровно в центре - угол считаем нулевым
            continue
        cosine = np.clip(np.dot(pose.view_dir, to_center / distance), -1.0, 1.0)
        angles[i] = np.degrees(np.arccos(cosine))
    return angles


def filter_views(views: ViewSet, center, max_angle_deg: float = DEFAULT_MAX_ANGLE_DEG) -> List[str]:
    """image_ids ракурсов с углом <= max_angle_deg (граница включается)."""
    if not 0.0 < max_angle_deg < 180.0:
        raise ValueError(f"max_angle_deg должен быть в (0, 180), получено {max_angle_deg}")
    angles = view_angles(views, center)
    kept = [image_id for image_id, angle in zip(views.image_ids, angles) if angle <= max_angle_deg]
    logger.info(f"Фильтр ракурсов: оставлено {len(kept)} из {len(views)} (порог {max_angle_deg}°)")
    return kept
