"""
Обработка облаков: кластеризация DBSCAN с удалением мелких кластеров,
разделение метки и метёлки по нормалям (PCA), ориентированный бокс,
калибровка масштаба по метке и вокселизация.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special
from scipy.spatial import ConvexHull, QhullError
from sklearn.cluster import DBSCAN

from errors import DegenerateGeometryError, EmptyResultError, NoLabelFoundError
from geometry import OrientedBoundingBox, PointCloud, estimate_normals, pca_eigen, transform_points

logger = logging.getLogger(__name__)

NOISE = -1
DEFAULT_MIN_PTS = 10
DEFAULT_EPS_FACTOR = 2.5
DEFAULT_MIN_CLUSTER_FRAC = 0.01
DEFAULT_SIGMA_MAX = 0.02
DEFAULT_KAPPA_MIN = 0.9
DEFAULT_LABEL_LENGTH_CM = 7.5
RANK_TOLERANCE = 1e-12


@dataclass
class Clustering:
    """labels: −1 - шум, иначе номер кластера (подряд с 0)."""
    labels: np.ndarray
    cluster_sizes: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> 'Clustering':
        labels = np.asarray(labels, dtype=np.int64)
        ids, counts = np.unique(labels[labels >= 0], return_counts=True)
        return cls(labels=labels, cluster_sizes={int(i): int(c) for i, c in zip(ids, counts)})

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_noise(self) -> int:
        return int(np.count_nonzero(self.labels == NOISE))


@dataclass
class ClusterStats:
    index: int
    size: int
    sigma: float
    kappa: float

    def passes_label_gate(self, sigma_max: float, kappa_min: float) -> bool:
        return self.sigma < sigma_max and self.kappa > kappa_min


@dataclass
class SemanticClouds:
    panicle: PointCloud
    label: PointCloud
    panicle_index: int = 0
    label_index: int = 0
    residue: List[PointCloud] = field(default_factory=list)
    stats: List[ClusterStats] = field(default_factory=list)
    low_confidence: bool = False


@dataclass
class Calibration:
    """x1 - длина метки в единицах сцены."""
    x1: float
    real_length_cm: float = DEFAULT_LABEL_LENGTH_CM
    raw_x1: Optional[float] = None
    half_extents: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if not self.x1 > 0:
            raise ValueError(f"Длина метки x1 должна быть > 0, получено {self.x1}")

    @property
    def scale_cm_per_unit(self) -> float:
        return self.real_length_cm / self.x1

    @property
    def normalize_factor(self) -> float:
        return 1.0 / self.x1

    def to_dict(self) -> dict:
        return {
            'x1': self.x1,
            'real_length_cm': self.real_length_cm,
            'scale_cm_per_unit': self.scale_cm_per_unit,
            'normalize_factor': self.normalize_factor,
            'raw_x1': self.raw_x1,
            'half_extents': list(self.half_extents) if self.half_extents is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Calibration':
        half = data.get('half_extents')
        return cls(x1=float(data['x1']),
                   real_length_cm=float(data.get('real_length_cm', DEFAULT_LABEL_LENGTH_CM)),
                   raw_x1=data.get('raw_x1'),
                   half_extents=tuple(half) if half is not None else None)


# ==================== DBSCAN ====================

def auto_eps(cloud: PointCloud, factor: float = DEFAULT_EPS_FACTOR) -> float:
    """eps = factor × медиана расстояния до ближайшего соседа."""
    if len(cloud) < 2:
        raise ValueError("Для оценки eps нужно минимум 2 точки")
    dist, _ = cloud.tree.query(cloud.points, k=2)
    eps = factor * float(np.median(dist[:, 1]))
    if eps <= 0:
        raise DegenerateGeometryError("Медиана расстояний до соседей равна нулю (дубликаты точек)")
    return eps


def dbscan(cloud: PointCloud, eps: float, min_pts: int) -> Clustering:
    """
    Точный DBSCAN (sklearn). Точка - ядро, если в радиусе eps (включая её саму)
    не меньше min_pts точек. Кластеры растут от ядер в порядке индексов, граничная
    точка достаётся первому кластеру, который её обнаружил.
    """
    if eps <= 0:
        raise ValueError(f"eps должен быть > 0, получено {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts должен быть >= 1, получено {min_pts}")
    if len(cloud) == 0:
        return Clustering.from_labels(np.zeros(0, dtype=np.int64))

    labels = DBSCAN(eps=eps, min_samples=min_pts, algorithm='kd_tree').fit(cloud.points).labels_
    clustering = Clustering.from_labels(labels)
    logger.info(f"DBSCAN(eps={eps:.4g}, min_pts={min_pts}): {clustering.n_clusters} кластеров, "
                f"{clustering.n_noise} точек шума")
    return clustering


def remove_small_clusters(clustering: Clustering, cloud: PointCloud,
                          min_size: int) -> Tuple[PointCloud, Clustering]:
    """Удаляет шум и кластеры размером < min_size; номера уплотняются."""
    kept_ids = sorted(i for i, size in clustering.cluster_sizes.items() if size >= min_size)
    if not kept_ids:
        raise EmptyResultError(
            f"Все кластеры меньше {min_size} точек - сцена непригодна для обработки"
        )
    remap = np.full(max(clustering.cluster_sizes) + 1, NOISE, dtype=np.int64)
    remap[kept_ids] = np.arange(len(kept_ids))

    mask = clustering.labels >= 0
    mask[mask] = remap[clustering.labels[mask]] >= 0
    labels = remap[clustering.labels[mask]]
    dropped = len(clustering.cluster_sizes) - len(kept_ids)
    if dropped:
        logger.info(f"Удалено {dropped} мелких кластеров (< {min_size} точек)")
    return cloud.select(np.flatnonzero(mask)), Clustering.from_labels(labels)


def extract_clusters(cloud: PointCloud, clustering: Clustering) -> List[PointCloud]:
    """Облака кластеров в порядке номеров."""
    return [cloud.select(np.flatnonzero(clustering.labels == i)) for i in sorted(clustering.cluster_sizes)]


# ==================== КЛАССИФИКАЦИЯ КЛАСТЕРОВ ====================

def cluster_features(cloud: PointCloud, normal_k: int = 16) -> Tuple[float, float]:
    """
    (σ, κ): σ = λ3 / (λ1 + λ2 + λ3), κ = среднее |n · n̄|, где n̄ - преобладающее
    направление нормалей.
    """
    if len(cloud) < 3:
        return float('inf'), 0.0
    values, _ = pca_eigen(cloud)
    total = float(values.sum())
    sigma = float(values[2] / total) if total > 0 else float('inf')

    k = min(normal_k, len(cloud))
    normals = estimate_normals(cloud, k=k, strict=False).normals
    # преобладающее направление - главный собственный вектор Σ n nᵀ (знак не важен)
    _, vectors = np.linalg.eigh(normals.T @ normals)
    dominant = vectors[:, -1]
    kappa = float(np.mean(np.abs(normals @ dominant)))
    return sigma, kappa


def classify_clusters(clouds: Sequence[PointCloud], sigma_max: float = DEFAULT_SIGMA_MAX,
                      kappa_min: float = DEFAULT_KAPPA_MIN, normal_k: int = 16) -> SemanticClouds:
    """
    Метка - кластер с наименьшим σ среди прошедших проверку σ < sigma_max и
    κ > kappa_min; метёлка - самый крупный из оставшихся; прочие - остаток.
    """
    if len(clouds) < 2:
        raise ValueError(f"Для разделения метки и метёлки нужно минимум 2 кластера, получено {len(clouds)}")

    stats = []
    for i, cloud in enumerate(clouds):
        sigma, kappa = cluster_features(cloud, normal_k=normal_k)
        stats.append(ClusterStats(index=i, size=len(cloud), sigma=sigma, kappa=kappa))
        logger.debug(f"Кластер {i}: {len(cloud)} точек, σ={sigma:.4g}, κ={kappa:.3f}")

    candidates = [s for s in stats if s.passes_label_gate(sigma_max, kappa_min)]
    if not candidates:
        raise NoLabelFoundError(
            f"Ни один кластер не прошёл проверку метки (σ < {sigma_max}, κ > {kappa_min}); калибровка невозможна"
        )
    label_stats = min(candidates, key=lambda s: (s.sigma, s.index))
    rest = [s for s in stats if s.index != label_stats.index]
    panicle_stats = max(rest, key=lambda s: (s.size, -s.index))

    low_confidence = panicle_stats.passes_label_gate(sigma_max, kappa_min)
    if low_confidence:
        logger.warning(f"Кластер метёлки {panicle_stats.index} тоже выглядит плоским - низкая уверенность")

    residue = [clouds[s.index] for s in rest if s.index != panicle_stats.index]
    return SemanticClouds(panicle=clouds[panicle_stats.index], label=clouds[label_stats.index],
                          panicle_index=panicle_stats.index, label_index=label_stats.index,
                          residue=residue, stats=stats, low_confidence=low_confidence)


# ==================== OBB И КАЛИБРОВКА ====================

def compute_obb(cloud: PointCloud) -> OrientedBoundingBox:
    """Бокс по осям PCA; полуразмеры по проекциям, отсортированы по убыванию."""
    if len(cloud) < 3:
        raise ValueError(f"Для OBB нужно минимум 3 точки, получено {len(cloud)}")
    values, vectors = pca_eigen(cloud)
    if values[1] <= RANK_TOLERANCE * max(values[0], 1e-300):
        raise DegenerateGeometryError("Точки коллинеарны, ориентированный бокс не определён")

    axes = vectors.T.copy()
    axes[2] = np.cross(axes[0], axes[1])
    mean = cloud.points.mean(axis=0)
    local = (cloud.points - mean) @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    half = (hi - lo) / 2
    center = mean + ((hi + lo) / 2) @ axes

    order = np.argsort(-half, kind='stable')
    return OrientedBoundingBox(center=center, axes=axes[order], half_extents=half[order])


def min_area_rectangle(points2d: np.ndarray) -> Tuple[float, float, np.ndarray]:
    """
    Прямоугольник минимальной площади (вращающиеся калиперы по выпуклой
    оболочке). Возвращает (длинная сторона, короткая сторона, единичное
    направление длинной стороны).
    """
    points2d = np.asarray(points2d, dtype=np.float64)
    try:
        hull = points2d[ConvexHull(points2d).vertices]
    except (QhullError, ValueError):
        # вырожденная (отрезочная) проекция
        centered = points2d - points2d.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        direction = vt[0]
        s = centered @ direction
        return float(s.max() - s.min()), 0.0, direction

    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.linalg.norm(edges, axis=1)
    edges = edges[lengths > 0] / lengths[lengths > 0, None]
    normals = np.column_stack([-edges[:, 1], edges[:, 0]])

    along = hull @ edges.T
    across = hull @ normals.T
    extent_u = along.max(axis=0) - along.min(axis=0)
    extent_v = across.max(axis=0) - across.min(axis=0)
    best = int(np.argmin(extent_u * extent_v))

    if extent_u[best] >= extent_v[best]:
        return float(extent_u[best]), float(extent_v[best]), edges[best]
    return float(extent_v[best]), float(extent_u[best]), normals[best]


def _box_profile_nll(theta: np.ndarray, s: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Отрицательное лог-правдоподобие размытого нормальным шумом отрезка [a, b]
    со всплесками на концах (торцы метки) и его градиент.
    theta = (a, b, log σ, logit e).
    """
    a, b, log_sigma, t = theta
    sigma = np.exp(log_sigma)
    e = special.expit(t)
    w = b - a
    za, zb = (s - a) / sigma, (s - b) / sigma
    pa, pb = np.exp(-0.5 * za ** 2) / np.sqrt(2 * np.pi), np.exp(-0.5 * zb ** 2) / np.sqrt(2 * np.pi)
    u = special.ndtr(za) - special.ndtr(zb)
    spike = (pa + pb) / (2 * sigma)
    density = np.maximum((1 - e) * u / w + e * spike, 1e-300)

    d_a = (1 - e) * (-pa / (sigma * w) + u / w ** 2) + e * pa * za / (2 * sigma ** 2)
    d_b = (1 - e) * (pb / (sigma * w) - u / w ** 2) + e * pb * zb / (2 * sigma ** 2)
    d_sigma = ((1 - e) * (-pa * za + pb * zb) / (sigma * w)
               + e * (pa * (za ** 2 - 1) + pb * (zb ** 2 - 1)) / (2 * sigma ** 2))
    d_t = e * (1 - e) * (spike - u / w)

    nll = -float(np.sum(np.log(density)))
    grad = -np.array([
        np.sum(d_a / density),
        np.sum(d_b / density),
        np.sum(sigma * d_sigma / density),
        np.sum(d_t / density),
    ])
    return nll, grad


def refine_extent(s: np.ndarray) -> float:
    """
    Длина по одномерной проекции с учётом шума поверхности: максимум
    правдоподобия модели «размытый отрезок + торцы». Без шума совпадает с
    размахом проекции.
    """
    lo, hi = float(s.min()), float(s.max())
    span = hi - lo
    if span <= 0:
        return 0.0
    normalized = (s - lo) / span
    x0 = np.array([0.0, 1.0, np.log(0.005), special.logit(0.02)])
    bounds = [(-0.2, 0.45), (0.55, 1.2), (np.log(1e-7), np.log(0.1)), (-12.0, 0.0)]
    result = optimize.minimize(_box_profile_nll, x0, args=(normalized,), jac=True, method='L-BFGS-B',
                               bounds=bounds, options={'ftol': 1e-15, 'gtol': 1e-12, 'maxiter': 1000})
    a, b = result.x[0], result.x[1]
    return float((b - a) * span)


def calibrate(label_cloud: PointCloud, real_length_cm: float = DEFAULT_LABEL_LENGTH_CM,
              refine_edges: bool = True) -> Calibration:
    """
    Калибровка по метке: OBB -> проекция на грань медианной площади (оси 1 и 3)
    -> прямоугольник минимальной площади -> x1 = длинная сторона.
    Ось 1 предварительно выравнивается прямоугольником минимальной площади в
    плоскости наибольшей грани (оси 1 и 2).
    refine_edges уточняет длину вдоль найденной оси с учётом шума.
    """
    if real_length_cm <= 0:
        raise ValueError(f"Реальная длина метки должна быть > 0, получено {real_length_cm}")
    obb = compute_obb(label_cloud)
    centered = label_cloud.points - obb.center
    face = obb.axes[:2]
    _, _, in_face = min_area_rectangle(centered @ face.T)
    long_axis = in_face @ face
    plane = np.vstack([long_axis / np.linalg.norm(long_axis), obb.axes[2]])
    projected = centered @ plane.T

    raw_x1, _, direction = min_area_rectangle(projected)
    x1 = refine_extent(projected @ direction) if refine_edges else raw_x1
    if x1 < 1e-9:
        raise DegenerateGeometryError(f"Длина метки в сцене вырождена: x1={x1:.3g}")

    calib = Calibration(x1=x1, real_length_cm=real_length_cm, raw_x1=raw_x1,
                        half_extents=tuple(float(h) for h in obb.half_extents))
    logger.info(f"Калибровка: x1={x1:.6g} (прямоугольник {raw_x1:.6g}), "
                f"масштаб {calib.scale_cm_per_unit:.6g} см/ед.")
    return calib


# ==================== ПРЕОБРАЗОВАНИЯ ====================

def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Центроид точек каждого занятого вокселя с ребром leaf."""
    if leaf <= 0:
        raise ValueError(f"Размер вокселя должен быть > 0, получено {leaf}")
    if cloud.is_empty:
        return cloud
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(points=sums / counts[:, None])


def transform_cloud(cloud: PointCloud, rotation: Optional[np.ndarray] = None,
                    translation: Optional[np.ndarray] = None, scale: float = 1.0) -> PointCloud:
    """Жёсткое движение с масштабом; нормали поворачиваются вместе с точками."""
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals if rotation is None else cloud.normals @ np.asarray(rotation).T
    return PointCloud(points=transform_points(cloud.points, rotation, translation, scale),
                      normals=normals, colors=cloud.colors)


# ==================== СЦЕНА ЦЕЛИКОМ ====================

@dataclass
class SceneSplit:
    semantic: SemanticClouds
    clustering: Clustering
    eps: float
    min_size: int

    def report(self) -> dict:
        return {
            'eps': self.eps,
            'min_cluster_size': self.min_size,
            'n_clusters': self.clustering.n_clusters,
            'cluster_sizes': {str(k): v for k, v in self.clustering.cluster_sizes.items()},
            'panicle_index': self.semantic.panicle_index,
            'label_index': self.semantic.label_index,
            'panicle_points': len(self.semantic.panicle),
            'label_points': len(self.semantic.label),
            'residue_clusters': len(self.semantic.residue),
            'low_confidence': self.semantic.low_confidence,
            'clusters': [vars(s) for s in self.semantic.stats],
        }


def split_scene(cloud: PointCloud, eps: Optional[float] = None, min_pts: int = DEFAULT_MIN_PTS,
                min_cluster_frac: float = DEFAULT_MIN_CLUSTER_FRAC,
                sigma_max: float = DEFAULT_SIGMA_MAX, kappa_min: float = DEFAULT_KAPPA_MIN) -> SceneSplit:
    """DBSCAN -> удаление мелких кластеров -> разделение на метку и метёлку."""
    eps = auto_eps(cloud) if eps is None else eps
    clustering = dbscan(cloud, eps, min_pts)
    min_size = max(1, int(np.ceil(min_cluster_frac * len(cloud))))
    filtered, clustering = remove_small_clusters(clustering, cloud, min_size)
    semantic = classify_clusters(extract_clusters(filtered, clustering),
                                 sigma_max=sigma_max, kappa_min=kappa_min)
    return SceneSplit(semantic=semantic, clustering=clustering, eps=eps, min_size=min_size)
