"""
Синтетические сцены с известной истиной: калибровочная метка-пластина,
процедурная метёлка (ось-сплайн, веточки, зёрна-эллипсоиды) и аналитические
решётки плотности. Все генераторы детерминированы при заданном seed.

Самопересечения веточек и зёрен не проверяются.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from formats import write_grid, write_ply
from geometry import DensityGrid, PointCloud, random_rotation, transform_points, unit

logger = logging.getLogger(__name__)

LABEL_LENGTH_CM = 7.5
LABEL_WIDTH_CM = 3.0
LABEL_THICKNESS_CM = 0.1
ORACLE_PITCH_CM = 0.02
GRAIN_DENSITY_G_CM3 = 0.95
CENTERLINE_SAMPLES = 20000
GRID_CHUNK = 1 << 20


# ==================== ТИПЫ ====================

@dataclass
class SynthPanicleSpec:
    """Параметры процедурной метёлки, все размеры в см."""
    rachis_points: np.ndarray
    n_branches: int = 6
    branch_length_range: Tuple[float, float] = (3.0, 7.0)
    branch_angle_deg: float = 35.0
    station_range: Tuple[float, float] = (0.15, 0.85)
    rachis_radius: float = 0.1
    branch_radius: float = 0.05
    grain_axes: Tuple[float, float, float] = (0.35, 0.15, 0.12)
    grain_spacing: float = 0.6
    density: float = 60.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.rachis_points = np.asarray(self.rachis_points, dtype=np.float64).reshape(-1, 3)
        if len(self.rachis_points) < 2:
            raise ValueError(f"Ось метёлки задаётся минимум 2 точками, получено {len(self.rachis_points)}")
        if self.n_branches < 0:
            raise ValueError(f"Число веточек не может быть отрицательным: {self.n_branches}")
        lo, hi = self.branch_length_range
        if not 0 < lo <= hi:
            raise ValueError(f"Некорректный диапазон длин веточек: {self.branch_length_range}")
        s_lo, s_hi = self.station_range
        if not 0 <= s_lo <= s_hi < 1:
            raise ValueError(f"Некорректный диапазон мест прикрепления: {self.station_range}")
        positive = {'rachis_radius': self.rachis_radius, 'branch_radius': self.branch_radius,
                    'grain_spacing': self.grain_spacing, 'density': self.density}
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} должен быть > 0, получено {value}")
        if min(self.grain_axes) <= 0:
            raise ValueError(f"Полуоси зерна должны быть > 0: {self.grain_axes}")
        if self.noise < 0:
            raise ValueError(f"Шум не может быть отрицательным: {self.noise}")


@dataclass
class GroundTruth:
    rachis_arc_length_cm: float
    occupied_volume_cm3: float
    label_length_cm: float = LABEL_LENGTH_CM
    grain_count: int = 0
    grain_mass_g: float = 0.0

    def __post_init__(self):
        if not (self.rachis_arc_length_cm > 0 and self.occupied_volume_cm3 > 0 and self.label_length_cm > 0):
            raise ValueError("Истинные значения должны быть положительными")

    def to_dict(self) -> dict:
        return {
            'rachis_arc_length_cm': self.rachis_arc_length_cm,
            'occupied_volume_cm3': self.occupied_volume_cm3,
            'label_length_cm': self.label_length_cm,
            'grain_count': self.grain_count,
            'grain_mass_g': self.grain_mass_g,
        }


@dataclass
class _Tube:
    centerline: np.ndarray
    radius: float

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)))


@dataclass
class _Grain:
    center: np.ndarray
    axes: np.ndarray  # строки - направления полуосей
    semi: np.ndarray

    @property
    def volume(self) -> float:
        return float(4.0 / 3.0 * np.pi * np.prod(self.semi))

    def area(self) -> float:
        # приближение Томсена
        p = 1.6075
        a, b, c = self.semi ** p
        return float(4 * np.pi * ((a * b + a * c + b * c) / 3) ** (1 / p))

    def local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.axes.T


@dataclass
class PanicleGeometry:
    """Тела метёлки: трубки (ось и веточки) и зёрна."""
    tubes: List[_Tube] = field(default_factory=list)
    grains: List[_Grain] = field(default_factory=list)

    @property
    def rachis(self) -> _Tube:
        return self.tubes[0]

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lows, highs = [], []
        for tube in self.tubes:
            lows.append(tube.centerline.min(axis=0) - tube.radius)
            highs.append(tube.centerline.max(axis=0) + tube.radius)
        for grain in self.grains:
            reach = float(grain.semi.max())
            lows.append(grain.center - reach)
            highs.append(grain.center + reach)
        return np.min(lows, axis=0), np.max(highs, axis=0)

    def density(self, points: np.ndarray) -> np.ndarray:
        """Знаковое расстояние (плюс внутри) до объединения тел."""
        points = np.asarray(points, dtype=np.float64)
        result = np.full(len(points), -np.inf)
        for tube in self.tubes:
            bound = tube.radius + 1.0
            dist, _ = cKDTree(tube.centerline).query(points, distance_upper_bound=bound)
            result = np.maximum(result, tube.radius - np.minimum(dist, bound))
        for grain in self.grains:
            result = np.maximum(result, _ellipsoid_density(grain, points))
        return result

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.density(points) > 0


def _ellipsoid_density(grain: _Grain, points: np.ndarray) -> np.ndarray:
    """Приближённое знаковое расстояние до эллипсоида, плюс внутри."""
    local = grain.local(points)
    k0 = np.linalg.norm(local / grain.semi, axis=1)
    k1 = np.linalg.norm(local / grain.semi ** 2, axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        sdf = np.where(k1 > 0, k0 * (k0 - 1.0) / k1, -float(grain.semi.min()))
    return -sdf


# ==================== ГЕОМЕТРИЯ МЕТЁЛКИ ====================

def rachis_curve(control_points: np.ndarray, samples: int = CENTERLINE_SAMPLES) -> np.ndarray:
    """Плотная ломаная по натуральному кубическому сплайну через контрольные точки (хордовый параметр)."""
    control_points = np.asarray(control_points, dtype=np.float64)
    step = np.linalg.norm(np.diff(control_points, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(step)])
    if len(control_points) == 2:
        s = np.linspace(0.0, 1.0, samples)[:, None]
        return control_points[0] + s * (control_points[1] - control_points[0])
    spline = CubicSpline(t, control_points, bc_type='natural')
    return spline(np.linspace(0.0, t[-1], samples))


def _arc_positions(centerline: np.ndarray, fractions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Точки и единичные касательные на долях fractions длины ломаной."""
    segments = np.diff(centerline, axis=0)
    lengths = np.linalg.norm(segments, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    target = np.asarray(fractions, dtype=np.float64) * cumulative[-1]
    i = np.clip(np.searchsorted(cumulative, target, side='right') - 1, 0, len(segments) - 1)
    safe = np.where(lengths[i] > 0, lengths[i], 1.0)
    local = (target - cumulative[i]) / safe
    return centerline[i] + local[:, None] * segments[i], segments[i] / safe[:, None]


def _arc_position(centerline: np.ndarray, fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    points, tangents = _arc_positions(centerline, np.array([fraction]))
    return points[0], tangents[0]


def _perpendicular(direction: np.ndarray) -> np.ndarray:
    reference = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return unit(np.cross(direction, reference))


def build_geometry(spec: SynthPanicleSpec) -> PanicleGeometry:
    rng = np.random.default_rng(spec.seed)
    rachis = _Tube(centerline=rachis_curve(spec.rachis_points), radius=spec.rachis_radius)
    geometry = PanicleGeometry(tubes=[rachis])
    total = rachis.length
    angle = np.radians(spec.branch_angle_deg)

    stations = np.sort(rng.uniform(*spec.station_range, size=spec.n_branches))
    for station in stations:
        start, tangent = _arc_position(rachis.centerline, float(station))
        side = _perpendicular(tangent)
        phi = rng.uniform(0.0, 2 * np.pi)
        q = np.cos(phi) * side + np.sin(phi) * np.cross(tangent, side)
        direction = unit(np.cos(angle) * tangent + np.sin(angle) * q)
        # веточка всегда короче оставшейся части оси
        length = min(rng.uniform(*spec.branch_length_range), 0.8 * (1.0 - station) * total)
        if length <= 2 * spec.branch_radius:
            continue
        steps = max(2, int(np.ceil(length / (0.25 * spec.branch_radius))))
        centerline = start + np.linspace(0.0, length, steps)[:, None] * direction
        geometry.tubes.append(_Tube(centerline=centerline, radius=spec.branch_radius))

        semi = np.asarray(spec.grain_axes, dtype=np.float64)
        w = unit(np.cross(direction, q))
        frame = np.vstack([direction, w, np.cross(direction, w)])
        positions = np.arange(0.3 * length, length - semi[0], spec.grain_spacing)
        for j, along in enumerate(positions):
            sign = 1.0 if j % 2 == 0 else -1.0
            center = start + along * direction + sign * w * (spec.branch_radius + 0.9 * semi[1])
            geometry.grains.append(_Grain(center=center, axes=frame, semi=semi))
    return geometry


def _sample_tube(tube: _Tube, density: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = int(round(density * 2 * np.pi * tube.radius * tube.length))
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    centers, tangents = _arc_positions(tube.centerline, rng.random(n))
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    reference = np.where(np.abs(tangents[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    n1 = np.cross(tangents, reference)
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(tangents, n1)
    normals = np.cos(phi)[:, None] * n1 + np.sin(phi)[:, None] * n2
    return centers + tube.radius * normals, normals


def _sample_grain(grain: _Grain, density: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = int(round(density * grain.area()))
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    sphere = rng.standard_normal((n, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    local = sphere * grain.semi
    normals = local / grain.semi ** 2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return grain.center + local @ grain.axes, normals @ grain.axes


def oracle_volume(geometry: PanicleGeometry, pitch: float = ORACLE_PITCH_CM) -> float:
    """Объём объединения тел: число занятых вокселей (центр внутри) × pitch³."""
    occupied = []
    for tube in geometry.tubes:
        reach = int(np.ceil(tube.radius / pitch)) + 1
        grid = np.arange(-reach, reach + 1)
        offsets = np.stack(np.meshgrid(grid, grid, grid, indexing='ij'), axis=-1).reshape(-1, 3)
        offsets = offsets[np.linalg.norm(offsets, axis=1) <= reach + 1]
        n_steps = max(2, int(np.ceil(tube.length / pitch)) + 1)
        stations = np.linspace(0.0, 1.0, n_steps)
        tree = cKDTree(tube.centerline)
        for chunk in np.array_split(stations, max(1, len(stations) // 64)):
            centers, _ = _arc_positions(tube.centerline, chunk)
            base = np.floor(centers / pitch).astype(np.int64)
            cand = np.unique((base[:, None, :] + offsets[None, :, :]).reshape(-1, 3), axis=0)
            dist, _ = tree.query((cand + 0.5) * pitch)
            occupied.append(cand[dist < tube.radius])
    for grain in geometry.grains:
        reach = float(grain.semi.max())
        lo = np.floor((grain.center - reach) / pitch).astype(np.int64)
        hi = np.ceil((grain.center + reach) / pitch).astype(np.int64)
        axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        cand = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)
        local = grain.local((cand + 0.5) * pitch)
        occupied.append(cand[np.sum((local / grain.semi) ** 2, axis=1) < 1.0])
    count = len(np.unique(np.vstack(occupied), axis=0)) if occupied else 0
    return count * pitch ** 3


def gen_panicle(spec: SynthPanicleSpec, oracle_pitch: float = ORACLE_PITCH_CM,
                geometry: Optional[PanicleGeometry] = None) -> Tuple[PointCloud, GroundTruth]:
    """Облако поверхности метёлки (см) и её истинные длина оси и объём."""
    geometry = geometry or build_geometry(spec)
    rng = np.random.default_rng(spec.seed + 1)
    parts = [_sample_tube(t, spec.density, rng) for t in geometry.tubes]
    parts += [_sample_grain(g, spec.density, rng) for g in geometry.grains]
    points = np.vstack([p for p, _ in parts])
    normals = np.vstack([n for _, n in parts])
    if spec.noise > 0:
        points = points + rng.normal(0.0, spec.noise, size=points.shape)

    grain_volume = sum(g.volume for g in geometry.grains)
    truth = GroundTruth(
        rachis_arc_length_cm=geometry.rachis.length,
        occupied_volume_cm3=oracle_volume(geometry, oracle_pitch),
        grain_count=len(geometry.grains),
        grain_mass_g=grain_volume * GRAIN_DENSITY_G_CM3,
    )
    logger.info(f"Синтетическая метёлка seed={spec.seed}: {len(points)} точек, "
                f"{len(geometry.tubes) - 1} веточек, {len(geometry.grains)} зёрен, "
                f"ось {truth.rachis_arc_length_cm:.3f} см")
    return PointCloud(points=points, normals=normals), truth


def random_spec(seed: int) -> SynthPanicleSpec:
    """Случайная правдоподобная метёлка: ось 18–26 см с плавным изгибом."""
    rng = np.random.default_rng(seed)
    length = rng.uniform(18.0, 26.0)
    bend = rng.uniform(0.0, 0.15) * length
    z = np.linspace(0.0, length, 5)
    x = bend * np.sin(np.pi * z / (2 * length)) ** 2
    y = rng.uniform(-0.03, 0.03) * length * np.sin(np.pi * z / length)
    return SynthPanicleSpec(
        rachis_points=np.column_stack([x, y, z]),
        n_branches=int(rng.integers(4, 11)),
        branch_length_range=(0.15 * length, 0.3 * length),
        branch_angle_deg=float(rng.uniform(25.0, 40.0)),
        seed=seed,
    )


# ==================== МЕТКА ====================

def gen_label(length_cm: float = LABEL_LENGTH_CM, width_cm: float = LABEL_WIDTH_CM,
              thickness_cm: float = LABEL_THICKNESS_CM, density: float = 40.0, noise: float = 0.0,
              rotation: Optional[np.ndarray] = None, translation: Optional[np.ndarray] = None,
              seed: int = 0) -> PointCloud:
    """
    Точки на поверхности пластины length × width × thickness (центр в нуле,
    длина вдоль x), затем поза и гауссов шум noise.
    """
    dims = np.array([length_cm, width_cm, thickness_cm], dtype=np.float64)
    if np.any(dims <= 0) or density <= 0:
        raise ValueError(f"Размеры и плотность метки должны быть > 0: {dims}, {density}")
    rng = np.random.default_rng(seed)
    half = dims / 2

    points, normals = [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = dims[u] * dims[v]
        for sign in (-1.0, 1.0):
            n = int(round(density * area))
            face = np.zeros((n, 3))
            face[:, u] = rng.uniform(-half[u], half[u], n)
            face[:, v] = rng.uniform(-half[v], half[v], n)
            face[:, axis] = sign * half[axis]
            normal = np.zeros(3)
            normal[axis] = sign
            points.append(face)
            normals.append(np.tile(normal, (n, 1)))
    points, normals = np.vstack(points), np.vstack(normals)
    if noise > 0:
        points = points + rng.normal(0.0, noise, size=points.shape)
    points = transform_points(points, rotation, translation)
    if rotation is not None:
        normals = normals @ np.asarray(rotation).T
    return PointCloud(points=points, normals=normals)


# ==================== РЕШЁТКИ ПЛОТНОСТИ ====================

def _label_density(points: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(points) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return -(outside + inside)


def _grid_from_function(function, center: np.ndarray, dims: Sequence[int], spacing: float) -> DensityGrid:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"Размер решётки должен быть >= 2 по каждой оси: {dims}")
    origin = np.asarray(center, dtype=np.float64) - (np.asarray(dims) - 1) / 2 * spacing
    axes = [origin[a] + np.arange(dims[a]) * spacing for a in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)
    values = np.concatenate([function(chunk) for chunk in np.array_split(nodes, max(1, len(nodes) // GRID_CHUNK))])
    return DensityGrid(values=values.reshape(dims), origin=origin, spacing=spacing)


def gen_density_grid(shape: str, dims: Sequence[int] = (41, 41, 41), spacing: float = 0.05,
                     radius: Optional[float] = None, half_extents: Optional[Sequence[float]] = None,
                     spec: Optional[SynthPanicleSpec] = None) -> DensityGrid:
    """
    Знаковое расстояние (плюс внутри) на решётке с центром в центре фигуры.
    shape: 'sphere' | 'box' | 'panicle' (по spec, ось метёлки в центре решётки).
    """
    if spacing <= 0:
        raise ValueError(f"Шаг решётки должен быть > 0, получено {spacing}")
    extent = (np.asarray(dims, dtype=np.float64) - 1) * spacing
    if shape == 'sphere':
        r = radius if radius is not None else 0.35 * float(extent.min())
        return _grid_from_function(lambda p: r - np.linalg.norm(p, axis=1), np.zeros(3), dims, spacing)
    if shape == 'box':
        half = np.asarray(half_extents if half_extents is not None else 0.3 * extent, dtype=np.float64)
        return _grid_from_function(lambda p: _label_density(p, half), np.zeros(3), dims, spacing)
    if shape == 'panicle':
        if spec is None:
            raise ValueError("Для решётки метёлки нужен spec")
        geometry = build_geometry(spec)
        lo, hi = geometry.bounds()
        return _grid_from_function(geometry.density, (lo + hi) / 2, dims, spacing)
    raise ValueError(f"Неизвестная фигура решётки: {shape}")


def grid_dims_for(lo: np.ndarray, hi: np.ndarray, spacing: float, margin: int = 3) -> Tuple[int, int, int]:
    """Размер решётки, покрывающей бокс [lo, hi] с запасом margin узлов."""
    return tuple(int(np.ceil((h - l) / spacing)) + 1 + 2 * margin for l, h in zip(lo, hi))


# ==================== СЦЕНА ====================

@dataclass
class SynthScene:
    """Метёлка и метка в единицах сцены: p_scene = scale · R · p_cm + t."""
    panicle: PointCloud
    label: PointCloud
    truth: GroundTruth
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    geometry: PanicleGeometry
    label_center_cm: np.ndarray
    label_rotation: np.ndarray

    @property
    def cloud(self) -> PointCloud:
        return PointCloud.concat([self.panicle, self.label])

    def density(self, points: np.ndarray) -> np.ndarray:
        """Плотность сцены (метёлка ∪ метка) в единицах сцены."""
        local = (np.asarray(points) - self.translation) @ self.rotation / self.scale
        label_local = (local - self.label_center_cm) @ self.label_rotation
        half = np.array([LABEL_LENGTH_CM, LABEL_WIDTH_CM, LABEL_THICKNESS_CM]) / 2
        return self.scale * np.maximum(self.geometry.density(local), _label_density(label_local, half))


def gen_scene(seed: int, spec: Optional[SynthPanicleSpec] = None, scale: Optional[float] = None,
              label_noise_frac: float = 0.002, label_density: float = 40.0,
              oracle_pitch: float = ORACLE_PITCH_CM) -> SynthScene:
    """Метёлка + метка рядом с ней, случайные масштаб и поза всей сцены."""
    spec = spec or random_spec(seed)
    rng = np.random.default_rng(seed + 7919)
    geometry = build_geometry(spec)
    panicle_cm, truth = gen_panicle(spec, oracle_pitch, geometry)

    lo, hi = geometry.bounds()
    label_rotation = random_rotation(rng)
    label_center = np.array([hi[0] + 0.5 * LABEL_LENGTH_CM + 3.0, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2])
    label_cm = gen_label(density=label_density, noise=label_noise_frac * LABEL_LENGTH_CM,
                         rotation=label_rotation, translation=label_center, seed=seed + 1)

    scale = float(scale if scale is not None else np.exp(rng.uniform(np.log(0.02), np.log(0.5))))
    rotation = random_rotation(rng)
    translation = rng.uniform(-10.0, 10.0, size=3)

    def _pose(cloud: PointCloud) -> PointCloud:
        return PointCloud(points=transform_points(cloud.points, rotation, translation, scale),
                          normals=cloud.normals @ rotation.T)

    return SynthScene(panicle=_pose(panicle_cm), label=_pose(label_cm), truth=truth, scale=scale,
                      rotation=rotation, translation=translation, geometry=geometry,
                      label_center_cm=label_center, label_rotation=label_rotation)


def scene_grid(scene: SynthScene, spacing_cm: float = 0.08) -> DensityGrid:
    """Решётка плотности всей сцены в единицах сцены."""
    points = scene.cloud.points
    spacing = spacing_cm * scene.scale
    lo, hi = points.min(axis=0), points.max(axis=0)
    dims = grid_dims_for(lo, hi, spacing)
    return _grid_from_function(scene.density, (lo + hi) / 2, dims, spacing)


def write_scene(scene: SynthScene, out_dir, grid: bool = False, grid_spacing_cm: float = 0.08,
                seed: Optional[int] = None) -> List[Path]:
    """cloud.ply, label.ply, truth.json и при grid=True - grid.json + grid.raw."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_ply(scene.cloud, out_dir / 'cloud.ply'), write_ply(scene.label, out_dir / 'label.ply')]
    truth = scene.truth.to_dict()
    truth.update({'scale_units_per_cm': scene.scale, 'seed': seed,
                  'rotation': scene.rotation.tolist(), 'translation': scene.translation.tolist()})
    truth_path = out_dir / 'truth.json'
    truth_path.write_text(json.dumps(truth, indent=2, ensure_ascii=False), encoding='utf-8')
    written.append(truth_path)
    if grid:
        written.append(write_grid(scene_grid(scene, grid_spacing_cm), out_dir / 'grid.json'))
    logger.info(f"Сцена записана в {out_dir}: {len(scene.cloud)} точек")
    return written
