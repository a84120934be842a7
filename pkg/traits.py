"""
Признаки метёлки: скелет сжатием Лапласа (LBC), главный путь с
многомасштабным ограничением угла, длина по сглаживающему сплайну и объём
по вокселям.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline, make_smoothing_spline
from scipy.sparse import csgraph
from scipy.sparse.linalg import factorized
from scipy.spatial import cKDTree

from cloud_ops import Calibration, voxel_downsample
from errors import ConnectivityError, EmptyResultError
from geometry import PointCloud

logger = logging.getLogger(__name__)

DEFAULT_NODE_SPACING_FRAC = 0.02
DEFAULT_DOWNSAMPLE_FRAC = 0.005
DEFAULT_THETA_MAX_DEG = 60.0
DEFAULT_TANGENT_SCALES = (1, 3)
DEFAULT_SMOOTHING = 1e-3
SAMPLES_PER_SEGMENT = 100
DEFAULT_VOXEL = 0.01
# Верхняя граница весов относительно начальных
MAX_WEIGHT_GROWTH = 1e4


# ==================== ТИПЫ ====================

@dataclass(frozen=True)
class LBCParams:
    k_neighbors: int = 16
    w_l_init: float = 1.0
    w_h_init: float = 1.0
    s_l: float = 3.0
    max_iters: int = 20
    converge_ratio: float = 0.01

    def __post_init__(self):
        if self.k_neighbors < 2:
            raise ValueError(f"k_neighbors должен быть >= 2, получено {self.k_neighbors}")
        if self.w_l_init <= 0 or self.w_h_init <= 0:
            raise ValueError("Начальные веса LBC должны быть > 0")
        if self.s_l < 1:
            raise ValueError(f"s_l должен быть >= 1, получено {self.s_l}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters должен быть >= 1, получено {self.max_iters}")
        if not 0 < self.converge_ratio < 1:
            raise ValueError(f"converge_ratio должен быть в (0, 1), получено {self.converge_ratio}")


@dataclass
class SkeletonGraph:
    """Дерево узлов скелета; edges - пары (i, j), i < j."""
    nodes: np.ndarray
    edges: List[Tuple[int, int]]
    node_weights: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 3)
        self.node_weights = np.asarray(self.node_weights, dtype=np.int64)
        m = len(self.nodes)
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"Петля в графе скелета на узле {i}")
            if not (0 <= i < m and 0 <= j < m):
                raise ValueError(f"Ребро ({i}, {j}) ссылается на несуществующий узел")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_length(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.nodes[i] - self.nodes[j]))

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_weighted_edges_from((i, j, self.edge_length(i, j)) for i, j in self.edges)
        return graph

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def leaves(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.degrees() == 1)]


@dataclass
class MainPath:
    node_indices: List[int]
    arc_length_scene: float
    low_confidence: bool = False
    max_turn_deg: float = 0.0

    def __post_init__(self):
        if len(set(self.node_indices)) != len(self.node_indices):
            raise ValueError("Главный путь содержит повторяющиеся узлы")
        if not self.arc_length_scene > 0:
            raise ValueError(f"Длина главного пути должна быть > 0, получено {self.arc_length_scene}")


@dataclass
class VolumeResult:
    num_voxels: int
    volume_cm3: float
    voxel: float = DEFAULT_VOXEL

    def __post_init__(self):
        if self.num_voxels < 1:
            raise ValueError(f"Число вокселей должно быть >= 1, получено {self.num_voxels}")


@dataclass
class LengthResult:
    L1: float
    L_cm: float
    x1: float
    path: MainPath
    skeleton: SkeletonGraph
    warnings: List[str] = field(default_factory=list)

    @property
    def low_confidence(self) -> bool:
        return self.path.low_confidence


# ==================== СЖАТИЕ ЛАПЛАСА ====================

def _knn_weights(points: np.ndarray, k: int) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """
    Симметричная матрица гауссовых весов k-NN графа и средняя дистанция до
    соседей у каждой точки (размер одного кольца).
    """
    n = len(points)
    dist, idx = cKDTree(points).query(points, k=k + 1)
    dist, idx = dist[:, 1:], idx[:, 1:]
    ring = dist.mean(axis=1)

    h = float(dist.mean())
    weights = np.exp(-(dist / h) ** 2) if h > 0 else np.ones_like(dist)
    rows = np.repeat(np.arange(n), k)
    w = sparse.csr_matrix((weights.ravel(), (rows, idx.ravel())), shape=(n, n))
    return w.maximum(w.T).tocsr(), ring


def _laplacian(w: sparse.csr_matrix) -> sparse.csr_matrix:
    """L = I − D⁻¹W: строка L·P - смещение точки от взвешенного среднего соседей."""
    degree = np.asarray(w.sum(axis=1)).ravel()
    degree[degree == 0] = 1.0
    return (sparse.identity(w.shape[0], format='csr') - sparse.diags(1.0 / degree) @ w).tocsr()


def knn_components(cloud: PointCloud, k: int) -> Tuple[int, np.ndarray]:
    """Число компонент связности k-NN графа и метки компонент."""
    w, _ = _knn_weights(cloud.points, min(k, len(cloud) - 1))
    return csgraph.connected_components(w, directed=False)


def largest_component(cloud: PointCloud, k: int = 16) -> Tuple[PointCloud, int]:
    """Оставляет крупнейшую компоненту k-NN графа; возвращает (облако, число отброшенных точек)."""
    n_components, labels = knn_components(cloud, k)
    if n_components == 1:
        return cloud, 0
    counts = np.bincount(labels)
    keep = np.flatnonzero(labels == int(np.argmax(counts)))
    return cloud.select(keep), len(cloud) - len(keep)


def lbc_contract(cloud: PointCloud, params: Optional[LBCParams] = None) -> PointCloud:
    """
    Итеративное сжатие: решаем [W_L·L; W_H]·P′ = [0; W_H·P] в смысле МНК.
    После каждой итерации W_L ← s_l·W_L, W_H,i ← w_h_init·S_i⁰/S_i.
    Точки не выходят за исходный бокс по осям.
    """
    params = params or LBCParams()
    n = len(cloud)
    if n < params.k_neighbors + 1:
        raise ValueError(f"Для LBC нужно минимум {params.k_neighbors + 1} точек, получено {n}")

    points = cloud.points.copy()
    lower, upper = points.min(axis=0), points.max(axis=0)

    w, ring0 = _knn_weights(points, params.k_neighbors)
    n_components, _ = csgraph.connected_components(w, directed=False)
    if n_components > 1:
        raise ConnectivityError(n_components)

    ring_floor = 1e-12 * max(float(np.linalg.norm(upper - lower)), 1e-300)
    ring0 = np.maximum(ring0, ring_floor)
    ring = ring0
    w_l = params.w_l_init
    w_h = np.full(n, params.w_h_init)
    volume = float(np.sum(ring ** 3))

    for iteration in range(1, params.max_iters + 1):
        lap = _laplacian(w)
        a = sparse.vstack([w_l * lap, sparse.diags(w_h)]).tocsc()
        solve = factorized((a.T @ a).tocsc())
        rhs = (w_h ** 2)[:, None] * points
        points = np.column_stack([solve(rhs[:, d]) for d in range(3)])
        points = np.clip(points, lower, upper)

        w, ring = _knn_weights(points, params.k_neighbors)
        ring = np.maximum(ring, ring_floor)
        new_volume = float(np.sum(ring ** 3))
        change = abs(1.0 - new_volume / volume) if volume > 0 else 0.0
        logger.debug(f"LBC итерация {iteration}: W_L={w_l:.3g}, объём {new_volume:.4g}, изменение {change:.4f}")
        if change < params.converge_ratio:
            break
        volume = new_volume

        w_l = min(w_l * params.s_l, params.w_l_init * MAX_WEIGHT_GROWTH)
        w_h = np.clip(params.w_h_init * ring0 / ring, params.w_h_init / MAX_WEIGHT_GROWTH,
                      params.w_h_init * MAX_WEIGHT_GROWTH)

    logger.info(f"LBC: {n} точек сжато за {iteration} итераций")
    return PointCloud(points=points)


# ==================== ГРАФ СКЕЛЕТА ====================

def farthest_point_nodes(points: np.ndarray, spacing: float) -> np.ndarray:
    """Индексы узлов: жадный выбор самой удалённой точки, пока покрытие хуже spacing."""
    selected = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    while True:
        far = int(np.argmax(dist))
        if dist[far] < spacing:
            break
        selected.append(far)
        dist = np.minimum(dist, np.linalg.norm(points - points[far], axis=1))
    return np.asarray(selected, dtype=np.int64)


def build_skeleton(contracted: PointCloud, spacing: Optional[float] = None, k_neighbors: int = 8) -> SkeletonGraph:
    """
    Узлы - выборка самых удалённых точек с шагом spacing (по умолчанию 2%
    диагонали бокса), рёбра между узлами, чьи точки соседствуют в k-NN графе,
    затем минимальное остовное дерево по евклидовой длине.
    """
    if contracted.is_empty:
        raise EmptyResultError("Пустое облако: скелет построить нельзя")
    points = contracted.points
    if spacing is None:
        spacing = DEFAULT_NODE_SPACING_FRAC * contracted.bounding_diagonal()
    if spacing <= 0:
        return SkeletonGraph(nodes=points[:1], edges=[], node_weights=[len(points)])

    node_index = farthest_point_nodes(points, spacing)
    nodes = points[node_index]
    m = len(nodes)
    _, owner = cKDTree(nodes).query(points)
    weights = np.bincount(owner, minlength=m)
    if m == 1:
        return SkeletonGraph(nodes=nodes, edges=[], node_weights=weights)

    k = min(k_neighbors, len(points) - 1)
    _, idx = cKDTree(points).query(points, k=k + 1)
    pairs = np.sort(np.column_stack([np.repeat(owner, k), owner[idx[:, 1:]].ravel()]), axis=1)
    pairs = np.unique(pairs[pairs[:, 0] != pairs[:, 1]], axis=0)
    adjacent = {(int(i), int(j)) for i, j in pairs}

    # Несмежные пары получают штраф: дерево связывает компоненты минимумом таких рёбер
    dist = np.linalg.norm(nodes[:, None, :] - nodes[None, :, :], axis=2)
    penalty = 10.0 * float(dist.max())
    graph = nx.Graph()
    graph.add_nodes_from(range(m))
    for i in range(m):
        for j in range(i + 1, m):
            cost = dist[i, j] if (i, j) in adjacent else dist[i, j] + penalty
            graph.add_edge(i, j, weight=cost)
    tree = nx.minimum_spanning_tree(graph, weight='weight', algorithm='kruskal')

    bridges = sum(1 for i, j in tree.edges() if (min(i, j), max(i, j)) not in adjacent)
    if bridges:
        logger.warning(f"Скелет: {bridges} рёбер добавлено для связности несмежных частей")
    edges = sorted((min(i, j), max(i, j)) for i, j in tree.edges())
    logger.info(f"Скелет: {m} узлов, {len(edges)} рёбер, шаг {spacing:.4g}")
    return SkeletonGraph(nodes=nodes, edges=edges, node_weights=weights)


# ==================== ГЛАВНЫЙ ПУТЬ ====================

def turning_angles(points: np.ndarray, scale: int) -> np.ndarray:
    """Угол поворота (градусы) во внутренних узлах: касательные по узлам через scale шагов."""
    n = len(points)
    angles = np.zeros(max(n - 2, 0))
    for pos in range(1, n - 1):
        before = points[pos] - points[max(pos - scale, 0)]
        after = points[min(pos + scale, n - 1)] - points[pos]
        nb, na = np.linalg.norm(before), np.linalg.norm(after)
        if nb == 0 or na == 0:
            continue
        cosine = np.clip(np.dot(before, after) / (nb * na), -1.0, 1.0)
        angles[pos - 1] = np.degrees(np.arccos(cosine))
    return angles


def _polyline_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def main_path(skel: SkeletonGraph, theta_max_deg: float = DEFAULT_THETA_MAX_DEG,
              tangent_scales: Sequence[int] = DEFAULT_TANGENT_SCALES) -> MainPath:
    """
    Самый длинный путь лист–лист, у которого во всех внутренних узлах угол
    поворота на каждом масштабе касательной не превышает theta_max_deg.
    Если таких нет - самый длинный путь лист–лист с флагом низкой уверенности.
    """
    if skel.n_nodes < 2:
        raise ValueError(f"Главный путь требует минимум 2 узла, получено {skel.n_nodes}")
    graph = skel.to_networkx()
    if not nx.is_tree(graph):
        raise ValueError("Граф скелета должен быть деревом")
    leaves = skel.leaves()
    if len(leaves) < 2:
        raise ValueError(f"У скелета меньше двух листьев ({len(leaves)})")

    best: Optional[Tuple[float, List[int], float]] = None
    fallback: Optional[Tuple[float, List[int], float]] = None
    for a_pos, a in enumerate(leaves):
        paths = nx.single_source_shortest_path(graph, a)
        for b in leaves[a_pos + 1:]:
            path = paths[b]
            pts = skel.nodes[path]
            length = _polyline_length(pts)
            turn = max((float(turning_angles(pts, s).max(initial=0.0)) for s in tangent_scales), default=0.0)
            if fallback is None or length > fallback[0]:
                fallback = (length, path, turn)
            if turn <= theta_max_deg and (best is None or length > best[0]):
                best = (length, path, turn)

    low_confidence = best is None
    length, path, turn = fallback if low_confidence else best
    if low_confidence:
        logger.warning(f"Ни один путь не прошёл ограничение угла {theta_max_deg}°, "
                       f"взят самый длинный (поворот {turn:.1f}°)")
    return MainPath(node_indices=[int(i) for i in path], arc_length_scene=length,
                    low_confidence=low_confidence, max_turn_deg=turn)


def extend_tips(path_points: np.ndarray, cloud: PointCloud, radius: float, scale: int = 3) -> np.ndarray:
    """
    Продлевает оба конца пути по касательной до самой дальней точки облака
    внутри цилиндра радиуса radius вокруг этой касательной.
    """
    path_points = np.asarray(path_points, dtype=np.float64)
    if len(path_points) < 2 or cloud.is_empty or radius <= 0:
        return path_points
    s = min(scale, len(path_points) - 1)

    def _extension(end: np.ndarray, inner: np.ndarray) -> Optional[np.ndarray]:
        tangent = end - inner
        norm = np.linalg.norm(tangent)
        if norm == 0:
            return None
        tangent /= norm
        offset = cloud.points - end
        axial = offset @ tangent
        lateral = np.linalg.norm(offset - axial[:, None] * tangent, axis=1)
        inside = (axial > 0) & (lateral <= radius)
        if not np.any(inside):
            return None
        return end + axial[inside].max() * tangent

    head = _extension(path_points[0], path_points[s])
    tail = _extension(path_points[-1], path_points[-1 - s])
    parts = [p[None, :] for p in (head,) if p is not None] + [path_points]
    parts += [p[None, :] for p in (tail,) if p is not None]
    return np.vstack(parts)


# ==================== ДЛИНА ====================

def curve_length(points: np.ndarray, lam: float = DEFAULT_SMOOTHING) -> float:
    """
    Длина кривой через узлы: 2 узла - отрезок; 3–4 - натуральный кубический
    сплайн; больше - кубический сглаживающий сплайн. Параметр - хордовая длина;
    параметр и координаты нормированы на средний шаг между узлами.
    Длина считается по ломаной из 100 точек на сегмент.
    """
    points = np.asarray(points, dtype=np.float64)
    step = np.linalg.norm(np.diff(points, axis=0), axis=1)
    points = np.vstack([points[:1], points[1:][step > 0]])
    step = step[step > 0]
    if len(points) < 2:
        raise ValueError("Для длины кривой нужно минимум 2 различных узла")
    if len(points) == 2:
        return float(step[0])

    unit_step = float(step.mean())
    t = np.concatenate([[0.0], np.cumsum(step)]) / unit_step
    local = (points - points[0]) / unit_step

    samples = np.concatenate([np.linspace(t[i], t[i + 1], SAMPLES_PER_SEGMENT, endpoint=False)
                              for i in range(len(t) - 1)] + [t[-1:]])
    if len(points) < 5:
        curve = CubicSpline(t, local, bc_type='natural')(samples)
    else:
        curve = np.column_stack([make_smoothing_spline(t, local[:, d], lam=lam)(samples) for d in range(3)])
    return _polyline_length(curve) * unit_step


def fit_curve_length(path: MainPath, skel: SkeletonGraph, lam: float = DEFAULT_SMOOTHING) -> float:
    """L1 - длина сглаженной кривой через узлы главного пути (единицы сцены)."""
    if len(path.node_indices) < 2:
        raise ValueError("Путь должен содержать минимум 2 узла")
    return curve_length(skel.nodes[path.node_indices], lam=lam)


def panicle_length(L1: float, calib: Calibration) -> float:
    """L = L1 · X / x1, X - реальная длина метки."""
    return L1 * calib.real_length_cm / calib.x1


def measure_length(panicle: PointCloud, calib: Calibration, lbc: Optional[LBCParams] = None,
                   downsample_frac: float = DEFAULT_DOWNSAMPLE_FRAC, node_spacing_frac: float = DEFAULT_NODE_SPACING_FRAC,
                   theta_max_deg: float = DEFAULT_THETA_MAX_DEG, tangent_scales: Sequence[int] = DEFAULT_TANGENT_SCALES,
                   smoothing: float = DEFAULT_SMOOTHING, tips: bool = True) -> LengthResult:
    """
    Полный расчёт длины: прореживание -> крупнейшая компонента -> LBC ->
    скелет -> главный путь -> (продление концов) -> сплайн -> перевод в см.
    """
    lbc = lbc or LBCParams()
    if panicle.is_empty:
        raise EmptyResultError("Облако метёлки пусто")
    warnings: List[str] = []
    diagonal = panicle.bounding_diagonal()

    cloud = voxel_downsample(panicle, downsample_frac * diagonal) if downsample_frac > 0 else panicle
    cloud, dropped = largest_component(cloud, lbc.k_neighbors)
    if dropped:
        warnings.append(f"dropped_{dropped}_disconnected_points")
        logger.warning(f"Отброшено {dropped} точек вне крупнейшей компоненты k-NN графа")

    contracted = lbc_contract(cloud, lbc)
    spacing = node_spacing_frac * diagonal
    skeleton = build_skeleton(contracted, spacing=spacing)
    path = main_path(skeleton, theta_max_deg=theta_max_deg, tangent_scales=tangent_scales)
    if path.low_confidence:
        warnings.append('main_path_low_confidence')

    nodes = skeleton.nodes[path.node_indices]
    if tips:
        nodes = extend_tips(nodes, cloud, radius=1.5 * spacing)
    L1 = curve_length(nodes, lam=smoothing)
    L_cm = panicle_length(L1, calib)
    logger.info(f"Длина метёлки: L1={L1:.6g}, L={L_cm:.3f} см")
    return LengthResult(L1=L1, L_cm=L_cm, x1=calib.x1, path=path, skeleton=skeleton, warnings=warnings)


# ==================== ОБЪЁМ ====================

def count_voxels(points: np.ndarray, voxel: float) -> int:
    """Число вокселей с ребром voxel, содержащих хотя бы одну точку; сетка привязана к началу координат."""
    keys = np.floor(points / voxel).astype(np.int64)
    return int(len(np.unique(keys, axis=0)))


def panicle_volume(panicle: PointCloud, calib: Calibration, voxel: float = DEFAULT_VOXEL) -> VolumeResult:
    """
    Облако нормируется так, что длина метки = 1, затем вокселизуется.
    V = Num · voxel³ · X³ (X - реальная длина метки в см). Полости не заполняются.
    """
    if panicle.is_empty:
        raise EmptyResultError("Облако метёлки пусто")
    if voxel <= 0:
        raise ValueError(f"Размер вокселя должен быть > 0, получено {voxel}")
    num = count_voxels(panicle.points * calib.normalize_factor, voxel)
    volume = num * voxel ** 3 * calib.real_length_cm ** 3
    logger.info(f"Объём метёлки: Num={num}, V={volume:.6g} см³")
    return VolumeResult(num_voxels=num, volume_cm3=volume, voxel=voxel)
