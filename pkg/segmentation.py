"""
Уточнение масок ансамблем: фильтрация «тонких» масок универсального
сегментатора, эрозия/выборка/сопоставление «грубых» масок детектора и
объединение совпавших. Плюс все двумерные метрики сегментации.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage
from skimage.morphology import disk

from formats import read_mask, read_rgb, write_mask, write_rgba
from geometry import BinaryMask

logger = logging.getLogger(__name__)

DEFAULT_MIN_AREA = 10_000
DEFAULT_MIN_STABILITY = 0.8
DEFAULT_EROSION_RADIUS = 5
DEFAULT_N_SAMPLES = 200
DEFAULT_CONTAINMENT_MIN = 0.5

STABILITY_FILE = 'stability.json'
MASK_SUFFIXES = ('.png', '.pgm')
IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg')

# 4-связность для границ
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class InstanceClass(str, Enum):
    PANICLE = 'panicle'
    LABEL = 'label'


@dataclass(frozen=True)
class CandidateMask:
    """«Тонкая» маска сегментатора с оценкой стабильности."""
    mask: BinaryMask
    stability: float
    name: str = ''

    def __post_init__(self):
        if not np.isfinite(self.stability):
            raise ValueError(f"Стабильность маски должна быть конечной: {self.stability}")

    @property
    def area(self) -> int:
        return self.mask.count


@dataclass(frozen=True)
class RoughInstance:
    """«Грубая» маска экземпляра с классом."""
    mask: BinaryMask
    class_label: InstanceClass

    def __post_init__(self):
        if self.mask.is_empty:
            raise ValueError("Грубая маска экземпляра не может быть пустой")
        object.__setattr__(self, 'class_label', InstanceClass(self.class_label))


@dataclass
class RefinedInstance:
    """Результат сопоставления: итоговая маска, индексы совпавших тонких масок и предупреждения."""
    mask: BinaryMask
    class_label: InstanceClass
    matched: List[int] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class SegMetrics:
    precision: float
    recall: float
    f1: float
    iou: float


def _check_same_shape(a: BinaryMask, b: BinaryMask):
    if a.shape != b.shape:
        raise ValueError(f"Размеры масок не совпадают: {a.shape} и {b.shape}")


# ==================== ФИЛЬТРАЦИЯ И МОРФОЛОГИЯ ====================

def filter_candidates(cands: Sequence[CandidateMask], min_area: int = DEFAULT_MIN_AREA,
                      min_stability: float = DEFAULT_MIN_STABILITY) -> List[CandidateMask]:
    """Оставляет маски с area >= min_area и stability >= min_stability."""
    kept = [c for c in cands if c.area >= min_area and c.stability >= min_stability]
    logger.debug(f"Фильтр тонких масок: {len(kept)} из {len(cands)}")
    return kept


def erode(mask: BinaryMask, radius: int) -> BinaryMask:
    """Эрозия дисковым элементом; за границей изображения - фон."""
    if radius < 0:
        raise ValueError(f"Радиус эрозии должен быть >= 0, получено {radius}")
    if radius == 0:
        return mask
    return BinaryMask(ndimage.binary_erosion(mask.bits, structure=disk(radius), border_value=0))


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    if radius < 0:
        raise ValueError(f"Радиус дилатации должен быть >= 0, получено {radius}")
    if radius == 0:
        return mask
    return BinaryMask(ndimage.binary_dilation(mask.bits, structure=disk(radius)))


def sample_mask(mask: BinaryMask, n: int, seed: int) -> np.ndarray:
    """
    n пикселей переднего плана без возвращения (или все, если их меньше n).
    Возвращает массив (m, 2) координат (строка, столбец).
    """
    coords = np.argwhere(mask.bits)
    if len(coords) == 0:
        raise ValueError("Нельзя выбрать точки из пустой маски")
    if n >= len(coords):
        return coords
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(coords), size=n, replace=False))
    return coords[chosen]


# ==================== СОПОСТАВЛЕНИЕ ====================

def match_and_merge(rough: RoughInstance, fines: Sequence[CandidateMask],
                    erosion_radius: int = DEFAULT_EROSION_RADIUS, n_samples: int = DEFAULT_N_SAMPLES,
                    seed: int = 0, containment_min: float = DEFAULT_CONTAINMENT_MIN) -> RefinedInstance:
    """
    Тонкая маска F совпадает, если (a) хотя бы одна выборочная точка
    эродированной грубой маски лежит в F и (b) |F ∩ dilate(rough)| / |F| >= containment_min.
    Результат - объединение совпавших; если совпадений нет - грубая маска.
    """
    if not fines:
        return RefinedInstance(mask=rough.mask, class_label=rough.class_label,
                               warnings=["нет тонких масок, оставлена грубая маска"])
    for fine in fines:
        _check_same_shape(rough.mask, fine.mask)

    eroded = erode(rough.mask, erosion_radius)
    warnings = []
    if eroded.is_empty:
        eroded = rough.mask
        warnings.append("маска пуста после эрозии, выборка по исходной")
    samples = sample_mask(eroded, n_samples, seed)
    dilated = dilate(rough.mask, erosion_radius).bits

    merged = np.zeros(rough.mask.shape, dtype=bool)
    matched = []
    for i, fine in enumerate(fines):
        if fine.area == 0:
            continue
        hit = bool(np.any(fine.mask.bits[samples[:, 0], samples[:, 1]]))
        if not hit:
            continue
        containment = np.count_nonzero(fine.mask.bits & dilated) / fine.area
        if containment >= containment_min:
            merged |= fine.mask.bits
            matched.append(i)

    if not matched:
        warnings.append("ни одна тонкая маска не совпала, оставлена грубая маска")
        return RefinedInstance(mask=rough.mask, class_label=rough.class_label, warnings=warnings)
    return RefinedInstance(mask=BinaryMask(merged), class_label=rough.class_label,
                           matched=matched, warnings=warnings)


def apply_mask(image: np.ndarray, mask: BinaryMask) -> np.ndarray:
    """RGBA-растр: альфа 255 на переднем плане, 0 на фоне; RGB без изменений."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"Ожидался RGB-растр (h, w, 3), получено {image.shape}")
    if image.shape[:2] != mask.shape:
        raise ValueError(f"Размер изображения {image.shape[:2]} != размеру маски {mask.shape}")
    alpha = np.where(mask.bits, 255, 0).astype(np.uint8)
    return np.dstack([image.astype(np.uint8), alpha])


# ==================== МЕТРИКИ ====================

def seg_metrics(pred: BinaryMask, gt: BinaryMask) -> SegMetrics:
    _check_same_shape(pred, gt)
    p, g = pred.bits, gt.bits
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    return SegMetrics(precision=precision, recall=recall, f1=f1, iou=iou)


def edge_pixels(mask: BinaryMask) -> np.ndarray:
    """Пиксели переднего плана, у которых есть фоновый 4-сосед (за краем - фон)."""
    interior = ndimage.binary_erosion(mask.bits, structure=FOUR_CONNECTED, border_value=0)
    return mask.bits & ~interior


def boundary_overlap(pred: BinaryMask, gt: BinaryMask) -> float:
    _check_same_shape(pred, gt)
    ep, eg = edge_pixels(pred), edge_pixels(gt)
    union = np.count_nonzero(ep | eg)
    if union == 0:
        return 1.0
    return np.count_nonzero(ep & eg) / union


# ==================== ПАКЕТНАЯ ОБРАБОТКА КАТАЛОГОВ ====================

def _mask_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in MASK_SUFFIXES)


def read_candidates(image_dir: Path) -> List[CandidateMask]:
    """
    Тонкие маски одного кадра: файлы масок в каталоге и stability.json
    {имя файла: оценка}. Маски без оценки получают стабильность 0.
    """
    scores: Dict[str, float] = {}
    sidecar = image_dir / STABILITY_FILE
    if sidecar.exists():
        scores = {str(k): float(v) for k, v in json.loads(sidecar.read_text()).items()}
    else:
        logger.warning(f"Нет {STABILITY_FILE} в {image_dir}, стабильность считается нулевой")
    return [CandidateMask(mask=read_mask(p), stability=scores.get(p.name, 0.0), name=p.name)
            for p in _mask_files(image_dir)]


def read_rough(image_dir: Path) -> List[RoughInstance]:
    """Грубые маски кадра: файлы <класс>_<номер>.png."""
    instances = []
    for p in _mask_files(image_dir):
        class_name = p.stem.split('_')[0]
        try:
            class_label = InstanceClass(class_name)
        except ValueError:
            logger.warning(f"Пропуск {p.name}: неизвестный класс '{class_name}'")
            continue
        mask = read_mask(p)
        if mask.is_empty:
            logger.warning(f"Пропуск {p.name}: пустая грубая маска")
            continue
        instances.append(RoughInstance(mask=mask, class_label=class_label))
    return instances


def refine_directory(fines_dir, rough_dir, out_dir, images_dir=None,
                     min_area: int = DEFAULT_MIN_AREA, min_stability: float = DEFAULT_MIN_STABILITY,
                     erosion_radius: int = DEFAULT_EROSION_RADIUS, n_samples: int = DEFAULT_N_SAMPLES,
                     containment_min: float = DEFAULT_CONTAINMENT_MIN, seed: int = 0,
                     image_ids: Optional[Sequence[str]] = None) -> Dict[str, List[RefinedInstance]]:
    """
    Уточнение масок для всех кадров. Раскладка каталогов:
    fines/<image_id>/*.png + stability.json, rough/<image_id>/<класс>_<k>.png,
    images/<image_id>.png|jpg (необязательно).
    Пишет out/<image_id>/<класс>_<k>.png, out/<image_id>.png (объединение)
    и out/rgba/<image_id>.png при наличии изображений.
    """
    fines_dir, rough_dir, out_dir = Path(fines_dir), Path(rough_dir), Path(out_dir)
    ids = sorted(p.name for p in rough_dir.iterdir() if p.is_dir())
    if image_ids is not None:
        allowed = set(image_ids)
        ids = [i for i in ids if i in allowed]

    results: Dict[str, List[RefinedInstance]] = {}
    for index, image_id in enumerate(ids):
        rough = read_rough(rough_dir / image_id)
        if not rough:
            logger.warning(f"Кадр {image_id}: нет грубых масок")
            continue
        fines_path = fines_dir / image_id
        fines = read_candidates(fines_path) if fines_path.is_dir() else []
        fines = filter_candidates(fines, min_area=min_area, min_stability=min_stability)

        refined = []
        union = np.zeros(rough[0].mask.shape, dtype=bool)
        counters: Dict[str, int] = {}
        for k, instance in enumerate(rough):
            # зерно своё для каждого кадра и экземпляра
            result = match_and_merge(instance, fines, erosion_radius=erosion_radius, n_samples=n_samples,
                                     seed=seed + 1000 * index + k, containment_min=containment_min)
            for warning in result.warnings:
                logger.warning(f"Кадр {image_id}, {instance.class_label.value}: {warning}")
            n = counters.get(instance.class_label.value, 0)
            counters[instance.class_label.value] = n + 1
            write_mask(result.mask, out_dir / image_id / f"{instance.class_label.value}_{n}.png")
            union |= result.mask.bits
            refined.append(result)

        union_mask = BinaryMask(union)
        write_mask(union_mask, out_dir / f"{image_id}.png")
        if images_dir is not None:
            image_path = next((Path(images_dir) / f"{image_id}{s}" for s in IMAGE_SUFFIXES
                               if (Path(images_dir) / f"{image_id}{s}").exists()), None)
            if image_path is not None:
                write_rgba(apply_mask(read_rgb(image_path), union_mask), out_dir / 'rgba' / f"{image_id}.png")
        results[image_id] = refined

    logger.info(f"Уточнено масок: {len(results)} кадров")
    return results


def evaluate_directory(pred_dir, gt_dir) -> pd.DataFrame:
    """
    Метрики по парам одноимённых масок pred_dir/gt_dir. Последняя строка
    (image = 'mean') - средние значения.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    rows = []
    for gt_path in _mask_files(gt_dir):
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            logger.warning(f"Нет предсказания для {gt_path.name}")
            continue
        pred, gt = read_mask(pred_path), read_mask(gt_path)
        m = seg_metrics(pred, gt)
        rows.append({'image': gt_path.stem, 'precision': m.precision, 'recall': m.recall,
                     'f1': m.f1, 'iou': m.iou, 'bo': boundary_overlap(pred, gt)})

    columns = ['image', 'precision', 'recall', 'f1', 'iou', 'bo']
    table = pd.DataFrame(rows, columns=columns)
    if len(table):
        mean = table[columns[1:]].mean().to_dict()
        table = pd.concat([table, pd.DataFrame([{'image': 'mean', **mean}])], ignore_index=True)
    return table
