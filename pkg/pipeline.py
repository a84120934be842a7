"""
Оркестрация конвейера: один образец (run_sample) и пакет (run_batch).

Каталог образца может содержать продукты любого этапа:
    poses.json            позы камер                    -> view_filter
    rough/, fines/        грубые и тонкие маски кадров  -> refine_masks
    images/               исходные кадры (необязательно)
    gt_masks/             эталонные маски               -> eval_seg
    grid.json (+ .raw)    решётка плотности             -> export_cloud
    cloud.ply             облако сцены (если нет grid.json)
    truth.json            истинные значения (для сводки пакета)
Этапы без входных данных пропускаются.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from cloud_ops import Calibration, auto_eps, calibrate, split_scene
from config import PipelineConfig
from errors import EmptyResultError, StageError
from evaluation import PairedSeries, regression_metrics
from field_export import export_cloud
from formats import read_grid, read_ply, write_ply
from geometry import PointCloud
from models import BatchRun, SampleRecord, record_batch
from report import FLOAT_FORMAT, report, series_matrix, write_correlation
from segmentation import evaluate_directory, refine_directory
from traits import measure_length, panicle_volume
from view_filter import ViewSet, filter_views, scene_center

logger = logging.getLogger('pipeline')

STAGES = ['view_filter', 'refine_masks', 'eval_seg', 'export_cloud', 'load_cloud',
          'cluster', 'calibrate', 'length', 'volume']
TRAITS_COLUMNS = ['sample_id', 'L_cm', 'L1', 'x1', 'Num', 'V_cm3', 'low_confidence',
                  'warnings', 'status', 'error_stage']
CORRELATION_TRAITS = ['L_cm', 'V_cm3', 'grain_count', 'grain_mass_g']
# Пары «предсказание - истина» для сводки пакета
TRUTH_KEYS = {'L_cm': 'rachis_arc_length_cm', 'V_cm3': 'occupied_volume_cm3'}


@dataclass
class StageRecord:
    stage: str
    status: str  # 'ok', 'failed'
    seconds: float
    message: str = ''

    def to_dict(self) -> dict:
        return {'stage': self.stage, 'status': self.status, 'seconds': self.seconds, 'message': self.message}


@dataclass
class SampleResult:
    sample_id: str
    L_cm: Optional[float] = None
    L1: Optional[float] = None
    x1: Optional[float] = None
    num_voxels: Optional[int] = None
    V_cm3: Optional[float] = None
    low_confidence: bool = False
    timings: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    stages: List[StageRecord] = field(default_factory=list)
    error: Optional[Dict[str, Any]] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def status(self) -> str:
        return 'ok' if self.ok else 'failed'

    def to_row(self) -> dict:
        """Строка traits.csv (времена этапов сюда не входят)."""
        return {
            'sample_id': self.sample_id,
            'L_cm': self.L_cm,
            'L1': self.L1,
            'x1': self.x1,
            'Num': self.num_voxels,
            'V_cm3': self.V_cm3,
            'low_confidence': self.low_confidence,
            'warnings': ';'.join(self.warnings),
            'status': self.status,
            'error_stage': self.error['stage'] if self.error else '',
        }


def write_traits(rows: List[dict], path) -> Path:
    frame = pd.DataFrame(rows, columns=TRAITS_COLUMNS)
    frame['Num'] = frame['Num'].astype('Int64')
    frame = frame.sort_values('sample_id', kind='stable')
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return Path(path)


# ==================== ОДИН ОБРАЗЕЦ ====================

class SampleRunner:
    """Последовательно выполняет доступные этапы для одного каталога образца."""

    def __init__(self, config: PipelineConfig, sample_dir, out_dir):
        self.config = config
        self.sample_dir = Path(sample_dir)
        self.out_dir = Path(out_dir)
        self.result = SampleResult(sample_id=self.sample_dir.name)
        self.kept_ids: Optional[List[str]] = None

    def _stage(self, name: str, func: Callable[[], Any]) -> Any:
        started = time.perf_counter()
        logger.info(f"[{self.result.sample_id}] этап {name}: старт")
        try:
            value = func()
        except Exception as e:
            seconds = time.perf_counter() - started
            self.result.stages.append(StageRecord(name, 'failed', seconds, str(e)))
            self.result.timings[name] = seconds
            raise StageError(name, e) from e
        seconds = time.perf_counter() - started
        self.result.stages.append(StageRecord(name, 'ok', seconds))
        self.result.timings[name] = seconds
        logger.info(f"[{self.result.sample_id}] этап {name}: готово за {seconds:.2f} с")
        return value

    def _warn(self, message: str):
        self.result.warnings.append(message)

    # ==================== ЭТАПЫ ====================

    def _view_filter(self) -> List[str]:
        views = ViewSet.from_file(self.sample_dir / 'poses.json')
        center = scene_center(views)
        kept = filter_views(views, center, self.config.max_angle_deg)
        payload = {'center': center.tolist(), 'max_angle_deg': self.config.max_angle_deg,
                   'kept': kept, 'total': len(views)}
        (self.out_dir / 'kept.json').write_text(json.dumps(payload, indent=2), encoding='utf-8')
        return kept

    def _refine_masks(self) -> int:
        images = self.sample_dir / 'images'
        refined = refine_directory(
            self.sample_dir / 'fines', self.sample_dir / 'rough', self.out_dir / 'masks',
            images_dir=images if images.is_dir() else None,
            min_area=self.config.min_area, min_stability=self.config.min_stability,
            erosion_radius=self.config.erosion_radius, n_samples=self.config.n_samples,
            containment_min=self.config.containment_min, seed=self.config.seed, image_ids=self.kept_ids,
        )
        unmatched = sum(1 for instances in refined.values() for r in instances if not r.matched)
        if unmatched:
            self._warn(f"unmatched_instances_{unmatched}")
        return len(refined)

    def _eval_seg(self) -> pd.DataFrame:
        table = evaluate_directory(self.out_dir / 'masks', self.sample_dir / 'gt_masks')
        table.to_csv(self.out_dir / 'seg_metrics.csv', index=False, float_format=FLOAT_FORMAT)
        return table

    def _export_cloud(self) -> PointCloud:
        grid = read_grid(self.sample_dir / 'grid.json')
        density = self.config.export_density
        if density is None:
            density = 2.0 / float(np.mean(grid.spacing)) ** 2
        cloud = export_cloud(grid, self.config.iso, density, self.config.seed)
        if cloud.is_empty:
            raise EmptyResultError("Изоповерхность пуста, облако не получено")
        write_ply(cloud, self.out_dir / 'exported.ply')
        return cloud

    def _cluster(self, cloud: PointCloud):
        cfg = self.config
        eps = cfg.eps if cfg.eps is not None else auto_eps(cloud, cfg.eps_factor)
        split = split_scene(cloud, eps=eps, min_pts=cfg.min_pts, min_cluster_frac=cfg.min_cluster_frac,
                            sigma_max=cfg.sigma_max, kappa_min=cfg.kappa_min)
        if split.semantic.low_confidence:
            self._warn('label_low_confidence')
            self.result.low_confidence = True
        write_ply(split.semantic.panicle, self.out_dir / 'panicle.ply')
        write_ply(split.semantic.label, self.out_dir / 'label.ply')
        (self.out_dir / 'cluster.json').write_text(json.dumps(split.report(), indent=2), encoding='utf-8')
        return split.semantic

    def _calibrate(self, label: PointCloud) -> Calibration:
        calib = calibrate(label, self.config.label_length_cm, refine_edges=self.config.refine_label_edges)
        (self.out_dir / 'calib.json').write_text(json.dumps(calib.to_dict(), indent=2), encoding='utf-8')
        return calib

    def _length(self, panicle: PointCloud, calib: Calibration):
        cfg = self.config
        return measure_length(panicle, calib, lbc=cfg.lbc_params(), downsample_frac=cfg.downsample_frac,
                              node_spacing_frac=cfg.node_spacing_frac, theta_max_deg=cfg.theta_max_deg,
                              tangent_scales=cfg.tangent_scales, smoothing=cfg.smoothing, tips=cfg.extend_tips)

    # ==================== ЗАПУСК ====================

    def run(self) -> SampleResult:
        sample = self.sample_dir
        has_poses = (sample / 'poses.json').is_file()
        has_masks = (sample / 'rough').is_dir()
        has_gt = (sample / 'gt_masks').is_dir()
        has_grid = (sample / 'grid.json').is_file()
        has_cloud = (sample / 'cloud.ply').is_file()
        self.out_dir.mkdir(parents=True, exist_ok=True)

        try:
            if not any([has_poses, has_masks, has_grid, has_cloud]):
                raise StageError('discover', EmptyResultError(f"В {sample} нет входных данных ни для одного этапа"))
            if has_poses:
                self.kept_ids = self._stage('view_filter', self._view_filter)
            if has_masks:
                self._stage('refine_masks', self._refine_masks)
                if has_gt:
                    self._stage('eval_seg', self._eval_seg)

            cloud = None
            if has_grid:
                cloud = self._stage('export_cloud', self._export_cloud)
            elif has_cloud:
                cloud = self._stage('load_cloud', lambda: read_ply(sample / 'cloud.ply'))

            if cloud is not None:
                semantic = self._stage('cluster', lambda: self._cluster(cloud))
                calib = self._stage('calibrate', lambda: self._calibrate(semantic.label))
                self.result.x1 = calib.x1
                length = self._stage('length', lambda: self._length(semantic.panicle, calib))
                self.result.L1, self.result.L_cm = length.L1, length.L_cm
                self.result.warnings.extend(length.warnings)
                self.result.low_confidence = self.result.low_confidence or length.low_confidence
                volume = self._stage('volume', lambda: panicle_volume(semantic.panicle, calib, self.config.voxel))
                self.result.num_voxels, self.result.V_cm3 = volume.num_voxels, volume.volume_cm3
        except StageError as e:
            self.result.error = e.to_dict()
            logger.error(f"[{self.result.sample_id}] {e}", exc_info=True)

        write_traits([self.result.to_row()], self.out_dir / 'traits.csv')
        log = {'sample_id': self.result.sample_id,
               'stages': [s.to_dict() for s in self.result.stages],
               'warnings': self.result.warnings, 'error': self.result.error}
        (self.out_dir / 'stage_log.json').write_text(json.dumps(log, indent=2, ensure_ascii=False), encoding='utf-8')
        return self.result


def run_sample(config: PipelineConfig, sample_dir, out_dir=None) -> SampleResult:
    """Обработка одного образца; ошибка этапа записывается в результат, а не пробрасывается."""
    sample_dir = Path(sample_dir)
    if not sample_dir.is_dir():
        raise EmptyResultError(f"Каталог образца не найден: {sample_dir}")
    out_dir = Path(out_dir) if out_dir is not None else sample_dir / 'out'
    return SampleRunner(config, sample_dir, out_dir).run()


# ==================== ПАКЕТ ====================

SAMPLE_MARKERS = ('cloud.ply', 'grid.json', 'poses.json', 'rough')


def discover_samples(root) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise EmptyResultError(f"Каталог пакета не найден: {root}")
    return sorted((p for p in root.iterdir() if p.is_dir() and any((p / m).exists() for m in SAMPLE_MARKERS)),
                  key=lambda p: p.name)


def _read_truth(sample_dir: Path) -> Dict[str, Any]:
    path = sample_dir / 'truth.json'
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError:
        logger.warning(f"Некорректный {path}, истина не используется")
        return {}


@dataclass
class BatchSummary:
    results: List[SampleResult]
    summary: Dict[str, Any]
    out_dir: Path


def _metrics_or_none(series: PairedSeries) -> Optional[dict]:
    try:
        return regression_metrics(series).to_dict()
    except ValueError as e:
        logger.warning(f"Метрики для {series.name} не посчитаны: {e}")
        return None


def run_batch(config: PipelineConfig, root, out_dir, workers: Optional[int] = None) -> BatchSummary:
    """
    Все образцы каталога root. Пишет batch.csv, summary.json, timings.txt,
    errors.csv, pairs.csv, корреляции и отчёт по метрикам при наличии истины.
    """
    root, out_dir = Path(root), Path(out_dir)
    samples = discover_samples(root)
    if not samples:
        raise EmptyResultError(f"В {root} нет ни одного образца")
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or config.workers
    started_at = datetime.now(timezone.utc)
    logger.info(f"[STARTUP] Пакет {root}: {len(samples)} образцов, процессов: {workers}")

    stats = {'samples_processed': 0, 'errors': 0}
    results: List[SampleResult] = []
    progress = tqdm(total=len(samples), desc='samples', unit='sample', disable=None)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_sample, config, s, out_dir / s.name): s for s in samples}
            for future in as_completed(futures):
                results.append(future.result())
                progress.update(1)
    else:
        for s in samples:
            results.append(run_sample(config, s, out_dir / s.name))
            progress.update(1)
    progress.close()
    results.sort(key=lambda r: r.sample_id)

    for r in results:
        stats['samples_processed'] += 1
        if not r.ok:
            stats['errors'] += 1

    write_traits([r.to_row() for r in results], out_dir / 'batch.csv')

    errors = [{'sample_id': r.sample_id, **r.error} for r in results if r.error]
    pd.DataFrame(errors, columns=['sample_id', 'stage', 'error_type', 'message', 'offset']) \
        .to_csv(out_dir / 'errors.csv', index=False)

    timings = pd.DataFrame([{'sample_id': r.sample_id, 'stage': k, 'seconds': v}
                            for r in results for k, v in r.timings.items()],
                           columns=['sample_id', 'stage', 'seconds'])
    table = timings.groupby('stage')['seconds'].agg(['count', 'mean', 'max']) if len(timings) else timings
    if len(timings):
        table = table.reindex([s for s in STAGES if s in table.index])
    (out_dir / 'timings.txt').write_text(table.to_string() + '\n', encoding='utf-8')

    # Пары «предсказание - истина» и корреляции признаков
    truths = {s.name: _read_truth(s) for s in samples}
    pairs, traits_rows = [], []
    for r in results:
        truth = truths.get(r.sample_id, {})
        if r.ok:
            traits_rows.append({'sample_id': r.sample_id, 'L_cm': r.L_cm, 'V_cm3': r.V_cm3,
                                'grain_count': truth.get('grain_count'), 'grain_mass_g': truth.get('grain_mass_g')})
        for trait, key in TRUTH_KEYS.items():
            predicted = getattr(r, trait)
            if predicted is not None and truth.get(key) is not None:
                pairs.append({'sample_id': r.sample_id, 'trait': trait,
                              'predicted': predicted, 'measured': float(truth[key])})
    pairs_frame = pd.DataFrame(pairs, columns=['sample_id', 'trait', 'predicted', 'measured'])
    pairs_frame.sort_values(['trait', 'sample_id'], kind='stable') \
        .to_csv(out_dir / 'pairs.csv', index=False, float_format=FLOAT_FORMAT)

    metrics: Dict[str, Any] = {}
    series = []
    for trait in TRUTH_KEYS:
        group = pairs_frame[pairs_frame['trait'] == trait]
        if len(group) >= 2:
            s = PairedSeries(predicted=group['predicted'].to_numpy(), measured=group['measured'].to_numpy(),
                             name=trait, units='cm' if trait == 'L_cm' else 'cm3')
            metrics[trait] = _metrics_or_none(s)
            if metrics[trait] is not None:
                series.append(s)
    if series:
        report(series, None, out_dir / 'report', html=config.html_report)

    if len(traits_rows) >= 2:
        matrix = series_matrix(pd.DataFrame(traits_rows), CORRELATION_TRAITS)
        if matrix is not None:
            write_correlation(matrix, out_dir)

    summary = {
        'root': str(root),
        'n_samples': len(results),
        'n_ok': sum(1 for r in results if r.ok),
        'n_failed': stats['errors'],
        'failures': [{'sample_id': e['sample_id'], 'stage': e['stage'], 'message': e['message']} for e in errors],
        'metrics': metrics,
    }
    (out_dir / 'summary.json').write_text(json.dumps(summary, indent=2, ensure_ascii=False), encoding='utf-8')

    batch = BatchRun(root=str(root), started_at=started_at, finished_at=datetime.now(timezone.utc),
                     samples_total=len(results), samples_failed=stats['errors'], workers=workers,
                     seed=config.seed, config_text=config.to_conf_text())
    records = [SampleRecord(sample_id=r.sample_id, status=r.status, L_cm=r.L_cm, L1=r.L1, x1=r.x1,
                            num_voxels=r.num_voxels, V_cm3=r.V_cm3,
                            error_stage=r.error['stage'] if r.error else None,
                            error_message=r.error['message'] if r.error else None,
                            timings_json=json.dumps(r.timings), warnings_json=json.dumps(r.warnings),
                            elapsed_total=float(sum(r.timings.values())))
               for r in results]
    record_batch(out_dir, batch, records)

    logger.info(f"Пакет завершён: обработано {stats['samples_processed']}, ошибок {stats['errors']}")
    return BatchSummary(results=results, summary=summary, out_dir=out_dir)
