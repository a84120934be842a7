"""
Командная строка PanicleLab: отдельные этапы и полный конвейер.

Коды выхода: 0 - успех, 1 - ошибка использования, 2 - ошибка данных,
3 - сбой этапа конвейера.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import pandas as pd

from cloud_ops import Calibration, auto_eps, calibrate, split_scene
from config import PipelineConfig, load_config
from errors import EXIT_DATA_ERROR, EXIT_OK, EXIT_STAGE_FAILURE, EXIT_USAGE, ConfigError, PanicleError, StageError
from evaluation import read_pairs, series_from_pairs
from field_export import export_cloud
from formats import read_grid, read_ply, write_grid, write_ply
from pipeline import TRAITS_COLUMNS, run_batch, run_sample, write_traits
from report import report, series_matrix
from segmentation import evaluate_directory, refine_directory
from synth import gen_density_grid, gen_label, gen_scene, write_scene
from traits import measure_length, panicle_volume
from view_filter import ViewSet, filter_views, scene_center

logger = logging.getLogger(__name__)


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def _config(ctx: click.Context, **overrides) -> PipelineConfig:
    return load_config(ctx.obj.get('config_path'), overrides=overrides)


def _read_calib(path) -> Calibration:
    try:
        return Calibration.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise PanicleError(f"Некорректный файл калибровки {path}: {e}") from e


def _update_traits(path: Path, sample_id: str, values: dict):
    """Обновляет строку sample_id в traits.csv, сохраняя остальные колонки."""
    rows = []
    if path.is_file():
        rows = pd.read_csv(path, keep_default_na=False, na_values=['']).to_dict('records')
    row = next((r for r in rows if str(r.get('sample_id')) == sample_id), None)
    if row is None:
        row = {c: None for c in TRAITS_COLUMNS}
        row.update({'sample_id': sample_id, 'low_confidence': False, 'warnings': '', 'status': 'ok',
                    'error_stage': ''})
        rows.append(row)
    row.update(values)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_traits(rows, path)


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Файл конфигурации «ключ = значение» (иначе PANICLE_CONFIG или значения по умолчанию)')
@click.option('--verbose', '-v', is_flag=True, help='Подробный лог (DEBUG)')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], verbose: bool):
    """PanicleLab - фенотипирование метёлок риса по облакам точек."""
    _setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj['config_path'] = config_path


# ==================== ЭТАПЫ ====================

@cli.command('filter-views')
@click.option('--poses', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--max-angle', type=float, default=None, help='Порог угла, градусы')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.pass_context
def filter_views_cmd(ctx, poses, max_angle, out):
    """Центр сцены и отбор ракурсов, смотрящих на него."""
    config = _config(ctx, max_angle_deg=max_angle)
    views = ViewSet.from_file(poses)
    center = scene_center(views)
    kept = filter_views(views, center, config.max_angle_deg)
    Path(out).write_text(json.dumps({'center': center.tolist(), 'kept': kept, 'total': len(views)}, indent=2))
    click.echo(f"Оставлено ракурсов: {len(kept)} из {len(views)}")


@cli.command('refine-masks')
@click.option('--fines', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--rough', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--images', type=click.Path(exists=True, file_okay=False), default=None)
@click.option('--kept', type=click.Path(exists=True, dir_okay=False), default=None,
              help='kept.json из filter-views: обрабатывать только эти кадры')
@click.option('--seed', type=int, default=None)
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.pass_context
def refine_masks_cmd(ctx, fines, rough, images, kept, seed, out):
    """Уточнение грубых масок по тонким кандидатам."""
    config = _config(ctx, seed=seed)
    image_ids = json.loads(Path(kept).read_text())['kept'] if kept else None
    refined = refine_directory(fines, rough, out, images_dir=images, min_area=config.min_area,
                               min_stability=config.min_stability, erosion_radius=config.erosion_radius,
                               n_samples=config.n_samples, containment_min=config.containment_min,
                               seed=config.seed, image_ids=image_ids)
    click.echo(f"Уточнено кадров: {len(refined)}")


@cli.command('eval-seg')
@click.option('--pred', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--gt', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--out', required=True, type=click.Path(dir_okay=False))
def eval_seg_cmd(pred, gt, out):
    """Precision / recall / F1 / IoU / BO по парам масок."""
    table = evaluate_directory(pred, gt)
    table.to_csv(out, index=False, float_format='%.6f')
    click.echo(table.to_string(index=False))


@cli.command('export-cloud')
@click.option('--grid', 'grid_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--iso', default=None, help="Уровень изоповерхности или 'auto' (порог Оцу)")
@click.option('--density', type=float, default=None, help='Точек на единицу площади')
@click.option('--seed', type=int, default=None)
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.pass_context
def export_cloud_cmd(ctx, grid_path, iso, density, seed, out):
    """Marching cubes + равномерная выборка точек с поверхности."""
    config = _config(ctx, iso=iso, export_density=density, seed=seed)
    grid = read_grid(grid_path)
    density = config.export_density or 2.0 / float(grid.spacing.mean()) ** 2
    cloud = export_cloud(grid, config.iso, density, config.seed)
    write_ply(cloud, out)
    click.echo(f"Точек: {len(cloud)}")


@cli.command('cluster')
@click.option('--in', 'cloud_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--eps', default=None, help="Радиус DBSCAN в единицах сцены или 'auto'")
@click.option('--min-pts', type=int, default=None)
@click.option('--out-panicle', required=True, type=click.Path(dir_okay=False))
@click.option('--out-label', required=True, type=click.Path(dir_okay=False))
@click.option('--report', 'report_path', required=True, type=click.Path(dir_okay=False))
@click.pass_context
def cluster_cmd(ctx, cloud_path, eps, min_pts, out_panicle, out_label, report_path):
    """DBSCAN и разделение сцены на метёлку и метку."""
    config = _config(ctx, eps=eps, min_pts=min_pts)
    cloud = read_ply(cloud_path)
    eps = config.eps if config.eps is not None else auto_eps(cloud, config.eps_factor)
    split = split_scene(cloud, eps=eps, min_pts=config.min_pts, min_cluster_frac=config.min_cluster_frac,
                        sigma_max=config.sigma_max, kappa_min=config.kappa_min)
    for path in (out_panicle, out_label, report_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_ply(split.semantic.panicle, out_panicle)
    write_ply(split.semantic.label, out_label)
    Path(report_path).write_text(json.dumps(split.report(), indent=2))
    click.echo(f"Кластеров: {split.clustering.n_clusters}; метёлка {len(split.semantic.panicle)} точек, "
               f"метка {len(split.semantic.label)} точек")


@cli.command('calibrate')
@click.option('--label', 'label_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--length-cm', type=float, default=None, help='Реальная длина метки, см')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.pass_context
def calibrate_cmd(ctx, label_path, length_cm, out):
    """Длина метки x1 и масштаб сцены."""
    config = _config(ctx, label_length_cm=length_cm)
    calib = calibrate(read_ply(label_path), config.label_length_cm, refine_edges=config.refine_label_edges)
    Path(out).write_text(json.dumps(calib.to_dict(), indent=2))
    click.echo(f"x1 = {calib.x1:.6g}, масштаб {calib.scale_cm_per_unit:.6g} см/ед.")


@cli.command('length')
@click.option('--panicle', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--calib', 'calib_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--sample-id', default=None, help='По умолчанию - имя каталога облака')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.pass_context
def length_cmd(ctx, panicle, calib_path, sample_id, out):
    """Длина метёлки по скелету."""
    config = _config(ctx)
    calib = _read_calib(calib_path)
    result = measure_length(read_ply(panicle), calib, lbc=config.lbc_params(),
                            downsample_frac=config.downsample_frac, node_spacing_frac=config.node_spacing_frac,
                            theta_max_deg=config.theta_max_deg, tangent_scales=config.tangent_scales,
                            smoothing=config.smoothing, tips=config.extend_tips)
    sample_id = sample_id or Path(panicle).resolve().parent.name
    _update_traits(Path(out), sample_id, {'L_cm': result.L_cm, 'L1': result.L1, 'x1': calib.x1,
                                          'low_confidence': result.low_confidence,
                                          'warnings': ';'.join(result.warnings)})
    click.echo(f"L = {result.L_cm:.3f} см (L1 = {result.L1:.6g})")


@cli.command('volume')
@click.option('--panicle', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--calib', 'calib_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--voxel', type=float, default=None)
@click.option('--sample-id', default=None)
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.pass_context
def volume_cmd(ctx, panicle, calib_path, voxel, sample_id, out):
    """Объём метёлки по вокселям."""
    config = _config(ctx, voxel=voxel)
    calib = _read_calib(calib_path)
    result = panicle_volume(read_ply(panicle), calib, config.voxel)
    sample_id = sample_id or Path(panicle).resolve().parent.name
    _update_traits(Path(out), sample_id, {'Num': result.num_voxels, 'V_cm3': result.volume_cm3, 'x1': calib.x1})
    click.echo(f"Num = {result.num_voxels}, V = {result.volume_cm3:.6g} см³")


@cli.command('eval-reg')
@click.option('--pairs', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--html', is_flag=True, help='Дополнительно report.html')
@click.option('--out', required=True, type=click.Path(file_okay=False))
def eval_reg_cmd(pairs, html, out):
    """R², RMSE, rRMSE по признакам и корреляции предсказаний."""
    frame = read_pairs(pairs)
    series = series_from_pairs(frame)
    wide = frame.pivot_table(index='sample_id', columns='trait', values='predicted').dropna()
    matrix = series_matrix(wide, sorted(wide.columns)) if len(wide) >= 2 else None
    written = report(series, matrix, out, html=html)
    click.echo(f"Записано файлов: {len(written)}")


@cli.command('synth')
@click.option('--kind', type=click.Choice(['panicle', 'label', 'sphere', 'box']), default='panicle')
@click.option('--seed', type=int, default=0)
@click.option('--grid', is_flag=True, help='Для panicle: также grid.json всей сцены')
@click.option('--out', required=True, type=click.Path(file_okay=False))
def synth_cmd(kind, seed, grid, out):
    """Синтетическая сцена с известной истиной."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == 'panicle':
        written = write_scene(gen_scene(seed), out, grid=grid, seed=seed)
    elif kind == 'label':
        written = [write_ply(gen_label(seed=seed), out / 'label.ply')]
    else:
        written = [write_grid(gen_density_grid(kind), out / 'grid.json')]
    for path in written:
        click.echo(str(path))


# ==================== КОНВЕЙЕР ====================

@cli.command('run')
@click.option('--sample', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None, help='По умолчанию <sample>/out')
@click.pass_context
def run_cmd(ctx, sample, seed, out):
    """Полный конвейер для одного образца."""
    config = _config(ctx, seed=seed)
    result = run_sample(config, sample, out)
    if result.error:
        click.echo(f"Ошибка на этапе {result.error['stage']}: {result.error['message']}", err=True)
        ctx.exit(EXIT_DATA_ERROR if result.error['stage'] == 'discover' else EXIT_STAGE_FAILURE)
    click.echo(f"{result.sample_id}: L = {result.L_cm}, V = {result.V_cm3}")


@cli.command('run-batch')
@click.option('--root', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--workers', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.pass_context
def run_batch_cmd(ctx, root, workers, seed, out):
    """Все образцы каталога; сводка, метрики, времена этапов."""
    config = _config(ctx, seed=seed, workers=workers)
    batch = run_batch(config, root, out, workers=config.workers)
    s = batch.summary
    click.echo(f"Образцов: {s['n_samples']}, успешно: {s['n_ok']}, ошибок: {s['n_failed']}")


def main(argv=None) -> int:
    """Точка входа с отображением исключений на коды выхода."""
    try:
        rv = cli.main(args=argv, prog_name='paniclelab', standalone_mode=False)
    except click.Abort:
        click.echo('Прервано', err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ConfigError as e:
        click.echo(f"Ошибка конфигурации: {e}", err=True)
        return EXIT_USAGE
    except StageError as e:
        click.echo(str(e), err=True)
        return EXIT_STAGE_FAILURE
    except (ValueError, OSError) as e:
        click.echo(f"Ошибка данных: {e}", err=True)
        return EXIT_DATA_ERROR
    # при standalone_mode=False click возвращает код из ctx.exit()
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
