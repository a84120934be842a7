import json

import numpy as np
import pandas as pd
import pytest

from config import PipelineConfig
from errors import EmptyResultError
from formats import write_mask
from geometry import BinaryMask
from models import list_batches
from pipeline import TRAITS_COLUMNS, discover_samples, run_batch, run_sample
from synth import SynthPanicleSpec, gen_scene, write_scene

SCALE = 0.2


def scene_sample(sample_dir, seed, length_cm):
    """Прямая ось без веточек рядом с меткой; облако сцены в cloud.ply."""
    spec = SynthPanicleSpec(rachis_points=[[0.0, 0.0, 0.0], [0.0, 0.0, length_cm]], n_branches=0,
                            density=150.0, seed=seed)
    scene = gen_scene(seed, spec=spec, scale=SCALE)
    write_scene(scene, sample_dir, seed=seed)
    return scene


def masks_sample(sample_dir):
    bits = np.zeros((40, 40), dtype=bool)
    bits[10:30, 10:30] = True
    write_mask(BinaryMask(bits), sample_dir / 'rough' / 'img0' / 'panicle_0.png')
    write_mask(BinaryMask(bits), sample_dir / 'gt_masks' / 'img0.png')


def corrupt_sample(sample_dir):
    sample_dir.mkdir(parents=True)
    (sample_dir / 'cloud.ply').write_bytes(b'ply\nformat binary_little_endian 1.0\nelement vertex 5\n')


@pytest.fixture
def config():
    # eps в единицах сцены: 0.4 см при масштабе SCALE
    return PipelineConfig(eps=0.4 * SCALE, n_samples=50)


def test_masks_only_sample(tmp_path, config):
    masks_sample(tmp_path / 'm1')
    result = run_sample(config, tmp_path / 'm1', tmp_path / 'out')
    assert result.ok
    assert [s.stage for s in result.stages] == ['refine_masks', 'eval_seg']
    assert result.warnings == ['unmatched_instances_1']
    assert result.L_cm is None
    seg = pd.read_csv(tmp_path / 'out' / 'seg_metrics.csv').set_index('image')
    assert seg.loc['img0', 'iou'] == pytest.approx(1.0)
    traits = pd.read_csv(tmp_path / 'out' / 'traits.csv')
    assert list(traits.columns) == TRAITS_COLUMNS
    assert traits.loc[0, 'status'] == 'ok'


def test_corrupt_cloud_is_reported_not_raised(tmp_path, config):
    corrupt_sample(tmp_path / 'bad')
    result = run_sample(config, tmp_path / 'bad')
    assert not result.ok
    assert result.error['stage'] == 'load_cloud'
    assert result.error['error_type'] == 'PlyParseError'
    log = json.loads((tmp_path / 'bad' / 'out' / 'stage_log.json').read_text(encoding='utf-8'))
    assert log['stages'][0]['status'] == 'failed'
    traits = pd.read_csv(tmp_path / 'bad' / 'out' / 'traits.csv')
    assert traits.loc[0, 'error_stage'] == 'load_cloud'


def test_empty_sample_fails_discovery(tmp_path, config):
    (tmp_path / 'empty').mkdir()
    result = run_sample(config, tmp_path / 'empty')
    assert result.error['stage'] == 'discover'
    assert result.stages == []


def test_missing_sample_dir_raises(tmp_path, config):
    with pytest.raises(EmptyResultError):
        run_sample(config, tmp_path / 'absent')


def test_discover_samples(tmp_path):
    masks_sample(tmp_path / 'b')
    corrupt_sample(tmp_path / 'a')
    (tmp_path / 'notes').mkdir()
    assert [p.name for p in discover_samples(tmp_path)] == ['a', 'b']
    with pytest.raises(EmptyResultError):
        discover_samples(tmp_path / 'absent')


def test_batch_with_failure(tmp_path, config):
    root = tmp_path / 'root'
    corrupt_sample(root / 'bad')
    masks_sample(root / 'good')
    batch = run_batch(config, root, tmp_path / 'out')
    assert batch.summary['n_samples'] == 2
    assert batch.summary['n_failed'] == 1
    assert batch.summary['failures'][0]['sample_id'] == 'bad'
    assert batch.summary['metrics'] == {}
    table = pd.read_csv(tmp_path / 'out' / 'batch.csv')
    assert table['sample_id'].tolist() == ['bad', 'good']
    assert table['status'].tolist() == ['failed', 'ok']
    errors = pd.read_csv(tmp_path / 'out' / 'errors.csv')
    assert errors['stage'].tolist() == ['load_cloud']
    assert (tmp_path / 'out' / 'timings.txt').is_file()
    assert list_batches(tmp_path / 'out')[0]['samples_failed'] == 1


def csv_bytes(out_dir):
    return {str(p.relative_to(out_dir)): p.read_bytes() for p in sorted(out_dir.rglob('*.csv'))}


def test_batch_rerun_is_byte_identical_and_parallel_matches(tmp_path, config):
    root = tmp_path / 'root'
    masks_sample(root / 'm1')
    masks_sample(root / 'm2')
    corrupt_sample(root / 'bad')
    run_batch(config, root, tmp_path / 'first')
    run_batch(config, root, tmp_path / 'second')
    run_batch(config, root, tmp_path / 'parallel', workers=2)

    first = csv_bytes(tmp_path / 'first')
    assert {'batch.csv', 'errors.csv', 'pairs.csv', 'm1/traits.csv'} <= set(first)
    assert csv_bytes(tmp_path / 'second') == first
    # строки упорядочены по sample_id, поэтому параллельный запуск совпадает побайтно
    assert csv_bytes(tmp_path / 'parallel') == first


def test_batch_without_samples(tmp_path, config):
    (tmp_path / 'root').mkdir()
    with pytest.raises(EmptyResultError):
        run_batch(config, tmp_path / 'root', tmp_path / 'out')


@pytest.mark.slow
def test_scene_sample_end_to_end(tmp_path, config):
    scene_sample(tmp_path / 's1', seed=1, length_cm=20.0)
    result = run_sample(config, tmp_path / 's1')
    assert result.ok, result.error
    assert result.L_cm == pytest.approx(20.0, rel=0.05)
    assert result.x1 == pytest.approx(7.5 * SCALE, rel=0.01)
    assert result.num_voxels > 0 and result.V_cm3 > 0
    out = tmp_path / 's1' / 'out'
    for name in ('panicle.ply', 'label.ply', 'cluster.json', 'calib.json', 'traits.csv', 'stage_log.json'):
        assert (out / name).is_file()


@pytest.mark.slow
def test_scene_batch_pairs_and_report(tmp_path, config):
    root = tmp_path / 'root'
    scene_sample(root / 's1', seed=1, length_cm=20.0)
    scene_sample(root / 's2', seed=2, length_cm=16.0)
    batch = run_batch(config, root, tmp_path / 'out')
    assert batch.summary['n_ok'] == 2
    pairs = pd.read_csv(tmp_path / 'out' / 'pairs.csv')
    assert pairs['trait'].tolist() == ['L_cm', 'L_cm', 'V_cm3', 'V_cm3']
    np.testing.assert_allclose(pairs[pairs['trait'] == 'L_cm']['measured'], [20.0, 16.0])
    assert batch.summary['metrics']['L_cm']['n'] == 2
    assert (tmp_path / 'out' / 'report' / 'metrics.csv').is_file()


@pytest.mark.slow
def test_scene_batch_parallel_equals_serial(tmp_path, config):
    root = tmp_path / 'root'
    scene_sample(root / 's1', seed=3, length_cm=18.0)
    masks_sample(root / 'm1')
    run_batch(config, root, tmp_path / 'serial')
    run_batch(config, root, tmp_path / 'parallel', workers=2)
    serial = csv_bytes(tmp_path / 'serial')
    assert 's1/traits.csv' in serial
    assert csv_bytes(tmp_path / 'parallel') == serial
