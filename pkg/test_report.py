import numpy as np
import pandas as pd

from evaluation import PairedSeries, correlation_matrix
from report import report, scatter_svg, series_matrix, write_metrics


def make_series():
    return [
        PairedSeries(predicted=[10.2, 19.5, 30.4, 41.0], measured=[10.0, 20.0, 30.0, 40.0], units='cm', name='L_cm'),
        PairedSeries(predicted=[1.1, 2.2, 2.9], measured=[1.0, 2.0, 3.0], units='cm3', name='V_cm3'),
    ]


def test_write_metrics_without_series_writes_header(tmp_path):
    path = write_metrics([], tmp_path)
    assert path.read_text().strip() == 'trait,n,r2,rmse,rrmse'


def test_report_writes_all_files(tmp_path):
    matrix = correlation_matrix({'a': [1.0, 2.0, 3.0], 'b': [2.0, 1.0, 4.0]})
    written = report(make_series(), matrix, tmp_path / 'out', html=True)
    names = sorted(p.name for p in written)
    assert names == ['corr.csv', 'heatmap.svg', 'metrics.csv', 'report.html',
                     'scatter_L_cm.svg', 'scatter_V_cm3.svg']
    metrics = pd.read_csv(tmp_path / 'out' / 'metrics.csv')
    assert metrics['trait'].tolist() == ['L_cm', 'V_cm3']
    assert metrics['n'].tolist() == [4, 3]
    html = (tmp_path / 'out' / 'report.html').read_text(encoding='utf-8')
    assert 'scatter_L_cm' in html and 'heatmap' in html


def test_scatter_svg_is_reproducible(tmp_path):
    s = make_series()[0]
    a = scatter_svg(s, tmp_path / 'a.svg').read_bytes()
    b = scatter_svg(s, tmp_path / 'b.svg').read_bytes()
    assert a == b
    assert a.lstrip().startswith(b'<?xml')


def test_series_matrix_skips_constant_and_missing_columns():
    frame = pd.DataFrame({'L_cm': [1.0, 2.0, 3.0], 'V_cm3': [2.0, 4.0, 5.0], 'flat': [1.0, 1.0, 1.0],
                          'grain_count': [None, 3, 4]})
    matrix = series_matrix(frame, ['L_cm', 'V_cm3', 'flat', 'grain_count', 'absent'])
    assert list(matrix.columns) == ['L_cm', 'V_cm3']
    assert series_matrix(frame, ['L_cm', 'flat']) is None
    np.testing.assert_allclose(np.diag(matrix), 1.0)
