"""
Отчёты оценки: metrics.csv, corr.csv, диаграммы рассеяния и тепловая карта
корреляций в SVG (байт-в-байт воспроизводимые) и интерактивный report.html.
"""

import logging
import re
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib
import numpy as np
import pandas as pd
import plotly.graph_objects as go
from matplotlib.figure import Figure

from evaluation import METRICS_COLUMNS, PairedSeries, correlation_matrix, regression_metrics

logger = logging.getLogger(__name__)

# Фиксированная соль id элементов SVG и отсутствие даты - одинаковые файлы при повторном запуске
matplotlib.rcParams['svg.hashsalt'] = 'panicle'
SVG_METADATA = {'Date': None}
FLOAT_FORMAT = '%.6f'


def _safe_name(name: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.-]+', '_', name) or 'trait'


def _save_svg(fig: Figure, path: Path) -> Path:
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    return path


def write_metrics(series: Sequence[PairedSeries], out_dir) -> Path:
    """metrics.csv: R², RMSE, rRMSE по каждому признаку; без рядов - только заголовок."""
    out_dir = Path(out_dir)
    rows = [regression_metrics(s).to_dict() for s in sorted(series, key=lambda s: s.name)]
    path = out_dir / 'metrics.csv'
    pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def scatter_svg(s: PairedSeries, path) -> Path:
    """Предсказание против измерения, линия 1:1 и подпись с метриками."""
    metrics = regression_metrics(s)
    fig = Figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot()
    lo = float(min(s.measured.min(), s.predicted.min()))
    hi = float(max(s.measured.max(), s.predicted.max()))
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color='#6b7280', linestyle='--', linewidth=1)
    ax.scatter(s.measured, s.predicted, s=18, color='#22c55e', edgecolors='#166534')
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    units = f" ({s.units})" if s.units else ''
    ax.set_xlabel(f"measured {s.name}{units}")
    ax.set_ylabel(f"predicted {s.name}{units}")
    ax.text(0.04, 0.96, f"R² = {metrics.r2:.4f}\nRMSE = {metrics.rmse:.4f}\nrRMSE = {metrics.rrmse:.2f}%",
            transform=ax.transAxes, va='top', ha='left', fontsize=9)
    fig.tight_layout()
    return _save_svg(fig, Path(path))


def heatmap_svg(matrix: pd.DataFrame, path) -> Path:
    names = list(matrix.columns)
    fig = Figure(figsize=(1.2 * len(names) + 2, 1.2 * len(names) + 1.5))
    ax = fig.add_subplot()
    image = ax.imshow(matrix.to_numpy(), cmap='RdBu_r', vmin=-1, vmax=1)
    ax.set_xticks(range(len(names)), labels=names, rotation=45, ha='right')
    ax.set_yticks(range(len(names)), labels=names)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{matrix.iat[i, j]:.2f}", ha='center', va='center', fontsize=8)
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    return _save_svg(fig, Path(path))


def write_correlation(matrix: pd.DataFrame, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    csv_path = out_dir / 'corr.csv'
    matrix.to_csv(csv_path, float_format=FLOAT_FORMAT)
    return [csv_path, heatmap_svg(matrix, out_dir / 'heatmap.svg')]


def write_html(series: Sequence[PairedSeries], matrix: Optional[pd.DataFrame], path) -> Path:
    """Те же графики в интерактивном виде (plotly.js с CDN)."""
    parts = []
    for s in sorted(series, key=lambda s: s.name):
        fig = go.Figure()
        lo = float(min(s.measured.min(), s.predicted.min()))
        hi = float(max(s.measured.max(), s.predicted.max()))
        fig.add_trace(go.Scatter(x=[lo, hi], y=[lo, hi], mode='lines', name='1:1',
                                 line={'dash': 'dash', 'color': '#6b7280'}))
        fig.add_trace(go.Scatter(x=s.measured.tolist(), y=s.predicted.tolist(), mode='markers', name=s.name))
        fig.update_layout(title=f"{s.name}: R² = {regression_metrics(s).r2:.4f}",
                          xaxis_title='measured', yaxis_title='predicted', template='plotly_white')
        parts.append(fig.to_html(full_html=False, include_plotlyjs=False, div_id=f"scatter_{_safe_name(s.name)}"))

    if matrix is not None:
        fig = go.Figure(go.Heatmap(z=matrix.to_numpy(), x=list(matrix.columns), y=list(matrix.index),
                                   zmin=-1, zmax=1, colorscale='RdBu', reversescale=True))
        fig.update_layout(title='Correlation matrix', template='plotly_white')
        parts.append(fig.to_html(full_html=False, include_plotlyjs=False, div_id='heatmap'))

    html = ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>PanicleLab report</title>\n"
            "<script src=\"https://cdn.plot.ly/plotly-2.35.2.min.js\"></script></head>\n<body>\n"
            + "\n".join(parts) + "\n</body></html>\n")
    path = Path(path)
    path.write_text(html, encoding='utf-8')
    return path


def report(series: Sequence[PairedSeries], matrix: Optional[pd.DataFrame], out_dir,
           html: bool = False) -> List[Path]:
    """Все файлы отчёта в out_dir; возвращает список путей."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_metrics(series, out_dir)]
    for s in sorted(series, key=lambda s: s.name):
        written.append(scatter_svg(s, out_dir / f"scatter_{_safe_name(s.name)}.svg"))
    if matrix is not None:
        written.extend(write_correlation(matrix, out_dir))
    if html:
        written.append(write_html(series, matrix, out_dir / 'report.html'))
    logger.info(f"Отчёт: записано {len(written)} файлов в {out_dir}")
    return written


def series_matrix(frame: pd.DataFrame, columns: Sequence[str]) -> Optional[pd.DataFrame]:
    """Матрица корреляций по доступным колонкам с ненулевой дисперсией; None, если их меньше двух."""
    usable = []
    for column in columns:
        if column in frame.columns:
            values = pd.to_numeric(frame[column], errors='coerce')
            if values.notna().all() and len(values) >= 2 and float(np.std(values)) > 0:
                usable.append(column)
    if len(usable) < 2:
        return None
    return correlation_matrix({c: frame[c].to_numpy(dtype=np.float64) for c in usable})
