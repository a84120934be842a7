from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np
import pandas as pd

from errors import FormatError

PAIRS_COLUMNS = ['sample_id', 'trait', 'predicted', 'measured']
METRICS_COLUMNS = ['trait', 'n', 'r2', 'rmse', 'rrmse']


@dataclass
class PairedSeries:
    """Предсказанные и измеренные значения одного признака."""
    predicted: Sequence[float]
    measured: Sequence[float]
    units: str = ''
    name: str = ''

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1)
        self.measured = np.asarray(self.measured, dtype=np.float64).reshape(-1)
        if len(self.predicted) != len(self.measured):
            raise ValueError(f"Длины рядов не совпадают: {len(self.predicted)} != {len(self.measured)}")
        if len(self.measured) < 2:
            raise ValueError(f"Нужно минимум 2 пары значений, получено {len(self.measured)}")
        if not (np.all(np.isfinite(self.predicted)) and np.all(np.isfinite(self.measured))):
            raise ValueError("Ряды содержат NaN/Inf")

    def __len__(self) -> int:
        return len(self.measured)


def r_squared(s: PairedSeries) -> float:
    """Коэффициент детерминации 1 − SS_res / SS_tot относительно измеренных значений."""
    residual = s.measured - s.predicted
    centered = s.measured - s.measured.mean()
    ss_tot = float(np.dot(centered, centered))
    if ss_tot == 0:
        raise ValueError(f"Измеренные значения '{s.name}' не меняются, R² не определён")
    return 1.0 - float(np.dot(residual, residual)) / ss_tot


def rmse(s: PairedSeries) -> float:
    residual = s.measured - s.predicted
    return float(np.sqrt(np.mean(residual ** 2)))


def rrmse(s: PairedSeries) -> float:
    """rRMSE в процентах; знаменатель - среднее измеренных значений."""
    mean = float(s.measured.mean())
    if mean == 0:
        raise ValueError("Среднее измеренных значений равно 0, rRMSE не определён")
    return 100.0 * rmse(s) / mean


def correlation_matrix(series: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Матрица Пирсона; диагональ = 1, симметрична."""
    data = {name: np.asarray(values, dtype=np.float64).reshape(-1) for name, values in series.items()}
    lengths = {len(v) for v in data.values()}
    if len(lengths) > 1:
        raise ValueError(f"Векторы разной длины: {sorted(lengths)}")
    if lengths and lengths.pop() < 2:
        raise ValueError("Для корреляции нужно минимум 2 значения в каждом векторе")
    frame = pd.DataFrame(data)
    flat = [name for name in frame.columns if frame[name].nunique() < 2]
    if flat:
        raise ValueError(f"Вектор '{flat[0]}' имеет нулевую дисперсию")

    matrix = np.clip(frame.corr(method='pearson').to_numpy(copy=True), -1.0, 1.0)
    np.fill_diagonal(matrix, 1.0)
    return pd.DataFrame(matrix, index=frame.columns, columns=frame.columns)


@dataclass
class RegressionMetrics:
    trait: str
    n: int
    r2: float
    rmse: float
    rrmse: float

    def to_dict(self) -> dict:
        return {'trait': self.trait, 'n': self.n, 'r2': self.r2, 'rmse': self.rmse, 'rrmse': self.rrmse}


def regression_metrics(s: PairedSeries) -> RegressionMetrics:
    return RegressionMetrics(trait=s.name, n=len(s), r2=r_squared(s), rmse=rmse(s), rrmse=rrmse(s))


def read_pairs(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = [c for c in PAIRS_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"В {path} нет колонок: {', '.join(missing)}")
    return df[PAIRS_COLUMNS]


def series_from_pairs(df: pd.DataFrame) -> List[PairedSeries]:
    """Ряды по признакам; порядок признаков и образцов детерминирован."""
    result = []
    for trait, group in sorted(df.groupby('trait'), key=lambda item: str(item[0])):
        group = group.sort_values('sample_id', kind='stable')
        result.append(PairedSeries(predicted=group['predicted'].to_numpy(),
                                   measured=group['measured'].to_numpy(), name=str(trait)))
    return result
