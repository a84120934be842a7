"""
Конфигурация конвейера: плоский файл «ключ = значение» (python-dotenv)
-> PipelineConfig (pydantic). Порядок поиска: --config, затем переменная
окружения PANICLE_CONFIG, затем значения по умолчанию.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError
from traits import LBCParams

logger = logging.getLogger(__name__)

CONFIG_ENV = 'PANICLE_CONFIG'


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    # ==================== Ракурсы и маски ====================
    max_angle_deg: float = Field(20.0, gt=0, lt=180)
    min_area: int = Field(10000, ge=0)
    min_stability: float = Field(0.8, ge=0, le=1)
    erosion_radius: int = Field(5, ge=0)
    n_samples: int = Field(200, ge=1)
    containment_min: float = Field(0.5, gt=0, le=1)

    # ==================== Экспорт облака ====================
    iso: Union[Literal['auto'], float] = 'auto'
    # точек на единицу площади; None - 2 точки на грань ячейки решётки
    export_density: Optional[float] = Field(None, gt=0)

    # ==================== Кластеризация и калибровка ====================
    eps: Optional[float] = Field(None, gt=0)
    eps_factor: float = Field(2.5, gt=0)
    min_pts: int = Field(10, ge=1)
    min_cluster_frac: float = Field(0.01, ge=0, lt=1)
    sigma_max: float = Field(0.02, gt=0, lt=1)
    kappa_min: float = Field(0.9, ge=0, le=1)
    label_length_cm: float = Field(7.5, gt=0)
    refine_label_edges: bool = True

    # ==================== Скелет и длина ====================
    lbc_k: int = Field(16, ge=2)
    lbc_w_l: float = Field(1.0, gt=0)
    lbc_w_h: float = Field(1.0, gt=0)
    lbc_s_l: float = Field(3.0, ge=1)
    lbc_max_iters: int = Field(20, ge=1)
    lbc_converge_ratio: float = Field(0.01, gt=0, lt=1)
    downsample_frac: float = Field(0.005, ge=0, lt=0.1)
    node_spacing_frac: float = Field(0.02, gt=0, lt=0.5)
    theta_max_deg: float = Field(60.0, gt=0, le=180)
    tangent_scales: Tuple[int, ...] = (1, 3)
    smoothing: float = Field(1e-3, ge=0)
    extend_tips: bool = True

    # ==================== Объём ====================
    voxel: float = Field(0.01, gt=0, lt=1)

    # ==================== Запуск ====================
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    html_report: bool = False

    @field_validator('eps', 'export_density', mode='before')
    @classmethod
    def _auto_to_none(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ('', 'auto', 'none'):
            return None
        return value

    @field_validator('tangent_scales', mode='before')
    @classmethod
    def _split_scales(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(' ', '').split(',') if part)
        return value

    @field_validator('tangent_scales')
    @classmethod
    def _check_scales(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(s < 1 for s in value):
            raise ValueError(f"масштабы касательных должны быть >= 1: {value}")
        return value

    def lbc_params(self) -> LBCParams:
        return LBCParams(k_neighbors=self.lbc_k, w_l_init=self.lbc_w_l, w_h_init=self.lbc_w_h,
                         s_l=self.lbc_s_l, max_iters=self.lbc_max_iters, converge_ratio=self.lbc_converge_ratio)

    def to_conf_text(self) -> str:
        """Текст в формате файла конфигурации (все ключи, по алфавиту)."""
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if value is None:
                value = 'auto'
            elif isinstance(value, bool):
                value = 'true' if value else 'false'
            elif isinstance(value, tuple):
                value = ','.join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return '\n'.join(lines) + '\n'


def _validate(values: Dict[str, Any], source: str) -> PipelineConfig:
    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        problems = '; '.join(f"{'.'.join(str(p) for p in err['loc']) or '?'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Ошибка конфигурации ({source}): {problems}") from e


def read_config_file(path) -> Dict[str, Optional[str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Файл конфигурации не найден: {path}")
    values = dotenv_values(path)
    return {key.strip().lower(): value for key, value in values.items()}


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Загружает конфигурацию; overrides (например, --seed, --workers)
    перекрывают значения из файла. Неизвестные ключи - ConfigError.
    """
    source = 'по умолчанию'
    values: Dict[str, Any] = {}
    path = path or os.environ.get(CONFIG_ENV) or None
    if path:
        values = read_config_file(path)
        source = str(path)
        logger.info(f"[STARTUP] Конфигурация загружена из {path}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return _validate(values, source)
