"""
Хранилище результатов пакетных запусков (SQLite через SQLAlchemy).
Только дозапись: каждый run-batch добавляет BatchRun и строки SampleRecord.
Здесь же хранятся времена этапов и отметки времени, которые не попадают в CSV.
"""

import json
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Iterable, List

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, relationship

Base = declarative_base()

DB_FILENAME = 'results.db'


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


# ==================== ПАКЕТНЫЙ ЗАПУСК ====================

class BatchRun(Base):
    """Один вызов run-batch."""

    __tablename__ = 'batch_runs'

    id = Column(Integer, primary_key=True)
    root = Column(String(512), nullable=False)
    started_at = Column(DateTime, default=_utcnow)
    finished_at = Column(DateTime, nullable=True)

    samples_total = Column(Integer, default=0)
    samples_failed = Column(Integer, default=0)
    workers = Column(Integer, default=1)
    seed = Column(Integer, default=0)

    # Конфигурация в виде текста файла «ключ = значение»
    config_text = Column(Text, nullable=True)

    samples = relationship('SampleRecord', back_populates='batch', cascade='all, delete-orphan')

    def __repr__(self):
        return f'<BatchRun {self.id} {self.root}>'

    def to_dict(self) -> dict:
        return {
            'id': self.id,
            'root': self.root,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
            'samples_total': self.samples_total,
            'samples_failed': self.samples_failed,
            'workers': self.workers,
            'seed': self.seed,
        }


# ==================== РЕЗУЛЬТАТ ОБРАЗЦА ====================

class SampleRecord(Base):
    """Результат одного образца внутри пакетного запуска."""

    __tablename__ = 'sample_results'

    id = Column(Integer, primary_key=True)
    batch_id = Column(Integer, ForeignKey('batch_runs.id'), nullable=False)
    sample_id = Column(String(256), nullable=False)
    status = Column(String(20), default='ok')  # 'ok', 'failed'

    # Признаки
    L_cm = Column(Float, nullable=True)
    L1 = Column(Float, nullable=True)
    x1 = Column(Float, nullable=True)
    num_voxels = Column(Integer, nullable=True)
    V_cm3 = Column(Float, nullable=True)

    # Ошибка этапа
    error_stage = Column(String(50), nullable=True)
    error_message = Column(Text, nullable=True)

    # JSON: {этап: секунды} и список предупреждений
    timings_json = Column(Text, default='{}')
    warnings_json = Column(Text, default='[]')
    elapsed_total = Column(Float, default=0.0)
    created_at = Column(DateTime, default=_utcnow)

    batch = relationship('BatchRun', back_populates='samples')

    def __repr__(self):
        return f'<SampleRecord {self.sample_id} {self.status}>'

    def to_dict(self) -> dict:
        return {
            'id': self.id,
            'batch_id': self.batch_id,
            'sample_id': self.sample_id,
            'status': self.status,
            'L_cm': self.L_cm,
            'L1': self.L1,
            'x1': self.x1,
            'num_voxels': self.num_voxels,
            'V_cm3': self.V_cm3,
            'error_stage': self.error_stage,
            'error_message': self.error_message,
            'timings': json.loads(self.timings_json or '{}'),
            'warnings': json.loads(self.warnings_json or '[]'),
            'elapsed_total': self.elapsed_total,
            'created_at': self.created_at.isoformat() if self.created_at else None,
        }


# ==================== ДОСТУП ====================

@lru_cache(maxsize=None)
def get_engine(path: str) -> Engine:
    """Один engine на файл базы на процесс."""
    return create_engine(f"sqlite:///{path}")


def open_store(out_dir) -> Session:
    """Сессия к <out_dir>/results.db; недостающие таблицы создаются."""
    engine = get_engine(str((Path(out_dir) / DB_FILENAME).resolve()))
    Base.metadata.create_all(engine)
    return Session(engine)


def record_batch(out_dir, batch: BatchRun, samples: Iterable[SampleRecord]) -> int:
    """Дописывает запуск с образцами; возвращает id запуска."""
    with open_store(out_dir) as session:
        batch.samples.extend(samples)
        session.add(batch)
        session.commit()
        return batch.id


def list_batches(out_dir) -> List[dict]:
    with open_store(out_dir) as session:
        return [b.to_dict() for b in session.query(BatchRun).order_by(BatchRun.id)]
