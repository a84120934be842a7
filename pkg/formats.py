"""
Форматы файлов: PLY (ASCII и binary_little_endian), JSON с позами камер,
маски PNG/PGM, RGBA-изображения и решётки плотности (JSON-заголовок + raw float32).
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from errors import FormatError, PlyParseError
from geometry import BinaryMask, CameraPose, DensityGrid, PointCloud

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Типы свойств PLY -> dtype numpy (little-endian)
PLY_TYPES = {
    'char': 'i1', 'int8': 'i1',
    'uchar': 'u1', 'uint8': 'u1',
    'short': '<i2', 'int16': '<i2',
    'ushort': '<u2', 'uint16': '<u2',
    'int': '<i4', 'int32': '<i4',
    'uint': '<u4', 'uint32': '<u4',
    'float': '<f4', 'float32': '<f4',
    'double': '<f8', 'float64': '<f8',
}

COLOR_NAMES = ('red', 'green', 'blue')
NORMAL_NAMES = ('nx', 'ny', 'nz')

# Порог переднего плана для 8-битных масок
MASK_THRESHOLD = 128


# ==================== PLY ====================

class _PlyElement:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        # (имя, dtype) для скалярных свойств или (имя, (dtype длины, dtype значения)) для списков
        self.properties: List[Tuple[str, object]] = []

    @property
    def has_lists(self) -> bool:
        return any(isinstance(t, tuple) for _, t in self.properties)

    def scalar_dtype(self) -> np.dtype:
        return np.dtype([(name, t) for name, t in self.properties])


def _parse_header(data: bytes) -> Tuple[str, List[_PlyElement], int]:
    """Разбор заголовка. Возвращает (формат, элементы, смещение начала тела)."""
    if not data.startswith(b'ply'):
        raise PlyParseError("Файл не начинается с 'ply'", 0)

    fmt = None
    elements: List[_PlyElement] = []
    offset = 0
    while True:
        end = data.find(b'\n', offset)
        if end < 0:
            raise PlyParseError("Заголовок не завершён строкой end_header", offset)
        line = data[offset:end].decode('ascii', errors='replace').strip()
        line_offset = offset
        offset = end + 1

        if not line or line == 'ply' or line.startswith(('comment', 'obj_info')):
            continue
        tokens = line.split()
        keyword = tokens[0]

        if keyword == 'end_header':
            break
        if keyword == 'format':
            if len(tokens) != 3 or tokens[1] not in ('ascii', 'binary_little_endian'):
                raise PlyParseError(f"Неподдерживаемый формат: '{line}'", line_offset)
            fmt = tokens[1]
        elif keyword == 'element':
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyParseError(f"Некорректное описание элемента: '{line}'", line_offset)
            elements.append(_PlyElement(tokens[1], int(tokens[2])))
        elif keyword == 'property':
            if not elements:
                raise PlyParseError("Свойство вне элемента", line_offset)
            if len(tokens) == 5 and tokens[1] == 'list':
                if tokens[2] not in PLY_TYPES or tokens[3] not in PLY_TYPES:
                    raise PlyParseError(f"Неподдерживаемый тип списка: '{line}'", line_offset)
                elements[-1].properties.append((tokens[4], (PLY_TYPES[tokens[2]], PLY_TYPES[tokens[3]])))
            elif len(tokens) == 3:
                if tokens[1] not in PLY_TYPES:
                    raise PlyParseError(f"Неподдерживаемый тип свойства: '{tokens[1]}'", line_offset)
                elements[-1].properties.append((tokens[2], PLY_TYPES[tokens[1]]))
            else:
                raise PlyParseError(f"Некорректное свойство: '{line}'", line_offset)
        else:
            raise PlyParseError(f"Неизвестная строка заголовка: '{line}'", line_offset)

    if fmt is None:
        raise PlyParseError("В заголовке нет строки format", 0)
    return fmt, elements, offset


def _skip_binary_element(data: bytes, element: _PlyElement, offset: int) -> int:
    """Пропускает элемент в бинарном теле и возвращает новое смещение."""
    if not element.has_lists:
        size = element.scalar_dtype().itemsize * element.count
        if offset + size > len(data):
            raise PlyParseError(f"Тело обрезано внутри элемента '{element.name}'", len(data))
        return offset + size
    for _ in range(element.count):
        for _, ptype in element.properties:
            if isinstance(ptype, tuple):
                len_dtype, val_dtype = np.dtype(ptype[0]), np.dtype(ptype[1])
                if offset + len_dtype.itemsize > len(data):
                    raise PlyParseError(f"Тело обрезано внутри элемента '{element.name}'", len(data))
                n = int(np.frombuffer(data, dtype=len_dtype, count=1, offset=offset)[0])
                offset += len_dtype.itemsize + n * val_dtype.itemsize
            else:
                offset += np.dtype(ptype).itemsize
            if offset > len(data):
                raise PlyParseError(f"Тело обрезано внутри элемента '{element.name}'", len(data))
    return offset


def _cloud_from_columns(columns: Dict[str, np.ndarray], offset: int) -> PointCloud:
    for name in ('x', 'y', 'z'):
        if name not in columns:
            raise PlyParseError(f"У вершин нет свойства '{name}'", offset)
    points = np.column_stack([columns[n].astype(np.float64) for n in ('x', 'y', 'z')])

    normals = None
    if all(n in columns for n in NORMAL_NAMES):
        normals = np.column_stack([columns[n].astype(np.float64) for n in NORMAL_NAMES])
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        # float32-нормали из сторонних программ доводим до единичной длины
        if len(normals) and np.all(norms > 0):
            normals = normals / norms
        else:
            normals = None
    colors = None
    if all(n in columns for n in COLOR_NAMES):
        colors = np.column_stack([columns[n] for n in COLOR_NAMES]).astype(np.uint8)
    try:
        return PointCloud(points=points, normals=normals, colors=colors)
    except ValueError as e:
        raise PlyParseError(f"Недопустимые значения вершин: {e}", offset) from e


def read_ply(path: PathLike) -> PointCloud:
    """Чтение облака точек из PLY (ASCII или binary_little_endian)."""
    data = Path(path).read_bytes()
    fmt, elements, body = _parse_header(data)

    vertex = next((e for e in elements if e.name == 'vertex'), None)
    if vertex is None:
        raise PlyParseError("В файле нет элемента 'vertex'", body)
    if any(isinstance(t, tuple) for _, t in vertex.properties):
        raise PlyParseError("Списочные свойства у вершин не поддерживаются", body)

    if fmt == 'binary_little_endian':
        offset = body
        for element in elements:
            if element is vertex:
                break
            offset = _skip_binary_element(data, element, offset)
        dtype = vertex.scalar_dtype()
        if offset + dtype.itemsize * vertex.count > len(data):
            raise PlyParseError(
                f"Тело обрезано: ожидалось {vertex.count} вершин по {dtype.itemsize} байт", len(data)
            )
        records = np.frombuffer(data, dtype=dtype, count=vertex.count, offset=offset)
        columns = {name: records[name] for name, _ in vertex.properties}
        return _cloud_from_columns(columns, offset)

    return _read_ascii_body(data, elements, vertex, body)


def _read_ascii_body(data: bytes, elements: List[_PlyElement], vertex: _PlyElement, body: int) -> PointCloud:
    offset = body
    lines_before = 0
    for element in elements:
        if element is vertex:
            break
        lines_before += element.count

    # Пропускаем строки предыдущих элементов
    for _ in range(lines_before):
        end = data.find(b'\n', offset)
        if end < 0:
            raise PlyParseError("Тело обрезано", len(data))
        offset = end + 1

    names = [name for name, _ in vertex.properties]
    rows = np.empty((vertex.count, len(names)), dtype=np.float64)
    for i in range(vertex.count):
        end = data.find(b'\n', offset)
        if end < 0:
            end = len(data)
        line = data[offset:end].split()
        if len(line) != len(names):
            if offset >= len(data):
                raise PlyParseError(f"Тело обрезано: прочитано {i} из {vertex.count} вершин", len(data))
            raise PlyParseError(
                f"Вершина {i}: ожидалось {len(names)} значений, получено {len(line)}", offset
            )
        try:
            rows[i] = [float(v) for v in line]
        except ValueError as e:
            raise PlyParseError(f"Вершина {i}: нечисловое значение", offset) from e
        offset = end + 1

    columns = {name: rows[:, j] for j, name in enumerate(names)}
    return _cloud_from_columns(columns, body)


def write_ply(cloud: PointCloud, path: PathLike, binary: bool = True) -> Path:
    """Запись облака в PLY. Координаты пишутся как double (без потерь)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fields = [('x', '<f8'), ('y', '<f8'), ('z', '<f8')]
    if cloud.normals is not None:
        fields += [(n, '<f8') for n in NORMAL_NAMES]
    if cloud.colors is not None:
        fields += [(n, 'u1') for n in COLOR_NAMES]
    ply_names = {'<f8': 'double', 'u1': 'uchar'}

    header = ['ply', f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {ply_names[t]} {name}" for name, t in fields]
    header.append('end_header')
    header_bytes = ('\n'.join(header) + '\n').encode('ascii')

    records = np.empty(len(cloud), dtype=np.dtype(fields))
    for axis, name in enumerate('xyz'):
        records[name] = cloud.points[:, axis]
    if cloud.normals is not None:
        for axis, name in enumerate(NORMAL_NAMES):
            records[name] = cloud.normals[:, axis]
    if cloud.colors is not None:
        for axis, name in enumerate(COLOR_NAMES):
            records[name] = cloud.colors[:, axis]

    with open(path, 'wb') as f:
        f.write(header_bytes)
        if binary:
            f.write(records.tobytes())
        else:
            for rec in records:
                f.write((' '.join(repr(v.item()) for v in rec) + '\n').encode('ascii'))
    return path


# ==================== ПОЗЫ КАМЕР ====================

def poses_from_matrices(matrices: Sequence[np.ndarray]) -> List[CameraPose]:
    """
    Позы из матриц camera-to-world 4x4. Соглашение: view_dir = −(третий столбец R).
    """
    poses = []
    for i, m in enumerate(matrices):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise FormatError(f"Матрица позы {i} должна быть 4x4, получено {m.shape}")
        poses.append(CameraPose.create(position=m[:3, 3], view_dir=-m[:3, 2]))
    return poses


def read_poses(path: PathLike) -> Tuple[List[CameraPose], List[str]]:
    """
    Чтение поз из JSON-массива. Запись - либо {position, view_dir}, либо
    {matrix: 4x4 camera-to-world}; image_id необязателен.
    """
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"Ошибка JSON в {path}: {e}") from e
    if not isinstance(records, list):
        raise FormatError(f"{path}: ожидался JSON-массив записей")

    poses, image_ids = [], []
    for i, rec in enumerate(records):
        try:
            if 'matrix' in rec:
                pose = poses_from_matrices([rec['matrix']])[0]
            else:
                pose = CameraPose.create(rec['position'], rec['view_dir'])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: некорректная запись позы #{i}: {e}") from e
        poses.append(pose)
        image_ids.append(str(rec.get('image_id', f"{i:04d}")))
    return poses, image_ids


def write_poses(poses: Sequence[CameraPose], image_ids: Sequence[str], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [
        {'image_id': image_id, 'position': pose.position.tolist(), 'view_dir': pose.view_dir.tolist()}
        for pose, image_id in zip(poses, image_ids)
    ]
    path.write_text(json.dumps(records, indent=2))
    return path


# ==================== МАСКИ И ИЗОБРАЖЕНИЯ ====================

def read_mask(path: PathLike) -> BinaryMask:
    """8-битная маска PNG/PGM; значение >= 128 - передний план."""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FormatError(f"Не удалось прочитать маску {path}")
    if image.dtype != np.uint8:
        raise FormatError(f"Маска {path} должна быть 8-битной, получено {image.dtype}")
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2GRAY if image.shape[2] == 4 else cv2.COLOR_BGR2GRAY)
    return BinaryMask(image >= MASK_THRESHOLD)


def write_mask(mask: BinaryMask, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), mask.bits.astype(np.uint8) * 255):
        raise FormatError(f"Не удалось записать маску {path}")
    return path


def read_rgb(path: PathLike) -> np.ndarray:
    """RGB-растр (h, w, 3) uint8."""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise FormatError(f"Не удалось прочитать изображение {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def write_rgba(rgba: np.ndarray, path: PathLike) -> Path:
    """Запись RGBA-растра в PNG с прозрачностью."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(rgba), cv2.COLOR_RGBA2BGRA)):
        raise FormatError(f"Не удалось записать изображение {path}")
    return path


# ==================== РЕШЁТКИ ПЛОТНОСТИ ====================

def read_grid(path: PathLike) -> DensityGrid:
    """
    Решётка из JSON-заголовка {dims, origin, spacing, data, dtype} и raw-файла
    little-endian float32 в порядке C по форме (nx, ny, nz).
    """
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        dims = tuple(int(d) for d in header['dims'])
        raw_path = path.parent / header.get('data', path.with_suffix('.raw').name)
        dtype = np.dtype(header.get('dtype', '<f4'))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Некорректный заголовок решётки {path}: {e}") from e

    if len(dims) != 3:
        raise FormatError(f"{path}: dims должен содержать 3 числа")
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{raw_path}: ожидалось {expected} байт, получено {len(raw)}")
    values = np.frombuffer(raw, dtype=dtype).reshape(dims)
    try:
        return DensityGrid(values=values, origin=header.get('origin', [0, 0, 0]),
                           spacing=header.get('spacing', [1, 1, 1]))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_grid(grid: DensityGrid, path: PathLike, raw_name: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_name = raw_name or path.with_suffix('.raw').name
    (path.parent / raw_name).write_bytes(grid.values.astype('<f4').tobytes(order='C'))
    header = {
        'dims': list(grid.dims),
        'origin': grid.origin.tolist(),
        'spacing': grid.spacing.tolist(),
        'dtype': '<f4',
        'data': raw_name,
    }
    path.write_text(json.dumps(header, indent=2))
    return path
