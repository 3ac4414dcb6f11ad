"""
Хранилище признаков: агрегация GeM, L2-нормализация и бинарные форматы CVFT / CVFM.

Порядок записей в файле определяет порядок строк матрицы во всех модулях.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd

from app.constants import (
    DEGENERATE_NORM,
    FEATURE_MAGIC,
    FEATURE_MAP_MAGIC,
    FLAG_NORMALIZED,
    FORMAT_VERSION,
    GEM_EPS,
)
from app.feature_validator import FeatureValidationException
from app.models import FeatureSet, GeoTag, LocalFeatureMap, ViewTag

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# magic, version, view_tag, count, dim, flags
_FEATURE_HEADER = struct.Struct("<4sIIQII")
# magic, version, H, W, dim
_MAP_HEADER = struct.Struct("<4sIIII")
_ID_LENGTH = struct.Struct("<H")


class FeatureFormatException(FeatureValidationException):
    """Исключение для нераспознанных или поврежденных файлов признаков"""
    pass


def gem_pool(feature_map: LocalFeatureMap, p: float = 3.0) -> np.ndarray:
    """
    GeM-агрегация карты признаков в глобальный вектор.

    x_c = (Σ_i clamp(v_ic, ε)^p)^(1/p) - чистая сумма без множителя 1/HW,
    последующая L2-нормализация все равно убирает постоянный множитель.
    """
    if p < 1:
        raise ValueError(f"GeM power must be >= 1, got {p}")

    values = np.asarray(feature_map.values, dtype=np.float64)
    if values.shape[0] * values.shape[1] == 0:
        raise FeatureValidationException("empty feature map")
    if not np.all(np.isfinite(values)):
        raise FeatureValidationException("non-finite feature")

    flat = values.reshape(-1, values.shape[2])
    pooled = np.power(np.power(np.maximum(flat, GEM_EPS), p).sum(axis=0), 1.0 / p)
    if not np.all(np.isfinite(pooled)):
        raise FeatureValidationException("non-finite feature")
    return pooled


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if not norm > DEGENERATE_NORM:
        raise FeatureValidationException("degenerate vector")
    return x / norm


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if matrix.shape[0] and not np.all(norms > DEGENERATE_NORM):
        raise FeatureValidationException("degenerate vector")
    return matrix / norms


def encode_feature_set(feature_set: FeatureSet) -> bytes:
    flags = FLAG_NORMALIZED if feature_set.normalized else 0
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FORMAT_VERSION, int(feature_set.view), len(feature_set), feature_set.dim, flags
    )
    parts = [header, np.ascontiguousarray(feature_set.vectors, dtype="<f4").tobytes()]
    for record_id in feature_set.ids:
        raw = record_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FeatureValidationException(f"record id longer than 65535 bytes: {record_id[:32]!r}...")
        parts.append(_ID_LENGTH.pack(len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_feature_set(payload: bytes) -> FeatureSet:
    if len(payload) < 4 or payload[:4] != FEATURE_MAGIC:
        raise FeatureFormatException("unrecognized format")
    if len(payload) < _FEATURE_HEADER.size:
        raise FeatureFormatException("corrupt feature file: truncated header")

    _, version, view_tag, count, dim, flags = _FEATURE_HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise FeatureFormatException(f"unrecognized format: version {version}")
    if view_tag not in (ViewTag.QUERY, ViewTag.REFERENCE):
        raise FeatureFormatException(f"corrupt feature file: view tag {view_tag}")

    offset = _FEATURE_HEADER.size
    body = count * dim * 4
    if len(payload) < offset + body:
        raise FeatureFormatException("corrupt feature file: truncated vectors")
    vectors = np.frombuffer(payload, dtype="<f4", count=count * dim, offset=offset)
    vectors = vectors.astype(np.float32).reshape(count, dim)
    offset += body

    ids: List[str] = []
    for _ in range(count):
        if len(payload) < offset + _ID_LENGTH.size:
            raise FeatureFormatException("corrupt feature file: truncated ids")
        (length,) = _ID_LENGTH.unpack_from(payload, offset)
        offset += _ID_LENGTH.size
        if len(payload) < offset + length:
            raise FeatureFormatException("corrupt feature file: truncated ids")
        try:
            ids.append(payload[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FeatureFormatException(f"corrupt feature file: {e}")
        offset += length

    if offset != len(payload):
        raise FeatureFormatException("corrupt feature file: trailing bytes")

    return FeatureSet(
        view=ViewTag(view_tag),
        ids=ids,
        vectors=vectors,
        normalized=bool(flags & FLAG_NORMALIZED),
    )


def save_feature_set(feature_set: FeatureSet, path: PathLike) -> None:
    Path(path).write_bytes(encode_feature_set(feature_set))


def load_feature_set(path: PathLike) -> FeatureSet:
    feature_set = decode_feature_set(Path(path).read_bytes())
    logger.debug("Loaded %d × %d features from %s", len(feature_set), feature_set.dim, path)
    return feature_set


def save_feature_map(feature_map: LocalFeatureMap, path: PathLike) -> None:
    header = _MAP_HEADER.pack(FEATURE_MAP_MAGIC, FORMAT_VERSION, feature_map.height, feature_map.width, feature_map.dim)
    Path(path).write_bytes(header + np.ascontiguousarray(feature_map.values, dtype="<f4").tobytes())


def load_feature_map(path: PathLike) -> LocalFeatureMap:
    payload = Path(path).read_bytes()
    if len(payload) < 4 or payload[:4] != FEATURE_MAP_MAGIC:
        raise FeatureFormatException("unrecognized format")
    if len(payload) < _MAP_HEADER.size:
        raise FeatureFormatException("corrupt feature file: truncated header")

    _, version, height, width, dim = _MAP_HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise FeatureFormatException(f"unrecognized format: version {version}")
    expected = _MAP_HEADER.size + height * width * dim * 4
    if len(payload) != expected:
        raise FeatureFormatException("corrupt feature file: size does not match header")

    values = np.frombuffer(payload, dtype="<f4", offset=_MAP_HEADER.size).astype(np.float32)
    return LocalFeatureMap(values=values.reshape(height, width, dim))


def pool_directory(maps_dir: PathLike, p: float = 3.0, view: ViewTag = ViewTag.QUERY) -> FeatureSet:
    """GeM + L2 для каждого *.cvfm в каталоге; id записи - имя файла без расширения"""
    paths = sorted(Path(maps_dir).glob("*.cvfm"))
    if not paths:
        raise FeatureValidationException("no input maps")

    ids: List[str] = []
    rows: List[np.ndarray] = []
    for path in paths:
        feature_map = load_feature_map(path)
        if rows and feature_map.dim != rows[0].shape[0]:
            raise FeatureValidationException(
                f"mixed dims across maps: {path.name} has {feature_map.dim}, expected {rows[0].shape[0]}"
            )
        ids.append(path.stem)
        rows.append(l2_normalize(gem_pool(feature_map, p)))

    logger.info("Pooled %d feature maps from %s (p=%s)", len(rows), maps_dir, p)
    return FeatureSet(view=view, ids=ids, vectors=np.stack(rows).astype(np.float32), normalized=True)


def load_geo_tags(path: PathLike) -> Dict[str, GeoTag]:
    frame = pd.read_csv(path, dtype={"id": str})
    missing = {"id", "lat", "lon"} - set(frame.columns)
    if missing:
        raise FeatureValidationException(f"geo-tag file {path} lacks columns {sorted(missing)}")

    tags: Dict[str, GeoTag] = {}
    for row in frame.itertuples(index=False):
        tags[row.id] = GeoTag(id=row.id, lat=float(row.lat), lon=float(row.lon))
    return tags


def save_geo_tags(tags: List[GeoTag], path: PathLike) -> None:
    pd.DataFrame([t.model_dump() for t in tags], columns=["id", "lat", "lon"]).to_csv(path, index=False)
