"""
Ранжирование референсов по запросам, Recall@K, AP и присвоение геометки лучшего референса.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.config import CHUNK_SIZE
from app.constants import DEFAULT_KS, LOCALIZATION_COLUMNS
from app.feature_validator import FeatureValidationException, feature_validator
from app.models import FeatureSet, GeoTag, GroundTruth, QueryResult, RetrievalReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _check_pair(Z_Q: np.ndarray, Z_R: np.ndarray) -> None:
    if Z_R.shape[0] == 0:
        raise FeatureValidationException("no references")
    feature_validator.validate_same_dim(Z_Q.shape[1], Z_R.shape[1], "query/reference dim mismatch")


def _similarity_blocks(Z_Q: np.ndarray, Z_R: np.ndarray) -> Iterable:
    """Матрица сходства по блокам строк запросов, чтобы не держать M×N целиком"""
    for start in range(0, Z_Q.shape[0], CHUNK_SIZE):
        yield start, Z_Q[start:start + CHUNK_SIZE] @ Z_R.T


def _descending(sims: np.ndarray) -> np.ndarray:
    # устойчивая сортировка: при равенстве выигрывает меньший индекс
    return np.argsort(-sims, axis=-1, kind="stable")


def rank(Z_Q: FeatureSet, Z_R: FeatureSet, top_k: Optional[int] = None) -> np.ndarray:
    """Индексы референсов по убыванию сходства для каждого запроса (M×N или M×top_k)"""
    ZQ, ZR = Z_Q.matrix(), Z_R.matrix()
    _check_pair(ZQ, ZR)

    width = ZR.shape[0] if top_k is None else min(top_k, ZR.shape[0])
    ranks = np.empty((ZQ.shape[0], width), dtype=np.int64)
    for start, sims in _similarity_blocks(ZQ, ZR):
        ranks[start:start + sims.shape[0]] = _descending(sims)[:, :width]
    return ranks


def recall_at_k(ranks: np.ndarray, gt: GroundTruth, k: int) -> float:
    """Доля запросов, у которых хотя бы один релевантный референс входит в первые k"""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(gt) == 0:
        return 0.0

    hits = 0
    for row, relevant in zip(ranks, gt.relevant):
        if not set(row[:k].tolist()).isdisjoint(relevant):
            hits += 1
    return hits / len(gt)


def _ap_from_positions(positions: np.ndarray) -> float:
    positions = np.sort(positions)
    precisions = np.arange(1, positions.size + 1) / (positions + 1.0)
    return float(np.sum(precisions) / positions.size)


def average_precision(rank_list: Sequence[int], relevant: Iterable[int]) -> Optional[float]:
    """
    Дискретная AP: среднее точностей на позициях релевантных элементов.

    Returns:
        None для пустого множества релевантных (запрос исключается из mAP)
    """
    relevant = set(relevant)
    if not relevant:
        return None

    positions = np.array([pos for pos, j in enumerate(rank_list) if j in relevant], dtype=np.float64)
    if positions.size < len(relevant):
        # релевантные за пределами усеченного списка не найдены - их точность считается нулевой
        positions = np.concatenate([positions, np.full(len(relevant) - positions.size, np.inf)])
    return _ap_from_positions(positions)


def mean_ap(ranks: np.ndarray, gt: GroundTruth) -> float:
    aps = [average_precision(row, relevant) for row, relevant in zip(ranks, gt.relevant)]
    scored = [ap for ap in aps if ap is not None]
    if len(scored) < len(aps):
        logger.warning("%d queries without relevant references excluded from mAP", len(aps) - len(scored))
    return float(np.mean(scored)) if scored else 0.0


def _relevant_positions(sims_row: np.ndarray, relevant: Sequence[int]) -> np.ndarray:
    """Позиции релевантных референсов в полном ранжировании без сортировки всей строки"""
    order = np.arange(sims_row.shape[0])
    positions = []
    for j in relevant:
        s = sims_row[j]
        positions.append(np.count_nonzero(sims_row > s) + np.count_nonzero((sims_row == s) & (order < j)))
    return np.array(positions, dtype=np.float64)


def evaluate(
    Z_Q: FeatureSet,
    Z_R: FeatureSet,
    gt: GroundTruth,
    ks: Sequence[int] = DEFAULT_KS,
    keep_top: Optional[int] = None,
) -> RetrievalReport:
    """Полная оценка: R@K, mAP и по-запросные данные для диагностики (Δsim, гистограммы)"""
    ZQ, ZR = Z_Q.matrix(), Z_R.matrix()
    _check_pair(ZQ, ZR)
    if len(gt) != ZQ.shape[0]:
        raise FeatureValidationException(f"ground truth covers {len(gt)} queries, got {ZQ.shape[0]}")
    if any(k < 1 for k in ks):
        raise ValueError(f"every k must be >= 1, got {list(ks)}")

    keep_top = keep_top or max(ks)
    hits = {k: 0 for k in ks}
    per_query: List[QueryResult] = []
    aps: List[float] = []

    for start, sims in _similarity_blocks(ZQ, ZR):
        top = _descending(sims)[:, :keep_top]
        for row in range(sims.shape[0]):
            i = start + row
            relevant = gt.relevant[i]
            sims_row = sims[row]
            result = QueryResult(
                query_id=Z_Q.ids[i],
                ranked_ref_ids=[Z_R.ids[j] for j in top[row]],
                top1_similarity=float(sims_row[top[row, 0]]),
            )
            if relevant:
                positions = _relevant_positions(sims_row, relevant)
                first_hit = int(positions.min())
                negatives = np.ones(sims_row.shape[0], dtype=bool)
                negatives[list(relevant)] = False
                result.top1_correct = first_hit == 0
                result.first_hit_rank = first_hit
                result.true_similarity = float(sims_row[list(relevant)].max())
                if negatives.any():
                    result.hard_negative_similarity = float(sims_row[negatives].max())
                result.ap = _ap_from_positions(positions)
                aps.append(result.ap)
                for k in ks:
                    if first_hit < k:
                        hits[k] += 1
            per_query.append(result)

    num_queries = ZQ.shape[0]
    if len(aps) < num_queries:
        logger.warning("%d queries without relevant references excluded from mAP", num_queries - len(aps))

    return RetrievalReport(
        recall={str(k): (hits[k] / num_queries if num_queries else 0.0) for k in ks},
        mean_ap=float(np.mean(aps)) if aps else 0.0,
        num_queries=num_queries,
        num_evaluated=len(aps),
        per_query=per_query,
    )


def localize(query_vector: np.ndarray, Z_R: FeatureSet, geo: Mapping[str, GeoTag]) -> GeoTag:
    """Геометка референса с рангом 0 присваивается запросу"""
    ZR = Z_R.matrix()
    query = np.asarray(query_vector, dtype=np.float64).reshape(1, -1)
    _check_pair(query, ZR)

    top = int(np.argmax(query @ ZR.T))
    ref_id = Z_R.ids[top]
    if ref_id not in geo:
        raise FeatureValidationException(f"missing geo-tag for reference {ref_id!r}")
    return geo[ref_id]


def localize_all(Z_Q: FeatureSet, Z_R: FeatureSet, geo: Mapping[str, GeoTag]) -> pd.DataFrame:
    ZQ, ZR = Z_Q.matrix(), Z_R.matrix()
    _check_pair(ZQ, ZR)
    missing = [ref_id for ref_id in Z_R.ids if ref_id not in geo]
    if missing:
        raise FeatureValidationException(f"missing geo-tag for {len(missing)} references: {missing[:10]}")

    rows = []
    for start, sims in _similarity_blocks(ZQ, ZR):
        top = np.argmax(sims, axis=1)
        for row, j in enumerate(top):
            tag = geo[Z_R.ids[j]]
            rows.append((Z_Q.ids[start + row], tag.id, tag.lat, tag.lon, float(sims[row, j])))
    return pd.DataFrame(rows, columns=LOCALIZATION_COLUMNS)


def load_ground_truth(path: PathLike, query_ids: Sequence[str], ref_ids: Sequence[str]) -> GroundTruth:
    """CSV query_id,ref_id (по строке на пару) -> индексы; неизвестные id перечисляются в ошибке"""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing_cols = {"query_id", "ref_id"} - set(frame.columns)
    if missing_cols:
        raise FeatureValidationException(f"ground-truth file {path} lacks columns {sorted(missing_cols)}")

    query_index = {qid: i for i, qid in enumerate(query_ids)}
    ref_index = {rid: j for j, rid in enumerate(ref_ids)}
    missing = sorted(set(frame["query_id"]) - query_index.keys()) + sorted(set(frame["ref_id"]) - ref_index.keys())
    if missing:
        raise FeatureValidationException(f"ground-truth ids not found: {missing[:20]}")

    relevant: List[List[int]] = [[] for _ in query_ids]
    for qid, rid in zip(frame["query_id"], frame["ref_id"]):
        relevant[query_index[qid]].append(ref_index[rid])
    return GroundTruth(relevant=[sorted(set(r)) for r in relevant], num_refs=len(ref_ids))


def save_ground_truth(gt: GroundTruth, query_ids: Sequence[str], ref_ids: Sequence[str], path: PathLike) -> None:
    rows = [(query_ids[i], ref_ids[j]) for i, relevant in enumerate(gt.relevant) for j in relevant]
    pd.DataFrame(rows, columns=["query_id", "ref_id"]).to_csv(path, index=False)


def save_report(report: RetrievalReport, path: PathLike) -> None:
    """JSON-отчет плюс CSV по запросам рядом с ним (report.json -> report.csv)"""
    path = Path(path)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2))
    report.to_frame().to_csv(path.with_suffix(".csv"), index=False)


def load_report(path: PathLike) -> RetrievalReport:
    return RetrievalReport.model_validate_json(Path(path).read_text())


def report_summary(report: RetrievalReport) -> Dict[str, float]:
    summary = {f"R@{k}": v for k, v in report.recall.items()}
    summary["mAP"] = report.mean_ap
    return summary
