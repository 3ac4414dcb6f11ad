"""
EM-псевдоразметка: E-шаг (argmax сходства с порогом) и M-шаг (InfoNCE с аналитическими градиентами).
"""
import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd

from app.config import CHUNK_SIZE
from app.constants import PSEUDO_LABEL_COLUMNS
from app.feature_validator import FeatureValidationException, feature_validator
from app.models import FeatureSet, GroundTruth, LossValue, PseudoLabels

logger = logging.getLogger(__name__)

Matrix = Union[FeatureSet, np.ndarray]


def _as_matrix(features: Matrix) -> np.ndarray:
    if isinstance(features, FeatureSet):
        return features.matrix()
    return np.asarray(features, dtype=np.float64)


def pseudo_label(Z_Q: Matrix, Z_R: Matrix, threshold: float) -> PseudoLabels:
    """
    E-шаг: j* = argmax_j ⟨z_i, z_j⟩ (при равенстве - меньший индекс), строка валидна при сходстве > threshold.
    """
    ZQ, ZR = _as_matrix(Z_Q), _as_matrix(Z_R)
    if ZR.shape[0] == 0:
        raise FeatureValidationException("no references")
    feature_validator.validate_same_dim(ZQ.shape[1], ZR.shape[1], "query/reference dim mismatch")

    positive = np.empty(ZQ.shape[0], dtype=np.int64)
    best = np.empty(ZQ.shape[0], dtype=np.float64)
    for start in range(0, ZQ.shape[0], CHUNK_SIZE):
        sims = ZQ[start:start + CHUNK_SIZE] @ ZR.T
        idx = np.argmax(sims, axis=1)
        positive[start:start + CHUNK_SIZE] = idx
        best[start:start + CHUNK_SIZE] = sims[np.arange(sims.shape[0]), idx]

    valid = best > threshold
    positive[~valid] = -1
    return PseudoLabels(num_refs=ZR.shape[0], positive=positive, valid=valid, similarity=best)


def labels_from_ground_truth(gt: GroundTruth) -> PseudoLabels:
    """One-hot метки из разметки (первый релевантный референс) - вариант обучения с учителем"""
    positive = np.array([row[0] if row else -1 for row in gt.relevant], dtype=np.int64)
    return PseudoLabels(num_refs=gt.num_refs, positive=positive, valid=positive >= 0)


def info_nce_from_matrix(ZA: np.ndarray, ZB: np.ndarray, s: np.ndarray, tau: float) -> LossValue:
    """
    InfoNCE по произвольной 0/1 матрице положительных пар s (строки без положительных маскируются).

    L = -(1/M') Σ_i [logsumexp_{j: s_ij} S_ij - logsumexp_j S_ij],  S = ZA ZBᵀ / τ.
    ∂L/∂S_ij = (p_ij - q_ij)/M', где p - softmax по всей строке, q - softmax по положительным.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if s.shape != (ZA.shape[0], ZB.shape[0]):
        raise FeatureValidationException(f"label shape {s.shape} does not match sets {ZA.shape[0]}×{ZB.shape[0]}")

    s = s.astype(bool)
    rows = np.flatnonzero(s.any(axis=1))
    valid_rows = int(rows.size)
    grad_a = np.zeros_like(ZA)
    grad_b = np.zeros_like(ZB)
    if valid_rows == 0:
        logger.warning("no valid pseudo-labels: loss set to 0")
        return LossValue(value=0.0, grad_a=grad_a, grad_b=grad_b, valid_rows=0, no_valid=True)

    ZA_rows = ZA[rows]
    S = ZA_rows @ ZB.T / tau
    mask = s[rows]

    row_max = S.max(axis=1, keepdims=True)
    E = np.exp(S - row_max)
    denom = E.sum(axis=1, keepdims=True)

    # числитель сдвигается по своему максимуму, иначе log(numer) может уйти в -inf
    pos_max = np.where(mask, S, -np.inf).max(axis=1, keepdims=True)
    E_pos = np.exp(np.where(mask, S - pos_max, -np.inf))
    numer = E_pos.sum(axis=1, keepdims=True)

    log_numer = pos_max + np.log(numer)
    log_denom = row_max + np.log(denom)
    value = float(np.sum(log_denom - log_numer) / valid_rows)

    P = E / denom
    Q = E_pos / numer
    G = (P - Q) / (valid_rows * tau)

    grad_a[rows] = G @ ZB
    grad_b = G.T @ ZA_rows
    return LossValue(value=max(value, 0.0), grad_a=grad_a, grad_b=grad_b, valid_rows=valid_rows)


def info_nce_loss(Z_Q: Matrix, Z_R: Matrix, labels: Union[PseudoLabels, np.ndarray], tau: float) -> LossValue:
    """L_EM(Z^Q, Z^R, s); градиенты по обеим матрицам признаков возвращаются в LossValue"""
    s = labels.as_matrix() if isinstance(labels, PseudoLabels) else np.asarray(labels, dtype=bool)
    return info_nce_from_matrix(_as_matrix(Z_Q), _as_matrix(Z_R), s, tau)


def export_pseudo_labels(
    labels: PseudoLabels,
    query_ids: Sequence[str],
    ref_ids: Sequence[str],
    path: Union[str, Path],
) -> None:
    similarity = labels.similarity if labels.similarity is not None else np.full(labels.num_queries, np.nan)
    frame = pd.DataFrame(
        {
            "query_id": list(query_ids),
            "ref_id": [ref_ids[j] if ok else "" for j, ok in zip(labels.positive, labels.valid)],
            "similarity": similarity,
            "valid": labels.valid.astype(bool),
        },
        columns=PSEUDO_LABEL_COLUMNS,
    )
    frame.to_csv(path, index=False)
