"""
Диагностика различимости по отчету: гистограммы сходства top-1 пар и запас Δsim = sim_T - sim_N.
"""
import logging

import numpy as np
import pandas as pd

from app.config import HIST_BINS
from app.constants import DELTA_COLUMNS, HISTOGRAM_COLUMNS
from app.feature_validator import FeatureValidationException
from app.models import RetrievalReport

logger = logging.getLogger(__name__)


def similarity_histogram(report: RetrievalReport, bins: int = HIST_BINS) -> pd.DataFrame:
    """
    Гистограмма сходства top-1 пар отдельно для верных и неверных совпадений на [-1, 1].
    Запросы без релевантных референсов пропускаются, так что сумма счетчиков равна num_evaluated.
    """
    if not report.per_query:
        raise FeatureValidationException("report has no per-query data")

    evaluated = [q for q in report.per_query if q.top1_correct is not None]
    skipped = len(report.per_query) - len(evaluated)
    if skipped:
        logger.warning("%d queries without relevant references are left out of the histogram", skipped)

    sims = np.clip([q.top1_similarity for q in evaluated], -1.0, 1.0)
    matched = np.array([q.top1_correct for q in evaluated], dtype=bool)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    matched_counts, _ = np.histogram(sims[matched], bins=edges)
    unmatched_counts, _ = np.histogram(sims[~matched], bins=edges)

    return pd.DataFrame(
        {
            "bin_lo": edges[:-1],
            "bin_hi": edges[1:],
            "matched_count": matched_counts,
            "unmatched_count": unmatched_counts,
        },
        columns=HISTOGRAM_COLUMNS,
    )


def delta_similarity(report: RetrievalReport) -> pd.DataFrame:
    if not report.per_query:
        raise FeatureValidationException("report has no per-query data")

    rows = [
        (q.query_id, q.true_similarity - q.hard_negative_similarity)
        for q in report.per_query
        if q.true_similarity is not None and q.hard_negative_similarity is not None
    ]
    skipped = len(report.per_query) - len(rows)
    if skipped:
        logger.warning("%d queries without a true/hard-negative pair are left out of Δsim", skipped)
    return pd.DataFrame(rows, columns=DELTA_COLUMNS)
