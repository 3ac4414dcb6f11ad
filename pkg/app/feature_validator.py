from typing import Sequence

import numpy as np

from app.constants import NORMALIZED_TOL


class FeatureValidationException(Exception):
    """Исключение для нарушений инвариантов входных данных"""
    pass


class FeatureValidator:
    """Валидатор наборов признаков и карт локальных признаков"""

    def validate_vectors(self, vectors: np.ndarray, normalized: bool = False) -> None:
        """
        Проверка матрицы признаков count×dim.

        Raises:
            FeatureValidationException при нарушении формы, конечности или нормы
        """
        if vectors.ndim != 2:
            raise FeatureValidationException(f"feature matrix must be 2-D, got shape {vectors.shape}")
        if vectors.shape[1] < 1:
            raise FeatureValidationException("feature dim must be positive")
        if not np.all(np.isfinite(vectors)):
            raise FeatureValidationException("non-finite feature")

        if normalized and vectors.shape[0]:
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > NORMALIZED_TOL:
                raise FeatureValidationException(
                    f"set flagged normalized but a vector norm deviates from 1 by {worst:.3e}"
                )

    def validate_ids(self, ids: Sequence[str], count: int) -> None:
        if len(ids) != count:
            raise FeatureValidationException(f"{len(ids)} ids for {count} vectors")

        seen = set()
        for record_id in ids:
            if record_id in seen:
                raise FeatureValidationException(f"duplicate record id: {record_id!r}")
            seen.add(record_id)

    def validate_map(self, values: np.ndarray) -> None:
        if values.ndim != 3:
            raise FeatureValidationException(f"feature map must be H×W×dim, got shape {values.shape}")
        if values.shape[0] * values.shape[1] < 1:
            raise FeatureValidationException("empty feature map")
        if values.shape[2] < 1:
            raise FeatureValidationException("feature dim must be positive")
        if not np.all(np.isfinite(values)):
            raise FeatureValidationException("non-finite feature")

    def validate_same_dim(self, left_dim: int, right_dim: int, what: str) -> None:
        if left_dim != right_dim:
            raise FeatureValidationException(f"{what}: {left_dim} != {right_dim}")


feature_validator = FeatureValidator()
