from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.constants import (
    DEFAULT_BETAS,
    DEFAULT_EPS_ADAM,
    DEFAULT_INIT_NOISE,
    DEFAULT_ITERATIONS,
    DEFAULT_LR,
    DEFAULT_TAU,
    DEFAULT_THRESHOLD,
    COLLAPSE_PATIENCE,
    TRAIN_LOG_COLUMNS,
)
from app.feature_validator import FeatureValidationException, feature_validator


class ViewTag(IntEnum):
    QUERY = 0
    REFERENCE = 1


class Arch(str, Enum):
    PLAIN = "plain"
    RESIDUAL = "residual"


class ViewGap(str, Enum):
    NONE = "none"
    ROTATION = "rotation"
    GENERAL_LINEAR = "general_linear"


class LabelSource(str, Enum):
    PSEUDO = "pseudo"
    GROUND_TRUTH = "ground_truth"


# Доменные типы с numpy-массивами
class FeatureSet(BaseModel):
    """Набор глобальных признаков одного вида (запросы или референсы)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    view: ViewTag
    ids: List[str]
    vectors: np.ndarray
    normalized: bool = False

    @model_validator(mode="after")
    def _check_invariants(self):
        feature_validator.validate_vectors(self.vectors, self.normalized)
        feature_validator.validate_ids(self.ids, self.vectors.shape[0])
        return self

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def matrix(self) -> np.ndarray:
        """Матрица признаков в 64-битной точности"""
        return np.asarray(self.vectors, dtype=np.float64)

    def subset(self, indices: np.ndarray) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureSet(
            view=self.view,
            ids=[self.ids[i] for i in indices],
            vectors=self.vectors[indices],
            normalized=self.normalized,
        )


class LocalFeatureMap(BaseModel):
    """Карта локальных признаков H×W×dim одного изображения"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray

    @model_validator(mode="after")
    def _check_invariants(self):
        feature_validator.validate_map(self.values)
        return self

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def dim(self) -> int:
        return int(self.values.shape[2])


class GeoTag(BaseModel):
    id: str
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)


class GroundTruth(BaseModel):
    """Для каждого запроса - множество релевантных индексов референсов (один-ко-многим)"""
    relevant: List[List[int]]
    num_refs: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_range(self):
        for row in self.relevant:
            for j in row:
                if j < 0 or j >= self.num_refs:
                    raise FeatureValidationException(f"ground-truth index {j} outside [0, {self.num_refs})")
        return self

    def __len__(self) -> int:
        return len(self.relevant)

    def subset(self, indices: np.ndarray) -> "GroundTruth":
        return GroundTruth(relevant=[self.relevant[int(i)] for i in indices], num_refs=self.num_refs)

    def inverted(self) -> "GroundTruth":
        """Обратное отображение: для каждого референса - запросы, которые на него указывают"""
        rows: List[List[int]] = [[] for _ in range(self.num_refs)]
        for i, row in enumerate(self.relevant):
            for j in row:
                rows[j].append(i)
        return GroundTruth(relevant=rows, num_refs=len(self.relevant))


class AdapterParams(BaseModel):
    """Адаптер f_θ: линейная матрица W размера d×d0 без смещения"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    W: np.ndarray
    arch: Arch = Arch.PLAIN

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.W.ndim != 2:
            raise FeatureValidationException(f"adapter matrix must be 2-D, got shape {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise FeatureValidationException("non-finite adapter parameter")
        if self.arch == Arch.RESIDUAL and self.W.shape[0] != self.W.shape[1]:
            raise FeatureValidationException("residual requires equal dims")
        return self

    @property
    def d(self) -> int:
        return int(self.W.shape[0])

    @property
    def d0(self) -> int:
        return int(self.W.shape[1])


class ReverterParams(BaseModel):
    """Ревертер f_φ: линейная матрица V размера d0×d"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    V: np.ndarray

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.V.ndim != 2:
            raise FeatureValidationException(f"reverter matrix must be 2-D, got shape {self.V.shape}")
        if not np.all(np.isfinite(self.V)):
            raise FeatureValidationException("non-finite reverter parameter")
        return self

    @property
    def d0(self) -> int:
        return int(self.V.shape[0])

    @property
    def d(self) -> int:
        return int(self.V.shape[1])


class PseudoLabels(BaseModel):
    """Разреженная one-hot матрица s: положительный референс на запрос плюс маска валидности"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    num_refs: int
    positive: np.ndarray  # -1 для невалидных строк
    valid: np.ndarray
    similarity: Optional[np.ndarray] = None

    @property
    def num_queries(self) -> int:
        return int(self.positive.shape[0])

    @property
    def num_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def as_matrix(self) -> np.ndarray:
        s = np.zeros((self.num_queries, self.num_refs), dtype=bool)
        rows = np.flatnonzero(self.valid)
        s[rows, self.positive[rows]] = True
        return s


class LossValue(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    valid_rows: int
    no_valid: bool = False


class ReconLoss(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: float
    grad: np.ndarray


class TrainConfig(BaseModel):
    """Гиперпараметры цикла обучения; JSON-ключи совпадают с короткими именами (T, M, tau, ...)"""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    iterations: int = Field(DEFAULT_ITERATIONS, ge=0, alias="T")
    sample_size: Optional[int] = Field(None, ge=1, alias="M")
    tau: float = Field(DEFAULT_TAU, gt=0)
    threshold: float = DEFAULT_THRESHOLD
    lr: float = Field(DEFAULT_LR, gt=0)
    betas: Tuple[float, float] = DEFAULT_BETAS
    eps_adam: float = Field(DEFAULT_EPS_ADAM, gt=0)
    w_em: float = Field(1.0, ge=0)
    w_re: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    arch: Arch = Arch.PLAIN
    d: Optional[int] = Field(None, ge=1)
    init_noise: float = Field(DEFAULT_INIT_NOISE, ge=0)
    label_source: LabelSource = LabelSource.PSEUDO
    collapse_patience: int = Field(COLLAPSE_PATIENCE, ge=1)

    @model_validator(mode="after")
    def _check_betas(self):
        for beta in self.betas:
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"Adam beta {beta} outside [0, 1)")
        return self


class AdamState(BaseModel):
    """Моменты Adam по именованным блокам параметров и счетчик шагов"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)
    t: int = 0


class TrainLogEntry(BaseModel):
    iter: int
    l_em_qr: float
    l_em_rq: float
    l_re_q: float
    l_re_r: float
    valid_rows: int
    ms: float


class TrainLog(BaseModel):
    entries: List[TrainLogEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.model_dump() for e in self.entries], columns=TRAIN_LOG_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "TrainLog":
        return cls(entries=[TrainLogEntry(**row) for row in frame.to_dict(orient="records")])


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_scenes: int = Field(ge=1)
    queries_per_scene: int = Field(ge=1)
    eval_queries_per_scene: int = Field(0, ge=0)
    d0: int = Field(ge=2)
    noise_sigma: float = Field(0.0, ge=0)
    view_gap: ViewGap = ViewGap.NONE
    rotation_strength: float = Field(0.8, ge=0)
    kappa_max: float = Field(1.0, ge=1.0)
    style_offset: float = Field(0.0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)


class QueryResult(BaseModel):
    query_id: str
    ranked_ref_ids: List[str]
    top1_similarity: float
    top1_correct: Optional[bool] = None
    true_similarity: Optional[float] = None
    hard_negative_similarity: Optional[float] = None
    first_hit_rank: Optional[int] = None
    ap: Optional[float] = None


class RetrievalReport(BaseModel):
    recall: Dict[str, float]
    mean_ap: float
    num_queries: int
    num_evaluated: int
    per_query: List[QueryResult]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for q in self.per_query:
            row = q.model_dump()
            row["ranked_ref_ids"] = " ".join(q.ranked_ref_ids)
            rows.append(row)
        return pd.DataFrame(rows)
