"""
Самообучение адаптера: выборка запросов, E-шаг, симметричный InfoNCE, реконструкция и шаги Adam по θ и φ.
"""
import io
import logging
import time
import zipfile
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.adapter_core import (
    AdapterException,
    CheckpointException,
    adapt,
    adapt_backward,
    adapt_matrix,
    init_params,
    save_adapter,
)
from app.aic import aic_grads
from app.constants import ABLATION_COLUMNS, ABLATION_CONFIGS, NPZ_DATE_TIME, TRAIN_LOG_COLUMNS, TRAIN_STATE_VERSION
from app.empl import info_nce_from_matrix, labels_from_ground_truth, pseudo_label
from app.feature_validator import FeatureValidationException, feature_validator
from app.models import (
    AdamState,
    AdapterParams,
    Arch,
    FeatureSet,
    GroundTruth,
    LabelSource,
    ReverterParams,
    SynthConfig,
    TrainConfig,
    TrainLog,
    TrainLogEntry,
)
from app.retrieval import evaluate
from app.synthbench import generate

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class TrainingAbortedException(Exception):
    """Обучение остановлено; state - последнее согласованное состояние, чтобы сохранить лог и параметры"""

    def __init__(self, message: str, state: Optional["TrainState"] = None):
        super().__init__(message)
        self.state = state


class TrainingCollapseException(TrainingAbortedException):
    """E-шаг подряд не находит ни одной валидной псевдометки"""
    pass


class GradientBlowUpException(TrainingAbortedException):
    pass


class TrainState(BaseModel):
    """Все, что нужно для побитно одинакового продолжения обучения"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    W: np.ndarray
    V: np.ndarray
    arch: Arch
    adam_theta: AdamState = Field(default_factory=AdamState)
    adam_phi: AdamState = Field(default_factory=AdamState)
    iteration: int = 0
    collapsed_streak: int = 0
    log: TrainLog = Field(default_factory=TrainLog)

    def adapter(self) -> AdapterParams:
        return AdapterParams(W=self.W.copy(), arch=self.arch)

    def reverter(self) -> ReverterParams:
        return ReverterParams(V=self.V.copy())


def sample_indices(n: int, m: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        raise FeatureValidationException("cannot sample queries from an empty set")
    if m is None:
        m = n
    if m > n:
        logger.warning("sample size %d exceeds %d queries, using the full set", m, n)
        m = n
    return rng.choice(n, size=m, replace=False)


def sample_queries(X_Q0: FeatureSet, m: Optional[int], rng: np.random.Generator) -> FeatureSet:
    """M различных записей без возвращения, равномерно; детерминировано состоянием rng"""
    return X_Q0.subset(sample_indices(len(X_Q0), m, rng))


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Стандартный шаг Adam с поправкой смещения; исходные массивы не изменяются"""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientBlowUpException(f"gradient blow-up in parameter block {name!r}")

    beta1, beta2 = betas
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise FeatureValidationException(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v

    new_state = AdamState(m=new_m, v=new_v, t=t)
    for name in new_m:
        if not (np.all(np.isfinite(new_m[name])) and np.all(np.isfinite(new_v[name]))):
            raise GradientBlowUpException(f"gradient blow-up: non-finite Adam moments for {name!r}")
    return new_params, new_state


def objective(
    W: np.ndarray,
    V: np.ndarray,
    XQ: np.ndarray,
    XR: np.ndarray,
    s: np.ndarray,
    config: TrainConfig,
) -> Tuple[Dict[str, float], np.ndarray, np.ndarray]:
    """
    Целевая функция итерации при фиксированных метках s (M×N).

    L = w_em·[L_EM(Z^Q, Z^R, s) + L_EM(Z^R, Z^Q, sᵀ)],  C = w_re·[L_re(X^Q, X̂^Q)/M + L_re(X^R, X̂^R)/N].
    Реконструкция усредняется по записям каждого вида, как L_EM по M'.
    Возвращает компоненты, ∂(L+C)/∂W и ∂C/∂V.
    """
    ZQ, normsQ = adapt_matrix(W, XQ, config.arch)
    ZR, normsR = adapt_matrix(W, XR, config.arch)

    qr = info_nce_from_matrix(ZQ, ZR, s, config.tau)
    rq = info_nce_from_matrix(ZR, ZQ, s.T, config.tau)
    grad_ZQ = config.w_em * (qr.grad_a + rq.grad_b)
    grad_ZR = config.w_em * (qr.grad_b + rq.grad_a)

    l_re_q, grad_W_q, grad_V_q, _ = aic_grads(XQ, ZQ, W, V, config.arch, normsQ, reduction="mean")
    l_re_r, grad_W_r, grad_V_r, _ = aic_grads(XR, ZR, W, V, config.arch, normsR, reduction="mean")

    grad_W = adapt_backward(ZQ, normsQ, XQ, grad_ZQ) + adapt_backward(ZR, normsR, XR, grad_ZR)
    grad_W = grad_W + config.w_re * (grad_W_q + grad_W_r)
    grad_V = config.w_re * (grad_V_q + grad_V_r)
    parts = {
        "l_em_qr": qr.value,
        "l_em_rq": rq.value,
        "l_re_q": l_re_q,
        "l_re_r": l_re_r,
        "valid_rows": qr.valid_rows,
        "total": config.w_em * (qr.value + rq.value) + config.w_re * (l_re_q + l_re_r),
    }
    return parts, grad_W, grad_V


def initial_state(config: TrainConfig, d0: int) -> TrainState:
    d = config.d or d0
    adapter, reverter = init_params(d0, d, config.arch, config.seed, config.init_noise)
    return TrainState(W=adapter.W, V=reverter.V, arch=config.arch)


def _check_inputs(config: TrainConfig, X_Q0: FeatureSet, X_R: FeatureSet, ground_truth: Optional[GroundTruth]) -> None:
    if not (X_Q0.normalized and X_R.normalized):
        raise FeatureValidationException("training inputs must be L2-normalized feature sets")
    feature_validator.validate_same_dim(X_Q0.dim, X_R.dim, "query/reference dim mismatch")
    if len(X_R) == 0:
        raise FeatureValidationException("no references")
    if config.label_source == LabelSource.GROUND_TRUTH:
        if ground_truth is None or len(ground_truth) != len(X_Q0):
            raise FeatureValidationException("label_source=ground_truth requires ground truth for every query")


def run_training(
    config: TrainConfig,
    X_Q0: FeatureSet,
    X_R: FeatureSet,
    ground_truth: Optional[GroundTruth] = None,
    state: Optional[TrainState] = None,
    on_iteration: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """
    Цикл обучения с итерации state.iteration до config.iterations.

    Выборка на итерации t засевается парой (seed, t), поэтому продолжение с чекпоинта
    повторяет оставшуюся траекторию побитно.
    """
    _check_inputs(config, X_Q0, X_R, ground_truth)
    XQ0, XR = X_Q0.matrix(), X_R.matrix()
    state = state or initial_state(config, X_Q0.dim)
    if state.W.shape[1] != X_Q0.dim:
        raise CheckpointException(f"checkpoint d0={state.W.shape[1]} does not match features dim {X_Q0.dim}")

    gt_labels = labels_from_ground_truth(ground_truth) if config.label_source == LabelSource.GROUND_TRUTH else None

    for t in range(state.iteration, config.iterations):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, t])
        idx = sample_indices(XQ0.shape[0], config.sample_size, rng)
        XQ = XQ0[idx]

        try:
            if gt_labels is None:
                ZQ, _ = adapt_matrix(state.W, XQ, config.arch)
                ZR, _ = adapt_matrix(state.W, XR, config.arch)
                labels = pseudo_label(ZQ, ZR, config.threshold)
            else:
                labels = gt_labels.model_copy(update={"positive": gt_labels.positive[idx], "valid": gt_labels.valid[idx]})

            parts, grad_W, grad_V = objective(state.W, state.V, XQ, XR, labels.as_matrix(), config)

            theta, adam_theta = adam_step({"W": state.W}, {"W": grad_W}, state.adam_theta, config.lr, config.betas, config.eps_adam)
            phi, adam_phi = adam_step({"V": state.V}, {"V": grad_V}, state.adam_phi, config.lr, config.betas, config.eps_adam)
        except GradientBlowUpException as e:
            raise GradientBlowUpException(f"{e} (iteration {t})", state) from e
        except AdapterException as e:
            raise GradientBlowUpException(f"training diverged at iteration {t}: {e}", state) from e

        streak = state.collapsed_streak + 1 if labels.num_valid == 0 else 0
        entry = TrainLogEntry(
            iter=t,
            l_em_qr=parts["l_em_qr"],
            l_em_rq=parts["l_em_rq"],
            l_re_q=parts["l_re_q"],
            l_re_r=parts["l_re_r"],
            valid_rows=labels.num_valid,
            ms=(time.perf_counter() - started) * 1000.0,
        )
        state = TrainState(
            W=theta["W"],
            V=phi["V"],
            arch=state.arch,
            adam_theta=adam_theta,
            adam_phi=adam_phi,
            iteration=t + 1,
            collapsed_streak=streak,
            log=TrainLog(entries=state.log.entries + [entry]),
        )
        logger.debug(
            "iter %d: L_EM %.5f/%.5f  L_re %.5f/%.5f  valid %d",
            t, entry.l_em_qr, entry.l_em_rq, entry.l_re_q, entry.l_re_r, entry.valid_rows,
        )

        if streak > config.collapse_patience:
            raise TrainingCollapseException(
                f"pseudo-labeling collapsed: no valid pseudo-labels for {streak} consecutive iterations "
                f"(threshold {config.threshold})",
                state,
            )
        if on_iteration is not None:
            on_iteration(state)

    return state


def train_adapter(
    config: TrainConfig,
    X_Q0: FeatureSet,
    X_R: FeatureSet,
    ground_truth: Optional[GroundTruth] = None,
) -> Tuple[AdapterParams, ReverterParams, TrainLog]:
    state = run_training(config, X_Q0, X_R, ground_truth)
    return state.adapter(), state.reverter(), state.log


def _log_array(log: TrainLog) -> np.ndarray:
    if not log.entries:
        return np.zeros((0, len(TRAIN_LOG_COLUMNS)))
    return log.to_frame().to_numpy(dtype=np.float64)


def _log_from_array(values: np.ndarray) -> TrainLog:
    frame = pd.DataFrame(values, columns=TRAIN_LOG_COLUMNS)
    frame["iter"] = frame["iter"].astype(int)
    frame["valid_rows"] = frame["valid_rows"].astype(int)
    return TrainLog.from_frame(frame)


def _write_npz(path: Path, arrays: Dict[str, np.ndarray]) -> None:
    """Тот же формат, что у np.savez, но с фиксированной датой записей: одинаковое состояние дает одинаковые байты"""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in arrays.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.asanyarray(value), allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=NPZ_DATE_TIME), buffer.getvalue())


def save_checkpoint(state: TrainState, directory: PathLike) -> None:
    """adapter.cvad (float32, для инференса), train_state.npz (float64, для продолжения) и train_log.csv"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    save_adapter(state.adapter(), state.reverter(), directory / "adapter.cvad", state.iteration)
    arrays = {
        "version": np.array(TRAIN_STATE_VERSION),
        "arch": np.array(state.arch.value),
        "W": state.W,
        "V": state.V,
        "iteration": np.array(state.iteration),
        "collapsed_streak": np.array(state.collapsed_streak),
        "theta_t": np.array(state.adam_theta.t),
        "phi_t": np.array(state.adam_phi.t),
        "log": _log_array(state.log),
    }
    if state.adam_theta.t:
        arrays.update(theta_m=state.adam_theta.m["W"], theta_v=state.adam_theta.v["W"])
    if state.adam_phi.t:
        arrays.update(phi_m=state.adam_phi.m["V"], phi_v=state.adam_phi.v["V"])
    _write_npz(directory / "train_state.npz", arrays)
    state.log.to_frame().to_csv(directory / "train_log.csv", index=False)


def load_checkpoint(directory: PathLike, config: TrainConfig, d0: int) -> TrainState:
    path = Path(directory) / "train_state.npz"
    if not path.exists():
        raise CheckpointException(f"no training state in {directory}")

    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as e:
        raise CheckpointException(f"corrupt checkpoint: {e}")

    try:
        version = int(arrays["version"])
        if version != TRAIN_STATE_VERSION:
            raise CheckpointException(f"checkpoint version {version} is not supported (expected {TRAIN_STATE_VERSION})")

        W, V = arrays["W"], arrays["V"]
        arch = Arch(str(arrays["arch"]))
        d = config.d or d0
        if W.shape != (d, d0) or V.shape != (d0, d):
            raise CheckpointException(f"checkpoint shapes W{W.shape} V{V.shape} do not match config d={d}, d0={d0}")
        if arch != config.arch:
            raise CheckpointException(f"checkpoint arch {arch.value} does not match config arch {config.arch.value}")

        theta_t, phi_t = int(arrays["theta_t"]), int(arrays["phi_t"])
        adam_theta = AdamState(
            m={"W": arrays["theta_m"]} if theta_t else {},
            v={"W": arrays["theta_v"]} if theta_t else {},
            t=theta_t,
        )
        adam_phi = AdamState(
            m={"V": arrays["phi_m"]} if phi_t else {},
            v={"V": arrays["phi_v"]} if phi_t else {},
            t=phi_t,
        )
        return TrainState(
            W=W,
            V=V,
            arch=arch,
            adam_theta=adam_theta,
            adam_phi=adam_phi,
            iteration=int(arrays["iteration"]),
            collapsed_streak=int(arrays["collapsed_streak"]),
            log=_log_from_array(arrays["log"]),
        )
    except KeyError as e:
        raise CheckpointException(f"corrupt checkpoint: missing {e}")


def ablation_config(name: str, base: TrainConfig) -> TrainConfig:
    updates = {
        "supervised": {"label_source": LabelSource.GROUND_TRUTH, "w_re": 0.0, "arch": Arch.PLAIN},
        "empl": {"label_source": LabelSource.PSEUDO, "w_re": 0.0, "arch": Arch.PLAIN},
        "empl_residual": {"label_source": LabelSource.PSEUDO, "w_re": 0.0, "arch": Arch.RESIDUAL, "d": None},
        "empl_aic": {"label_source": LabelSource.PSEUDO, "w_re": 1.0, "arch": Arch.PLAIN, "d": None},
    }[name]
    return base.model_copy(update=updates)


def run_ablation(synth_config: SynthConfig, train_config: TrainConfig, seeds: Sequence[int]) -> pd.DataFrame:
    """
    Абляция модулей на синтетическом пресете: без обучения, с учителем, EMPL, EMPL+Residual, EMPL+AIC.

    Для каждого seed генерируется свой набор данных и свое обучение; метрики - на отложенных запросах.
    """
    rows = []
    for seed in seeds:
        data_config = synth_config.model_copy(update={"seed": seed})
        X_Q, X_R, gt = generate(data_config, "train")
        X_E, _, gt_eval = generate(data_config, "eval")

        for name in ABLATION_CONFIGS:
            if name == "baseline":
                Z_E, Z_R = X_E, X_R
            else:
                config = ablation_config(name, train_config).model_copy(update={"seed": seed})
                adapter, _, _ = train_adapter(config, X_Q, X_R, gt)
                Z_E, Z_R = adapt(adapter, X_E), adapt(adapter, X_R)
            report = evaluate(Z_E, Z_R, gt_eval, ks=(1, 5, 10))
            rows.append((name, seed, report.recall["1"], report.recall["5"], report.recall["10"], report.mean_ap))
            logger.info("ablation seed %d %-14s R@1 %.4f", seed, name, report.recall["1"])

    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)
