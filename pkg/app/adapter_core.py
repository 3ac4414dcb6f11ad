"""
Адаптер f_θ: R^d0 -> R^d и ревертер f_φ: R^d -> R^d0 как линейные отображения без смещения.

Адаптированные признаки всегда перенормируются, градиенты проходят через нормализацию.
"""
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.constants import ADAPTER_MAGIC, DEFAULT_INIT_NOISE, DEGENERATE_NORM, FORMAT_VERSION
from app.feature_validator import FeatureValidationException
from app.models import AdapterParams, Arch, FeatureSet, ReverterParams

logger = logging.getLogger(__name__)

# magic, version, arch, d0, d
_ADAPTER_HEADER = struct.Struct("<4sIIII")
_ITERATION = struct.Struct("<Q")
_ARCH_CODES = {Arch.PLAIN: 0, Arch.RESIDUAL: 1}


class AdapterException(FeatureValidationException):
    """Исключение для несовместимых размерностей и вырожденных выходов адаптера"""
    pass


class CheckpointException(AdapterException):
    pass


def _pre_activation(W: np.ndarray, X: np.ndarray, arch: Arch) -> np.ndarray:
    U = X @ W.T
    if arch == Arch.RESIDUAL:
        U = U + X
    return U


def adapt_matrix(W: np.ndarray, X: np.ndarray, arch: Arch = Arch.PLAIN) -> Tuple[np.ndarray, np.ndarray]:
    """
    Прямой проход адаптера по строкам X (n×d0).

    Returns:
        (Z, norms): нормированные строки n×d и нормы ‖u_i‖ до нормализации (n×1)
    """
    if X.shape[1] != W.shape[1]:
        raise AdapterException(f"adapter/input dim mismatch: adapter d0={W.shape[1]}, input dim={X.shape[1]}")

    U = _pre_activation(W, X, arch)
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    if U.shape[0] and not np.all(norms >= DEGENERATE_NORM):
        raise AdapterException("degenerate adapted vector")
    return U / norms, norms


def adapt_backward(Z: np.ndarray, norms: np.ndarray, X: np.ndarray, grad_Z: np.ndarray) -> np.ndarray:
    """
    Градиент по W через z = u/‖u‖: ∂L/∂u = (g - (g·z) z)/‖u‖, ∂L/∂W = Σ_i ∂L/∂u_i x_iᵀ.
    Одинаков для Plain и Residual, так как ∂u/∂W не зависит от остаточной связи.
    """
    radial = np.sum(grad_Z * Z, axis=1, keepdims=True)
    grad_U = (grad_Z - radial * Z) / norms
    return grad_U.T @ X


def revert_matrix(V: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if Z.shape[1] != V.shape[1]:
        raise AdapterException(f"reverter/input dim mismatch: reverter d={V.shape[1]}, input dim={Z.shape[1]}")
    return Z @ V.T


def adapt(params: AdapterParams, X: FeatureSet) -> FeatureSet:
    if X.dim != params.d0:
        raise AdapterException(f"adapter/input dim mismatch: adapter d0={params.d0}, input dim={X.dim}")

    Z, _ = adapt_matrix(np.asarray(params.W, dtype=np.float64), X.matrix(), params.arch)
    return FeatureSet(view=X.view, ids=list(X.ids), vectors=Z, normalized=True)


def revert(params: ReverterParams, Z: FeatureSet) -> FeatureSet:
    """Реконструкция x̂_i = V z_i без нормализации"""
    if Z.dim != params.d:
        raise AdapterException(f"reverter/input dim mismatch: reverter d={params.d}, input dim={Z.dim}")

    X_hat = revert_matrix(np.asarray(params.V, dtype=np.float64), Z.matrix())
    return FeatureSet(view=Z.view, ids=list(Z.ids), vectors=X_hat, normalized=False)


def init_params(
    d0: int,
    d: int,
    arch: Union[Arch, str] = Arch.PLAIN,
    seed: int = 0,
    noise: float = DEFAULT_INIT_NOISE,
) -> Tuple[AdapterParams, ReverterParams]:
    """
    Инициализация, сохраняющая тождество: W = [I | 0] + N(0, noise²), V = [I | 0]ᵀ + N(0, noise²).
    Для Residual z = norm(x + Ix) = x, так что та же инициализация тоже тождественна.
    """
    if d0 < 1 or d < 1:
        raise AdapterException(f"invalid adapter dims d0={d0}, d={d}")
    arch = Arch(arch)
    if arch == Arch.RESIDUAL and d != d0:
        raise AdapterException("residual requires equal dims")

    rng = np.random.default_rng(seed)
    eye = np.eye(d, d0)
    W = eye + noise * rng.standard_normal((d, d0))
    V = eye.T + noise * rng.standard_normal((d0, d))
    return AdapterParams(W=W, arch=arch), ReverterParams(V=V)


def save_adapter(adapter: AdapterParams, reverter: ReverterParams, path: Union[str, Path], iteration: int = 0) -> None:
    """Файл CVAD v1: заголовок, W и V в float32 построчно, счетчик итераций u64"""
    if reverter.V.shape != (adapter.d0, adapter.d):
        raise AdapterException(f"reverter shape {reverter.V.shape} does not pair with adapter {adapter.W.shape}")

    header = _ADAPTER_HEADER.pack(ADAPTER_MAGIC, FORMAT_VERSION, _ARCH_CODES[adapter.arch], adapter.d0, adapter.d)
    Path(path).write_bytes(
        header
        + np.ascontiguousarray(adapter.W, dtype="<f4").tobytes()
        + np.ascontiguousarray(reverter.V, dtype="<f4").tobytes()
        + _ITERATION.pack(iteration)
    )


def load_adapter(path: Union[str, Path]) -> Tuple[AdapterParams, ReverterParams, int]:
    payload = Path(path).read_bytes()
    if len(payload) < 4 or payload[:4] != ADAPTER_MAGIC:
        raise CheckpointException("unrecognized format")
    if len(payload) < _ADAPTER_HEADER.size:
        raise CheckpointException("corrupt checkpoint: truncated header")

    _, version, arch_code, d0, d = _ADAPTER_HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise CheckpointException(f"checkpoint version {version} is not supported")
    arch = {code: a for a, code in _ARCH_CODES.items()}.get(arch_code)
    if arch is None:
        raise CheckpointException(f"corrupt checkpoint: arch code {arch_code}")

    expected = _ADAPTER_HEADER.size + 2 * d * d0 * 4 + _ITERATION.size
    if len(payload) != expected:
        raise CheckpointException("corrupt checkpoint: size does not match header")

    offset = _ADAPTER_HEADER.size
    W = np.frombuffer(payload, dtype="<f4", count=d * d0, offset=offset).reshape(d, d0).astype(np.float64)
    offset += d * d0 * 4
    V = np.frombuffer(payload, dtype="<f4", count=d * d0, offset=offset).reshape(d0, d).astype(np.float64)
    offset += d * d0 * 4
    (iteration,) = _ITERATION.unpack_from(payload, offset)
    return AdapterParams(W=W, arch=arch), ReverterParams(V=V), iteration
