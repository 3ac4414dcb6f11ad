"""
Согласованность информации при адаптации: реконструкция исходных признаков X из адаптированных Z через ревертер.
"""
from typing import Literal, Optional, Tuple, Union

import numpy as np

from app.adapter_core import adapt_backward, adapt_matrix, revert_matrix
from app.feature_validator import FeatureValidationException
from app.models import Arch, FeatureSet, ReconLoss


def _as_matrix(features: Union[FeatureSet, np.ndarray]) -> np.ndarray:
    if isinstance(features, FeatureSet):
        return features.matrix()
    return np.asarray(features, dtype=np.float64)


def reconstruction_loss(X: Union[FeatureSet, np.ndarray], X_hat: Union[FeatureSet, np.ndarray]) -> ReconLoss:
    """L_re = Σ_i ‖x_i - x̂_i‖²; градиент по x̂_i равен 2(x̂_i - x_i)"""
    X, X_hat = _as_matrix(X), _as_matrix(X_hat)
    if X.shape != X_hat.shape:
        raise FeatureValidationException(f"reconstruction shape mismatch: {X.shape} vs {X_hat.shape}")

    diff = X_hat - X
    return ReconLoss(value=float(np.sum(diff * diff)), grad=2.0 * diff)


def aic_grads(
    X: np.ndarray,
    Z: np.ndarray,
    W: np.ndarray,
    V: np.ndarray,
    arch: Arch = Arch.PLAIN,
    norms: Optional[np.ndarray] = None,
    reduction: Literal["sum", "mean"] = "sum",
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    Градиенты L_re(X, f_φ(Z)) по V и, через зависимость Z от W (включая нормализацию), по W.
    reduction="mean" делит значение и все градиенты на число записей, как 1/M' в InfoNCE.

    Returns:
        (loss, grad_W, grad_V, grad_Z)
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != Z.shape[0]:
        raise FeatureValidationException(f"reconstruction shape mismatch: {X.shape[0]} vs {Z.shape[0]} records")
    if norms is None:
        _, norms = adapt_matrix(W, X, arch)

    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    recon = reconstruction_loss(X, revert_matrix(V, Z))
    value, grad = recon.value, recon.grad
    if reduction == "mean" and X.shape[0]:
        value, grad = value / X.shape[0], grad / X.shape[0]
    grad_V = grad.T @ Z
    grad_Z = grad @ V
    grad_W = adapt_backward(Z, norms, X, grad_Z)
    return value, grad_W, grad_V, grad_Z
