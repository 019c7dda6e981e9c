"""Input validation helpers shared by the numeric kernels.

Matrices are plain 2-D ``float64`` ndarrays. The helpers here enforce the
boundary contract that every public linear-algebra operation relies on:
correct dimensionality and finite entries.
"""

from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """An iterative numeric routine failed to converge.

    Attributes
    ----------
    residual : float
        The convergence measure at the point of failure.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def as_matrix(a, name: str = "matrix", allow_empty: bool = False) -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array or raise ``ValueError``."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not allow_empty and (m.shape[0] < 1 or m.shape[1] < 1):
        raise ValueError(f"{name} must be non-empty, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(a: np.ndarray, name: str = "array") -> None:
    """Raise ``ValueError`` if ``a`` contains NaN or Inf."""
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")


def check_shape(a: np.ndarray, shape: tuple, name: str = "array") -> None:
    """Raise ``ValueError`` unless ``a.shape == shape``."""
    if a.shape != tuple(shape):
        raise ValueError(f"{name} has shape {a.shape}, expected {tuple(shape)}")
