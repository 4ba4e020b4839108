"""Truncated DCT codec for temporal channels with replicate-last padding.

Sequences are laid out time-first: an array of shape ``(F, ...)`` is treated
as ``F`` samples of every trailing channel.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, ShapeError

__all__ = [
    "DctCoeffs",
    "kronecker",
    "dct_basis",
    "dct_forward",
    "idct",
    "pad_replicate_last",
    "encode_padded",
]

_lock = threading.Lock()


@dataclass(frozen=True)
class DctCoeffs:
    """First ``L`` DCT coefficients of a length-``original_length`` sequence."""

    coeffs: np.ndarray  # (L, ...)
    original_length: int

    def __post_init__(self):
        n = self.coeffs.shape[0]
        if not 1 <= n <= self.original_length:
            raise InvalidParameterError(
                f"need 1 <= L <= original_length, got L={n}, "
                f"original_length={self.original_length}")

    @property
    def num_coeffs(self) -> int:
        return self.coeffs.shape[0]


def kronecker(i: int, j: int) -> int:
    return 1 if i == j else 0


@lru_cache(maxsize=64)
def _basis(F: int) -> np.ndarray:
    # rows: coefficient index l (0-based), cols: time index p (0-based)
    l = np.arange(1, F + 1)[:, None]
    p = np.arange(1, F + 1)[None, :]
    scale = np.array([1.0 / np.sqrt(1.0 + kronecker(int(k), 1)) for k in range(1, F + 1)])
    B = np.sqrt(2.0 / F) * scale[:, None] * np.cos(np.pi / (2.0 * F) * (2 * p - 1) * (l - 1))
    B.setflags(write=False)
    return B


def dct_basis(F: int) -> np.ndarray:
    """Return the read-only orthonormal ``F x F`` DCT-II basis (row ``l`` = coefficient ``l``)."""
    if F < 1:
        raise InvalidParameterError(f"sequence length must be >= 1, got {F}")
    with _lock:
        return _basis(int(F))


def dct_forward(sequence, L: int | None = None) -> DctCoeffs:
    """Forward transform keeping the first ``L`` coefficients.

    Args:
        sequence: array of shape ``(F, ...)``.
        L: number of coefficients to keep; defaults to ``F``.

    Returns:
        DctCoeffs with ``coeffs`` of shape ``(L, ...)``.
    """
    x = np.asarray(sequence, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] < 1:
        raise InvalidInputError("sequence must have at least one frame")
    F = x.shape[0]
    L = F if L is None else int(L)
    if not 1 <= L <= F:
        raise InvalidParameterError(f"L must be in [1, {F}], got {L}")
    B = dct_basis(F)[:L]
    flat = x.reshape(F, -1)
    h = B @ flat
    return DctCoeffs(h.reshape((L,) + x.shape[1:]), F)


def idct(coeffs: DctCoeffs, F: int | None = None) -> np.ndarray:
    """Inverse transform of (possibly truncated) coefficients back to ``F`` frames."""
    F = coeffs.original_length if F is None else int(F)
    if F != coeffs.original_length:
        raise ShapeError(
            f"F={F} does not match original_length={coeffs.original_length}")
    h = np.asarray(coeffs.coeffs, dtype=np.float64)
    L = h.shape[0]
    B = dct_basis(F)[:L]
    out = B.T @ h.reshape(L, -1)
    return out.reshape((F,) + h.shape[1:])


def pad_replicate_last(sequence, T: int) -> np.ndarray:
    """Append ``T`` copies of the last frame."""
    x = np.asarray(sequence)
    if x.ndim == 0 or x.shape[0] < 1:
        raise InvalidInputError("sequence must have at least one frame")
    if T < 0:
        raise InvalidParameterError(f"T must be >= 0, got {T}")
    if T == 0:
        return x.copy()
    tail = np.repeat(x[-1:], T, axis=0)
    return np.concatenate([x, tail], axis=0)


def encode_padded(sequence, T: int, L: int) -> DctCoeffs:
    """DCT of the replicate-padded sequence, truncated to ``L`` coefficients."""
    x = np.asarray(sequence, dtype=np.float64)
    if L > x.shape[0] + T:
        raise InvalidParameterError(f"L={L} exceeds padded length {x.shape[0] + T}")
    return dct_forward(pad_replicate_last(x, T), L)
