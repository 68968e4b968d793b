"""Dense-matrix primitives: magnitude/direction decoupling, Gram measures, SVD truncation.

Everything here works on plain 2-D float64 numpy arrays and is pure. Matrices
coming from half-precision checkpoints are upcast before they reach this layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAGNITUDE_MODES = ("column", "row", "matrix")


def _as_matrix(w, name="W"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError(f"{name} contains non-finite entries")
    return w


def frobenius_norm(w) -> float:
    return float(np.linalg.norm(np.asarray(w, dtype=np.float64)))


def column_norms(w) -> np.ndarray:
    """Per-column Euclidean norms of ``w``, as a 1-D array of length cols."""
    w = _as_matrix(w)
    return np.linalg.norm(w, axis=0)


@dataclass(frozen=True)
class Decoupled:
    """A magnitude/direction split of one task matrix.

    ``magnitude`` holds the per-column norms (column mode), per-row norms
    (row mode), or the single whole-matrix norm (matrix mode). ``direction``
    is the source matrix with those norms divided out, so its units are
    norm-1 (or exactly zero where the source was degenerate).
    """

    magnitude: np.ndarray
    direction: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in MAGNITUDE_MODES:
            raise ValueError(f"unknown magnitude mode {self.mode!r}")


def decouple(w, mode: str = "column") -> Decoupled:
    """Split ``w`` into non-negative magnitudes and a unit-scale direction matrix.

    Degenerate units (norm below a relative floor) get magnitude 0 and a zero
    direction slice, so recompose() stays exact instead of dividing by ~0.
    """
    w = _as_matrix(w)
    if mode not in MAGNITUDE_MODES:
        raise ValueError(f"unknown magnitude mode {mode!r}")
    total = np.linalg.norm(w)
    if mode == "column":
        norms = np.linalg.norm(w, axis=0)
        tau = 1e-12 * total / np.sqrt(w.shape[1])
        keep = norms > tau
        direction = np.where(keep[None, :], w / np.where(keep, norms, 1.0)[None, :], 0.0)
        magnitude = np.where(keep, norms, 0.0)
    elif mode == "row":
        norms = np.linalg.norm(w, axis=1)
        tau = 1e-12 * total / np.sqrt(w.shape[0])
        keep = norms > tau
        direction = np.where(keep[:, None], w / np.where(keep, norms, 1.0)[:, None], 0.0)
        magnitude = np.where(keep, norms, 0.0)
    else:
        if total > 0.0:
            magnitude = np.array([total])
            direction = w / total
        else:
            magnitude = np.array([0.0])
            direction = np.zeros_like(w)
    return Decoupled(magnitude=magnitude, direction=direction, mode=mode)


def recompose(d: Decoupled) -> np.ndarray:
    """Exact inverse of decouple() up to floating-point rounding."""
    direction = np.asarray(d.direction, dtype=np.float64)
    magnitude = np.asarray(d.magnitude, dtype=np.float64)
    if d.mode == "column":
        if magnitude.shape != (direction.shape[1],):
            raise ValueError("magnitude length must equal direction column count")
        return direction * magnitude[None, :]
    if d.mode == "row":
        if magnitude.shape != (direction.shape[0],):
            raise ValueError("magnitude length must equal direction row count")
        return direction * magnitude[:, None]
    if magnitude.shape != (1,):
        raise ValueError("matrix mode expects a single magnitude value")
    return direction * magnitude[0]


def cross_gram_norm(w1, w2) -> float:
    """Squared Frobenius norm of w1.T @ w2.

    Zero exactly when every column of w1 is orthogonal to every column of w2;
    this is the pairwise interference measure the orthogonalizer drives down.
    """
    w1 = _as_matrix(w1, "W1")
    w2 = _as_matrix(w2, "W2")
    if w1.shape[0] != w2.shape[0]:
        raise ValueError(f"row counts differ: {w1.shape[0]} vs {w2.shape[0]}")
    return float(np.linalg.norm(w1.T @ w2) ** 2)


def svd_truncate(w, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-r factorization of ``w`` in the Frobenius sense.

    Returns (B, A) with B of shape (m, r) and A of shape (r, n); the singular
    values are folded into B. B @ A is the optimal rank-r approximation.
    """
    w = _as_matrix(w)
    if not (1 <= r <= min(w.shape)):
        raise ValueError(f"rank {r} out of range for shape {w.shape}")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    return u[:, :r] * s[:r], vt[:r]
