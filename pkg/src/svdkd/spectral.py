"""Thin SVD of feature matrices, explained-variance spectra and importance scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from svdkd.errors import ArgumentError, DataError, DegenerateSpectrumError, NumericalError


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray  # n x r
    singular_values: np.ndarray  # r, nonincreasing
    V: np.ndarray  # d x r, right singular vectors as columns

    @property
    def rank_bound(self) -> int:
        return self.singular_values.size

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.V.T


@dataclass(frozen=True)
class SpectrumReport:
    weights: np.ndarray
    cumulative: np.ndarray
    importance: np.ndarray
    singular_values: np.ndarray
    effective_rank_90: int
    effective_rank_99: int


@dataclass(frozen=True)
class ProjectionBasis:
    V_k: np.ndarray  # d x k

    @property
    def k(self) -> int:
        return self.V_k.shape[1]

    @property
    def d(self) -> int:
        return self.V_k.shape[0]

    def project(self, F: np.ndarray) -> np.ndarray:
        return F @ self.V_k


def thin_svd(F: np.ndarray, center: bool = False) -> SvdFactors:
    """Thin SVD ``F = U diag(s) V^T`` with r = min(n, d).

    Columns are sign-normalised so that the largest-magnitude entry of each
    right singular vector is positive; this makes results reproducible across
    LAPACK builds. ``center`` subtracts the column mean first (off by default).
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
        raise ArgumentError(f"expected a non-empty 2-D matrix, got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise DataError("cannot decompose a matrix with non-finite entries")
    if center:
        F = F - F.mean(axis=0)
    try:
        U, s, Vt = np.linalg.svd(F, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    V = Vt.T
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[pivot, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    U = U * signs
    V = V * signs
    # LAPACK returns sorted values; enforce exact monotonicity against ties in the last ulp
    s = np.minimum.accumulate(np.maximum(s, 0.0))
    return SvdFactors(U, s, V)


def spectrum_report(factors: SvdFactors) -> SpectrumReport:
    """Per-component explained-variance ratios and per-dimension importance.

    ``weights[k] = s_k^2 / sum_j s_j^2`` and
    ``importance[i] = sum_k |V[i, k]| * weights[k]``.
    """
    s = factors.singular_values
    energy = s**2
    total = energy.sum()
    if not total > 0:
        raise DegenerateSpectrumError("all singular values are zero; explained variance is undefined")
    weights = energy / total
    cumulative = np.cumsum(weights)
    importance = np.abs(factors.V) @ weights
    return SpectrumReport(
        weights=weights,
        cumulative=cumulative,
        importance=importance,
        singular_values=s.copy(),
        effective_rank_90=effective_rank(cumulative, 0.90),
        effective_rank_99=effective_rank(cumulative, 0.99),
    )


def effective_rank(cumulative: np.ndarray, level: float) -> int:
    """Smallest k (1-based) whose cumulative explained variance reaches ``level``."""
    hits = np.flatnonzero(cumulative >= level)
    return int(hits[0] + 1) if hits.size else int(cumulative.size)


def top_k_basis(factors: SvdFactors, k: int) -> ProjectionBasis:
    d = factors.V.shape[0]
    if k < 1 or k > d:
        raise ArgumentError(f"k must lie in [1, {d}], got {k}")
    if k > factors.V.shape[1]:
        raise ArgumentError(f"k={k} exceeds the {factors.V.shape[1]} available singular vectors (r = min(n, d))")
    positive = int(np.count_nonzero(factors.singular_values > 0))
    if k > positive:
        warnings.warn(
            f"k={k} exceeds the {positive} strictly positive singular values; trailing basis vectors span the null space",
            RuntimeWarning,
            stacklevel=2,
        )
    return ProjectionBasis(np.ascontiguousarray(factors.V[:, :k]))


def importance_concentration(importance: np.ndarray, fraction: float = 0.10) -> float:
    """Share of total importance carried by the top ``fraction`` of dimensions."""
    ranked = np.sort(importance)[::-1]
    top = max(1, int(round(fraction * ranked.size)))
    return float(ranked[:top].sum() / ranked.sum())
