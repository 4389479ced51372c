"""Helpers for the Dynamical Systems Tree library."""

from __future__ import annotations

from typing import Sequence, Type

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import xlogy

from .const import PRECISION_EIGENVALUE_MIN, SIGNIFICANT_DIGITS
from .errors import NumericalError, PrecisionError

Seed = int | Sequence[int]

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2PIE = float(np.log(2.0 * np.pi * np.e))


def make_rng(seed: Seed) -> np.random.Generator:
    """Counter based generator, a single seed fixes every draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def spd_inverse(
    matrix: np.ndarray,
    what: str,
    error: Type[NumericalError] = PrecisionError,
) -> tuple[np.ndarray, float]:
    """
    Invert a symmetric positive definite matrix.
    Returns the (symmetrized) inverse and the log determinant of the input.
    """
    matrix = symmetrize(np.asarray(matrix, dtype=float))
    if not np.all(np.isfinite(matrix)):
        raise error(f"{what} has non-finite entries")

    min_eigenvalue = np.linalg.eigvalsh(matrix)[0]
    if min_eigenvalue <= PRECISION_EIGENVALUE_MIN:
        raise error(
            f"{what} is not positive definite (min eigenvalue {min_eigenvalue:.3g})"
        )

    factor = cho_factor(matrix, lower=True)
    inverse = symmetrize(cho_solve(factor, np.eye(matrix.shape[0])))
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return inverse, logdet


def floor_eigenvalues(matrix: np.ndarray, floor: float) -> np.ndarray:
    """Clip the spectrum of a symmetric matrix, or of each matrix in a stack, from below."""
    eigenvalues, eigenvectors = np.linalg.eigh(symmetrize(matrix))
    eigenvalues = np.maximum(eigenvalues, floor)
    return symmetrize(
        (eigenvectors * eigenvalues[..., None, :]) @ np.swapaxes(eigenvectors, -1, -2)
    )


def gaussian_entropy(logdet: float, dim: int) -> float:
    return 0.5 * (dim * LOG_2PIE + logdet)


def expected_gaussian_loglik(
    mean: np.ndarray,
    second: np.ndarray,
    center: np.ndarray,
    precision: np.ndarray,
    logdet: float,
) -> float:
    """E[log N(x | center, cov)] when x has first moment `mean` and second moment `second`."""
    scatter = (
        second
        - np.outer(mean, center)
        - np.outer(center, mean)
        + np.outer(center, center)
    )
    return -0.5 * (
        len(center) * LOG_2PI + logdet + float(np.sum(precision * scatter))
    )


def expected_transition_loglik(
    second: np.ndarray,
    cross: np.ndarray,
    A: np.ndarray,
    precision: np.ndarray,
    logdet: float,
) -> np.ndarray:
    """
    E[log N(x_t | A x_{t-1}, Q)] for t = 1..T, vectorized over t.
    `second` holds E[x_t x_t'] for t = 0..T, `cross` holds E[x_t x_{t-1}'] for t = 1..T.
    """
    dim = A.shape[0]
    cross_A = cross @ A.T
    scatter = (
        second[1:]
        - cross_A
        - np.swapaxes(cross_A, -1, -2)
        + A @ second[:-1] @ A.T
    )
    quadratic = np.einsum("ab,tba->t", precision, scatter)
    return -0.5 * (dim * LOG_2PI + logdet + quadratic)


def expected_log_table(weights: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Elementwise weight * log(table), zero where the weight is zero."""
    return xlogy(weights, table)


def masked_product_sum(probabilities: np.ndarray, log_values: np.ndarray) -> float:
    """Sum of p * log_value treating 0 * -inf as 0."""
    mask = probabilities > 0
    return float(np.sum(probabilities[mask] * log_values[mask]))


def draw_categorical(rng: np.random.Generator, probabilities: np.ndarray) -> int:
    cumulative = np.cumsum(probabilities)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(index, len(probabilities) - 1)


def format_number(value: float) -> float:
    """Round to the number of significant digits used in printed output."""
    return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
