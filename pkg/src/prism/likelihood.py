"""Exact samplers for the two Gaussian likelihood conditionals.

Both the image step (``z`` given ``x``, the kernel and ``y``) and the kernel
step (``m`` given ``x``, the kernel and ``y``) have a circulant precision

    Q = T^H T / sigma_y^2 + I / rho^2

where ``T`` is the convolution by the kernel (image step) or by the image
(kernel step). In the unitary Fourier basis ``Q`` is diagonal with entries
``|t(f)|^2 / sigma_y^2 + 1 / rho^2``, so means are a per-frequency division
and exact draws are white noise scaled by ``Q^{-1/2}`` spectrally.

:func:`dense_oracle` solves the same problems by explicit matrices and is
kept as an independent check of the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from prism.errors import DegenerateScale, TooLarge
from prism.forward import ForwardModel, as_kernel, transfer_function
from prism.grid import as_grid, check_same_shape, fft2, ifft2

DENSE_MAX_PIXELS = 144


def _check_scale(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise DegenerateScale(f"{name} must be positive and finite, got {value}")
    return value


@dataclass(frozen=True)
class GaussianConditional:
    """A stationary Gaussian described in the unitary Fourier basis.

    ``precision`` holds the real per-frequency precision, ``spectral_mean``
    the Fourier coefficients of the (real) mean.
    """

    precision: np.ndarray
    spectral_mean: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.precision.shape

    @property
    def mean(self) -> np.ndarray:
        return ifft2(self.spectral_mean)

    @property
    def variance(self) -> np.ndarray:
        """Per-pixel marginal variance (constant over the grid)."""
        return np.full(self.shape, np.mean(1.0 / self.precision))

    def covariance(self) -> np.ndarray:
        """Dense ``n x n`` covariance; small grids only."""
        n = self.precision.size
        if n > DENSE_MAX_PIXELS:
            raise TooLarge(f"dense covariance needs n <= {DENSE_MAX_PIXELS}, got {n}")
        basis = np.eye(n).reshape(n, *self.shape)
        cols = ifft2(fft2(basis) / self.precision)
        return cols.reshape(n, n).T

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Exact draw(s) from ``N(mean, Q^{-1})``.

        With ``size`` given, returns an array of shape ``(size, H, W)``.
        """
        shape = self.shape if size is None else (size, *self.shape)
        w = rng.standard_normal(shape)
        return self.mean + ifft2(fft2(w) / np.sqrt(self.precision))


def spectral_conditional(transfer, y, coupled, rho: float, sigma_y: float) -> GaussianConditional:
    """Posterior of ``u`` under ``y ~ N(T u, sigma_y^2)`` and ``coupled ~ N(u, rho^2)``."""
    rho = _check_scale(rho, "rho")
    sigma_y = _check_scale(sigma_y, "sigma_y")
    precision = np.abs(transfer) ** 2 / sigma_y**2 + 1.0 / rho**2
    rhs = np.conj(transfer) * fft2(y) / sigma_y**2 + fft2(coupled) / rho**2
    return GaussianConditional(precision, rhs / precision)


def build_image_conditional(model: ForwardModel, y, x, rho_x: float) -> GaussianConditional:
    """Conditional of the split image variable ``z`` given ``x``, the kernel and ``y``."""
    y = as_grid(y, name="y")
    x = as_grid(x, name="x")
    check_same_shape(model.kernel.grid, y, x)
    return spectral_conditional(model.transfer, y, x, rho_x, model.noise_sigma)


def build_kernel_conditional(x, y, phi, rho_phi: float, sigma_y: float) -> GaussianConditional:
    """Conditional of the split kernel variable ``m`` given ``x``, ``phi`` and ``y``.

    The image takes the role of the convolution kernel, so this is the
    image conditional with the transfer function of ``x``.
    """
    x = as_grid(x, name="x")
    y = as_grid(y, name="y")
    phi = as_kernel(phi).grid
    check_same_shape(x, y, phi)
    return spectral_conditional(transfer_function(x), y, phi, rho_phi, sigma_y)


def sample(cond: GaussianConditional, rng: np.random.Generator) -> np.ndarray:
    return cond.sample(rng)


def circulant_matrix(grid: np.ndarray) -> np.ndarray:
    """Dense matrix of circular convolution by ``grid``, built by direct indexing."""
    h, w = grid.shape
    n = h * w
    mat = np.empty((n, n))
    rows, cols = np.divmod(np.arange(n), w)
    for i in range(n):
        # (H x)[r, c] = sum_{r', c'} g[(r - r') mod h, (c - c') mod w] x[r', c']
        mat[i] = grid[(rows[i] - rows) % h, (cols[i] - cols) % w]
    return mat


def dense_oracle(operator, y, coupled, rho: float, sigma_y: float):
    """Dense reference solution of the Gaussian conditional.

    ``operator`` is the convolution grid (kernel for the image step, image
    for the kernel step). Returns ``(mean, covariance)`` with the mean as a
    grid and the covariance as an ``n x n`` matrix.
    """
    operator = as_grid(operator, name="operator")
    y = as_grid(y, name="y")
    coupled = as_grid(coupled, name="coupled")
    check_same_shape(operator, y, coupled)
    if operator.size > DENSE_MAX_PIXELS:
        raise TooLarge(f"dense oracle limited to {DENSE_MAX_PIXELS} pixels, got {operator.size}")
    rho = _check_scale(rho, "rho")
    sigma_y = _check_scale(sigma_y, "sigma_y")

    mat = circulant_matrix(operator)
    n = mat.shape[0]
    precision = mat.T @ mat / sigma_y**2 + np.eye(n) / rho**2
    rhs = mat.T @ y.ravel() / sigma_y**2 + coupled.ravel() / rho**2
    factor = scipy.linalg.cho_factor(precision, lower=True)
    mean = scipy.linalg.cho_solve(factor, rhs)
    cov = scipy.linalg.cho_solve(factor, np.eye(n))
    return mean.reshape(y.shape), cov
