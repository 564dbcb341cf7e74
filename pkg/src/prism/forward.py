"""Circular-convolution measurement operator.

Kernels live on the full image grid with their centre at index ``(0, 0)``
and wrap-around, so every operator here is circulant and diagonalized by
the DFT. The transfer function is the unnormalized DFT of the kernel, i.e.
the eigenvalues of the convolution matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prism.errors import BadSupport, DegenerateScale, ShapeMismatch
from prism.grid import as_grid, check_same_shape, draw_standard_normal, fft2, ifft2


def _as_support(support) -> tuple[int, int] | None:
    if support is None:
        return None
    if np.isscalar(support):
        support = (int(support), int(support))
    sh, sw = (int(s) for s in support)
    if sh < 1 or sw < 1:
        raise BadSupport(f"support must be positive, got {support}")
    return sh, sw


def support_mask(shape: tuple[int, int], support) -> np.ndarray:
    """Boolean mask of a ``support``-sized window centred on the origin (wrapped)."""
    sh, sw = _as_support(support)
    if sh > shape[0] or sw > shape[1]:
        raise BadSupport(f"support {support} exceeds grid {shape}")
    rows = np.zeros(shape[0], dtype=bool)
    cols = np.zeros(shape[1], dtype=bool)
    rows[np.arange(-(sh // 2), sh - sh // 2) % shape[0]] = True
    cols[np.arange(-(sw // 2), sw - sw // 2) % shape[1]] = True
    return rows[:, None] & cols[None, :]


def embed_kernel(small: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place a small centred kernel on a full grid with its centre at the origin."""
    small = np.asarray(small, dtype=np.float64)
    sh, sw = small.shape
    if sh > shape[0] or sw > shape[1]:
        raise BadSupport(f"kernel {small.shape} does not fit grid {shape}")
    out = np.zeros(shape)
    out[:sh, :sw] = small
    return np.roll(out, (-(sh // 2), -(sw // 2)), axis=(0, 1))


def crop_kernel(grid: np.ndarray, support) -> np.ndarray:
    """Inverse of :func:`embed_kernel`: the centred ``support`` window as a small array."""
    sh, sw = _as_support(support)
    rolled = np.roll(grid, (sh // 2, sw // 2), axis=(0, 1))
    return rolled[:sh, :sw].copy()


@dataclass(frozen=True)
class Kernel:
    """A blur kernel on the image grid, centred at the origin with wrap-around.

    ``support`` records the nominal kernel extent; ``normalized`` flags a
    physical kernel (non-negative, unit sum). Gibbs iterates need not be
    normalized.
    """

    grid: np.ndarray
    support: tuple[int, int] | None = None
    normalized: bool = False

    def __post_init__(self):
        g = as_grid(self.grid, name="kernel")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "support", _as_support(self.support))
        if self.normalized:
            if g.min() < 0 or abs(g.sum() - 1.0) > 1e-9:
                raise ValueError("kernel flagged normalized must be non-negative with unit sum")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def with_grid(self, grid: np.ndarray, normalized: bool = False) -> "Kernel":
        return Kernel(grid, self.support, normalized)


def delta_kernel(shape: tuple[int, int], support=None) -> Kernel:
    g = np.zeros(shape)
    g[0, 0] = 1.0
    return Kernel(g, support, normalized=True)


def as_kernel(k) -> Kernel:
    return k if isinstance(k, Kernel) else Kernel(k)


def transfer_function(grid: np.ndarray) -> np.ndarray:
    """Eigenvalues of the circular convolution by ``grid``."""
    return np.fft.fft2(grid)


@dataclass(frozen=True)
class ForwardModel:
    """``y = h * x + n`` with circular convolution and ``n ~ N(0, noise_sigma^2 I)``."""

    kernel: Kernel
    noise_sigma: float = 0.0
    transfer: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_kernel(self.kernel))
        sigma = float(self.noise_sigma)
        if not np.isfinite(sigma) or sigma < 0:
            raise DegenerateScale(f"noise_sigma must be finite and >= 0, got {sigma}")
        object.__setattr__(self, "noise_sigma", sigma)
        t = transfer_function(self.kernel.grid)
        t.setflags(write=False)
        object.__setattr__(self, "transfer", t)

    @property
    def shape(self) -> tuple[int, int]:
        return self.kernel.shape

    def _check(self, g) -> np.ndarray:
        g = as_grid(g)
        check_same_shape(self.kernel.grid, g)
        return g

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Circular convolution ``h * x``."""
        x = self._check(x)
        return ifft2(self.transfer * fft2(x))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Circular correlation with the kernel (``H^T y``)."""
        y = self._check(y)
        return ifft2(np.conj(self.transfer) * fft2(y))

    def measure(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """A noisy measurement ``H x + noise_sigma * w`` with ``w`` standard normal."""
        clean = self.apply(x)
        if self.noise_sigma == 0.0:
            return clean
        return clean + self.noise_sigma * draw_standard_normal(rng, clean.shape)


apply = ForwardModel.apply
adjoint = ForwardModel.adjoint
measure = ForwardModel.measure


def commute(x: np.ndarray, m) -> np.ndarray:
    """``C_x m``: convolution with the roles of image and kernel swapped.

    Equal to ``ForwardModel(m).apply(x)`` because circular convolution
    commutes; the image ``x`` acts as the transfer function.
    """
    x = as_grid(x, name="x")
    m = as_kernel(m).grid
    check_same_shape(x, m)
    return ifft2(transfer_function(x) * fft2(m))
