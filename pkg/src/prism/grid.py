"""2D grids, unitary FFTs, seeded random streams and the PGRD file format.

Grids are plain ``float64`` numpy arrays of shape ``(height, width)``;
spectra are ``complex128`` arrays of the same shape. Both transforms use the
unitary normalization, so Parseval holds without extra factors.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from prism.errors import PrismError, ShapeMismatch, SymmetryViolation

PGRD_MAGIC = b"PGRD"
_HEADER = struct.Struct("<4sIIB")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}

# Imaginary residue (relative to the spectrum norm) above which ifft2 refuses.
IMAG_TOLERANCE = 1e-10


def as_grid(data, *, name: str = "grid") -> np.ndarray:
    """Validate and return ``data`` as a finite 2D float64 array."""
    g = np.asarray(data, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise ShapeMismatch(f"{name} must be a non-empty 2D array, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"{name} contains non-finite values")
    return g


def check_same_shape(*arrays: np.ndarray) -> tuple[int, int]:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"shape {a.shape} does not match {shape}")
    return shape


def fft2(g: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT over the last two axes."""
    return np.fft.fft2(g, norm="ortho")


def ifft2(s: np.ndarray, *, check: bool = True) -> np.ndarray:
    """Inverse unitary 2D DFT returning the real part.

    Raises :class:`SymmetryViolation` when the discarded imaginary part is
    larger than ``IMAG_TOLERANCE`` relative to the norm of the result, which
    means ``s`` was not the spectrum of a real grid.
    """
    out = np.fft.ifft2(s, norm="ortho")
    if check:
        scale = np.linalg.norm(out)
        resid = np.linalg.norm(out.imag)
        if resid > IMAG_TOLERANCE * max(scale, np.finfo(float).tiny):
            raise SymmetryViolation(
                f"imaginary residue {resid:.3e} exceeds tolerance (norm {scale:.3e})"
            )
    return np.ascontiguousarray(out.real)


def frequency_radius(shape: tuple[int, int]) -> np.ndarray:
    """Radial frequency magnitude in cycles per grid, FFT ordering."""
    fy = np.fft.fftfreq(shape[0]) * shape[0]
    fx = np.fft.fftfreq(shape[1]) * shape[1]
    return np.hypot(fy[:, None], fx[None, :])


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional integer stream path.

    Distinct stream paths give statistically independent generators, so a
    chain can derive a fresh generator per iteration from ``(seed, k)`` and
    be replayed or resumed from any iteration.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(seq))


def draw_standard_normal(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    if min(shape) < 1:
        raise ShapeMismatch(f"shape must be positive, got {shape}")
    return rng.standard_normal(shape)


def write_pgrd(path, grid: np.ndarray, *, dtype: str = "f64") -> None:
    """Write a grid in the PGRD binary format (atomically, via rename)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeMismatch(f"PGRD holds 2D grids, got shape {grid.shape}")
    tag = {"f64": 0, "f32": 1}[dtype]
    payload = np.ascontiguousarray(grid, dtype=_DTYPES[tag]).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(PGRD_MAGIC, grid.shape[0], grid.shape[1], tag))
        fh.write(payload)
    os.replace(tmp, path)


def read_pgrd(path) -> np.ndarray:
    """Read a PGRD file; the result is always float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise PrismError(f"{path}: truncated PGRD header")
    magic, h, w, tag = _HEADER.unpack_from(raw)
    if magic != PGRD_MAGIC:
        raise PrismError(f"{path}: bad magic {magic!r}")
    if tag not in _DTYPES:
        raise PrismError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = _HEADER.size + h * w * dt.itemsize
    if len(raw) != expected:
        raise PrismError(f"{path}: payload size {len(raw)} != {expected}")
    data = np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(h, w)
    return data.astype(np.float64)
