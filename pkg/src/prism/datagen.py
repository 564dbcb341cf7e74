"""Synthetic motion-blur kernels, texture images and problem instances."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from prism.errors import BadSupport
from prism.forward import ForwardModel, Kernel, embed_kernel
from prism.grid import fft2, frequency_radius, ifft2, make_rng, read_pgrd, write_pgrd
from prism.prior import power_law_spectrum, project_kernel

# Stream ids under an instance seed.
KERNEL_STREAM = 1
IMAGE_STREAM = 2
NOISE_STREAM = 3

TRAJECTORY_POINTS = 64


def motion_trajectory(n_points: int, intensity: float, rng: np.random.Generator) -> np.ndarray:
    """Planar path from a correlated random walk with unit-length steps.

    The heading starts in a random direction and each step turns by a
    Gaussian angle whose SD grows with ``intensity``; ``intensity = 0``
    gives a straight line.
    """
    heading = rng.uniform(0, 2 * np.pi)
    turns = rng.standard_normal(n_points - 1) * (np.pi / 4) * float(intensity)
    # occasional sharp jerks, as in camera shake
    jerks = rng.random(n_points - 1) < 0.1 * intensity
    turns = turns + jerks * rng.choice([-1.0, 1.0], size=n_points - 1) * np.pi / 2 * intensity
    angles = heading + np.concatenate([[0.0], np.cumsum(turns[:-1])])
    steps = np.stack([np.sin(angles), np.cos(angles)], axis=1)
    return np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])


def rasterize_path(path: np.ndarray, size: int) -> np.ndarray:
    """Bilinear splat of a path (rescaled to fit) onto a ``size x size`` canvas."""
    p = path - path.mean(axis=0)
    extent = np.abs(p).max()
    radius = (size - 1) / 2
    if extent > 0:
        p = p * (radius / extent)
    p = p + radius
    canvas = np.zeros((size, size))
    # dense resampling keeps the rasterized path connected
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.linspace(0, s[-1], max(4 * len(p), int(8 * s[-1]) + 1)) if s[-1] > 0 else np.zeros(1)
    pts = np.stack([np.interp(t, s, p[:, 0]), np.interp(t, s, p[:, 1])], axis=1)
    r0 = np.clip(np.floor(pts[:, 0]).astype(int), 0, size - 1)
    c0 = np.clip(np.floor(pts[:, 1]).astype(int), 0, size - 1)
    fr = pts[:, 0] - r0
    fc = pts[:, 1] - c0
    r1 = np.minimum(r0 + 1, size - 1)
    c1 = np.minimum(c0 + 1, size - 1)
    np.add.at(canvas, (r0, c0), (1 - fr) * (1 - fc))
    np.add.at(canvas, (r1, c0), fr * (1 - fc))
    np.add.at(canvas, (r0, c1), (1 - fr) * fc)
    np.add.at(canvas, (r1, c1), fr * fc)
    return canvas


def generate_motion_kernel(
    shape: tuple[int, int],
    support: int,
    intensity: float,
    rng: np.random.Generator,
    smoothing: float = 0.5,
) -> Kernel:
    """Random normalized motion-blur kernel with an odd ``support x support`` extent."""
    support = int(support)
    if support < 3 or support % 2 == 0 or support > min(shape) // 2:
        raise BadSupport(f"support must be odd and in [3, {min(shape) // 2}], got {support}")
    if not 0.0 <= intensity <= 1.0:
        raise ValueError(f"intensity must be in [0, 1], got {intensity}")
    path = motion_trajectory(TRAJECTORY_POINTS, intensity, rng)
    small = rasterize_path(path, support)
    if smoothing > 0:
        small = ndimage.gaussian_filter(small, smoothing, mode="constant")
    return project_kernel(Kernel(embed_kernel(small, shape), (support, support)))


def generate_texture_image(shape: tuple[int, int], slope: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary Gaussian field with power ``(1 + |f|)^-slope``, rescaled to [0, 1]."""
    if not 0.0 <= slope <= 4.0:
        raise ValueError(f"slope must be in [0, 4], got {slope}")
    w = rng.standard_normal(shape)
    field_ = ifft2(fft2(w) * np.sqrt(power_law_spectrum(shape, slope)))
    lo, hi = field_.min(), field_.max()
    if hi - lo == 0:
        return np.full(shape, 0.5)
    return (field_ - lo) / (hi - lo)


def radial_power(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radially averaged power spectrum (DC excluded): ``(radius, power)``."""
    power = np.abs(fft2(img - img.mean())) ** 2
    radius = np.rint(frequency_radius(img.shape)).astype(int)
    rmax = min(img.shape) // 2
    rs = np.arange(1, rmax + 1)
    avg = np.array([power[radius == r].mean() for r in rs])
    return rs.astype(float), avg


@dataclass(frozen=True)
class ProblemInstance:
    truth_x: np.ndarray
    truth_kernel: Kernel
    y: np.ndarray
    noise_sigma: float
    seed: int
    provenance: dict = field(default_factory=dict)


def make_instance(
    size: int | tuple[int, int] = 64,
    *,
    image: Optional[np.ndarray] = None,
    slope: float = 2.0,
    kernel: Optional[Kernel] = None,
    kernel_support: int = 31,
    intensity: float = 0.5,
    sigma: float = 0.05,
    seed: int = 0,
) -> ProblemInstance:
    """Blur a texture (or the given image) with a random motion kernel and add noise.

    Image, kernel and noise come from independent streams of ``seed``, so
    the instance is reproduced bit-exactly from its provenance.
    """
    shape = (size, size) if np.isscalar(size) else tuple(size)
    provenance = {"seed": seed, "noise_sigma": sigma}
    if image is None:
        image = generate_texture_image(shape, slope, make_rng(seed, IMAGE_STREAM))
        provenance.update(image="texture", slope=slope)
    else:
        image = np.asarray(image, dtype=float)
        shape = image.shape
        provenance.update(image="supplied")
    if kernel is None:
        kernel = generate_motion_kernel(shape, kernel_support, intensity, make_rng(seed, KERNEL_STREAM))
        provenance.update(kernel="motion", kernel_support=kernel_support, intensity=intensity)
    else:
        provenance.update(kernel="supplied")
        if kernel.support is not None:
            provenance.update(kernel_support=kernel.support[0])
    y = ForwardModel(kernel, sigma).measure(image, make_rng(seed, NOISE_STREAM))
    provenance.update(height=shape[0], width=shape[1])
    return ProblemInstance(image, kernel, y, float(sigma), int(seed), provenance)


def save_instance(inst: ProblemInstance, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pgrd(directory / "truth.pgrd", inst.truth_x)
    write_pgrd(directory / "kernel.pgrd", inst.truth_kernel.grid)
    write_pgrd(directory / "y.pgrd", inst.y)
    meta = dict(inst.provenance)
    meta.update(noise_sigma=repr(inst.noise_sigma), seed=inst.seed,
                kernel_normalized=int(inst.truth_kernel.normalized))
    if inst.truth_kernel.support is not None:
        meta["kernel_support"] = inst.truth_kernel.support[0]
    text = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    (directory / "manifest.txt").write_text(text, encoding="utf-8")
    return directory


def load_instance(directory) -> ProblemInstance:
    from prism.prior import read_meta

    directory = Path(directory)
    meta = read_meta(directory / "manifest.txt")
    support = int(meta["kernel_support"]) if "kernel_support" in meta else None
    kernel = Kernel(
        read_pgrd(directory / "kernel.pgrd"), support,
        normalized=bool(int(meta.get("kernel_normalized", "0"))),
    )
    return ProblemInstance(
        truth_x=read_pgrd(directory / "truth.pgrd"),
        truth_kernel=kernel,
        y=read_pgrd(directory / "y.pgrd"),
        noise_sigma=float(meta["noise_sigma"]),
        seed=int(meta["seed"]),
        provenance=meta,
    )


def learn_texture_prior(shape, slope: float, n_images: int = 256, seed: int = 2**31 - 1):
    """Stationary Gaussian prior fitted to ``n_images`` independent texture draws.

    The mean is the average image (flattened to its spatial average) and the
    spectral variances are the averaged periodograms of the centred draws.
    """
    from prism.prior import GaussianPrior

    rng = make_rng(seed, IMAGE_STREAM)
    draws = np.array([generate_texture_image(shape, slope, rng) for _ in range(n_images)])
    mu = float(draws.mean())
    power = np.mean(np.abs(fft2(draws - mu)) ** 2, axis=0)
    return GaussianPrior(np.full(shape, mu), power)


def learn_kernel_prior(shape, support: int, intensity: float = 0.5, n_kernels: int = 512,
                       seed: int = 2**31 - 1, floor: float = 1e-8):
    """Stationary Gaussian prior fitted to ``n_kernels`` generated motion kernels."""
    from prism.prior import GaussianPrior

    rng = make_rng(seed, KERNEL_STREAM)
    draws = np.array([generate_motion_kernel(shape, support, intensity, rng).grid for _ in range(n_kernels)])
    mean = draws.mean(axis=0)
    power = np.mean(np.abs(fft2(draws - mean)) ** 2, axis=0)
    return GaussianPrior(mean, power + floor)
