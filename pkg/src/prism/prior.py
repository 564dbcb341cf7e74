"""Denoising-posterior samplers used by the two prior steps.

A prior step samples ``p(u | v) ~ p(u) N(v; u, rho^2 I)``: the posterior of a
Gaussian denoising problem with noisy observation ``v`` and noise level
``rho``. Anything with a ``sample(v, rho, rng)`` method can serve as a prior;
this module provides analytic stationary Gaussian priors, a kernel prior
re-centred on information extracted from the measurement, and a file-based
bridge to an external denoiser process.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize

from prism.errors import BridgeTimeout, DegenerateScale, MalformedResponse, ShapeMismatch
from prism.forward import Kernel, as_kernel, delta_kernel, support_mask
from prism.grid import (
    as_grid,
    check_same_shape,
    fft2,
    frequency_radius,
    ifft2,
    make_rng,
    read_pgrd,
    write_pgrd,
)
from prism.likelihood import GaussianConditional

logger = logging.getLogger(__name__)


class DenoisingPosteriorSampler(Protocol):
    def sample(self, v: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
        ...


def _check_rho(rho: float) -> float:
    rho = float(rho)
    if not np.isfinite(rho) or rho <= 0:
        raise DegenerateScale(f"rho must be positive and finite, got {rho}")
    return rho


@dataclass(frozen=True)
class GaussianPrior:
    """Stationary Gaussian prior ``N(mean, F^H diag(spectral_variance) F)``.

    ``spectral_variance`` is the covariance eigenvalue per frequency in the
    unitary Fourier basis; the per-pixel variance is its average.
    """

    mean: np.ndarray
    spectral_variance: np.ndarray

    def __post_init__(self):
        mean = as_grid(self.mean, name="prior mean")
        var = np.broadcast_to(np.asarray(self.spectral_variance, dtype=float), mean.shape).copy()
        if not np.all(np.isfinite(var)) or var.min() <= 0:
            raise DegenerateScale("spectral variances must be finite and > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "spectral_variance", var)

    @property
    def pixel_variance(self) -> float:
        return float(self.spectral_variance.mean())

    def posterior(self, v: np.ndarray, rho: float) -> GaussianConditional:
        rho = _check_rho(rho)
        v = as_grid(v, name="v")
        check_same_shape(self.mean, v)
        precision = 1.0 / self.spectral_variance + 1.0 / rho**2
        rhs = fft2(self.mean) / self.spectral_variance + fft2(v) / rho**2
        return GaussianConditional(precision, rhs / precision)

    def sample(self, v: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
        return self.posterior(v, rho).sample(rng)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """A draw from the prior itself."""
        w = rng.standard_normal(self.mean.shape)
        return self.mean + ifft2(fft2(w) * np.sqrt(self.spectral_variance))

    def with_mean(self, mean: np.ndarray) -> "GaussianPrior":
        return GaussianPrior(mean, self.spectral_variance)


def gaussian_denoise_sample(prior: GaussianPrior, v, rho: float, rng) -> np.ndarray:
    return prior.sample(v, rho, rng)


def power_law_spectrum(shape: tuple[int, int], slope: float) -> np.ndarray:
    """Unit-average spectrum proportional to ``(1 + |f|)^(-slope)``."""
    s = (1.0 + frequency_radius(shape)) ** (-float(slope))
    return s / s.mean()


def texture_prior(shape, slope: float, mean: float, sd: float) -> GaussianPrior:
    """Stationary power-law prior with constant mean and per-pixel SD ``sd``."""
    return GaussianPrior(np.full(shape, float(mean)), sd**2 * power_law_spectrum(shape, slope))


def fit_texture_prior(y: np.ndarray, slope: float) -> GaussianPrior:
    """Texture prior whose mean and SD are read off the measurement."""
    y = as_grid(y, name="y")
    return texture_prior(y.shape, slope, float(y.mean()), float(y.std()))


@dataclass(frozen=True)
class PointMassPrior:
    """Degenerate prior concentrated on ``value``; every draw returns it.

    Used to pin a variable, e.g. the kernel in a non-blind run.
    """

    value: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.value

    def sample(self, v, rho, rng) -> np.ndarray:
        check_same_shape(self.value, np.asarray(v))
        return np.array(self.value, dtype=float)


def project_kernel(k) -> Kernel:
    """Project onto physical kernels: clip negatives, zero outside support, unit sum.

    Falls back to a centred delta when nothing positive remains.
    """
    k = as_kernel(k)
    g = np.clip(k.grid, 0.0, None)
    if k.support is not None:
        g = np.where(support_mask(g.shape, k.support), g, 0.0)
    total = g.sum()
    if total < 1e-12:
        return delta_kernel(g.shape, k.support)
    if k.normalized and np.array_equal(g, k.grid):
        return k
    return Kernel(g / total, k.support, normalized=True)


# -- measurement-conditioned kernel prior ------------------------------------------------


def gaussian_blob(shape, support, width: float | None = None) -> np.ndarray:
    """Isotropic Gaussian bump centred at the origin, unit sum, inside ``support``."""
    mask = support_mask(shape, support)
    sh, sw = mask.sum(axis=1).max(), mask.sum(axis=0).max()
    width = width if width is not None else max(sh, sw) / 4.0
    fy = np.fft.fftfreq(shape[0]) * shape[0]
    fx = np.fft.fftfreq(shape[1]) * shape[1]
    g = np.exp(-(fy[:, None] ** 2 + fx[None, :] ** 2) / (2 * width**2)) * mask
    return g / g.sum()


def kernel_base_prior(shape, support, sd: float = 0.02, width: float | None = None) -> GaussianPrior:
    """Generic unconditioned kernel prior: a centred blob mean with white fluctuations."""
    return GaussianPrior(gaussian_blob(shape, support, width), np.full(shape, sd**2))


@dataclass(frozen=True)
class KernelConditioning:
    """How the kernel prior mean is re-centred from the measurement.

    method
        ``"marginal"``: the support-restricted, non-negative mode of
        ``p(kernel | y)`` with the image integrated out under ``image_prior``
        (a Gaussian image prior is required) and the base prior on the kernel.
        ``"inverse"``: regularized inverse ``conj(X0) Y / (|X0|^2 + lam)``
        against a proxy image ``X0`` (the given ``proxy``, or ``y`` smoothed
        by ``proxy_sigma`` pixels). ``"none"``: keep the base mean.
    """

    method: str = "marginal"
    noise_sigma: float = 0.0
    support: Optional[tuple[int, int]] = None
    image_prior: Optional[GaussianPrior] = None
    lam: float = 1e-2
    proxy: Optional[np.ndarray] = None
    proxy_sigma: float = 1.0
    max_iter: int = 200


def has_signal(y: np.ndarray, noise_sigma: float, z: float = 5.0) -> bool:
    """Whether ``y`` carries power beyond white noise of SD ``noise_sigma`` (DC excluded)."""
    power = np.abs(fft2(y)) ** 2
    power[0, 0] = np.nan
    n_eff = max(power.size - 1, 1) / 2.0
    excess = np.nanmean(power) - noise_sigma**2
    return excess > z * max(noise_sigma**2, 1e-300) / np.sqrt(n_eff)


def kernel_marginal_nll(values, y_hat, prior: GaussianPrior, noise_sigma: float, index,
                        kernel_prior: Optional[GaussianPrior] = None):
    """``-log p(y | kernel) - log p(kernel)`` up to a constant, and its gradient.

    The kernel is given by its ``values`` at flat grid positions ``index``.
    With a stationary Gaussian image ``prior`` every frequency of ``y`` is an
    independent complex Gaussian with mean ``h(f) M(f)`` and variance
    ``|h(f)|^2 S(f) + noise_sigma^2``, where ``h`` is the kernel transfer
    function. ``kernel_prior`` adds a stationary Gaussian penalty.
    """
    shape = prior.mean.shape
    k = np.zeros(prior.mean.size)
    k[index] = values
    k = k.reshape(shape)
    h = np.fft.fft2(k)
    m_hat = fft2(prior.mean)
    s = prior.spectral_variance
    resid = y_hat - h * m_hat
    var = np.abs(h) ** 2 * s + noise_sigma**2
    value = 0.5 * np.sum(np.abs(resid) ** 2 / var + np.log(var))
    # Wirtinger derivative with respect to conj(h)
    dh = 0.5 * (-resid * np.conj(m_hat) / var - np.abs(resid) ** 2 * h * s / var**2 + h * s / var)
    grad = 2.0 * np.real(np.fft.ifft2(dh) * k.size)
    if kernel_prior is not None:
        dev = fft2(k - kernel_prior.mean) / kernel_prior.spectral_variance
        value += 0.5 * np.sum(np.abs(fft2(k - kernel_prior.mean)) ** 2 / kernel_prior.spectral_variance)
        grad = grad + ifft2(dev)
    return value, grad.ravel()[index]


def _marginal_estimate(y, kernel_prior: GaussianPrior, cfg: KernelConditioning) -> np.ndarray:
    if cfg.image_prior is None:
        raise ValueError("marginal re-centring needs a Gaussian image prior")
    if cfg.noise_sigma <= 0:
        raise DegenerateScale("marginal re-centring needs noise_sigma > 0")
    shape = y.shape
    if cfg.support is not None:
        index = np.flatnonzero(support_mask(shape, cfg.support))
    else:
        index = np.arange(y.size)
    result = minimize(
        kernel_marginal_nll,
        np.asarray(kernel_prior.mean, dtype=float).ravel()[index],
        args=(fft2(y), cfg.image_prior, cfg.noise_sigma, index, kernel_prior),
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * len(index),
        options={"maxiter": cfg.max_iter},
    )
    k = np.zeros(y.size)
    k[index] = result.x
    return k.reshape(shape)


def _inverse_estimate(y, cfg: KernelConditioning) -> np.ndarray:
    if cfg.proxy is not None:
        x0 = as_grid(cfg.proxy, name="proxy")
        check_same_shape(x0, y)
    else:
        x0 = ndimage.gaussian_filter(y, cfg.proxy_sigma, mode="wrap")
    X0 = np.fft.fft2(x0)
    Y = np.fft.fft2(y)
    return np.fft.ifft2(np.conj(X0) * Y / (np.abs(X0) ** 2 + cfg.lam)).real


def recentred_kernel_mean(y: np.ndarray, base: GaussianPrior, cfg: KernelConditioning) -> np.ndarray:
    """Kernel prior mean informed by ``y``; the base mean when ``y`` has no usable signal."""
    base_mean = base.mean
    if cfg.method == "none" or not has_signal(y, cfg.noise_sigma):
        return np.array(base_mean, dtype=float)
    if cfg.method == "marginal":
        est = _marginal_estimate(y, base, cfg)
    elif cfg.method == "inverse":
        est = _inverse_estimate(y, cfg)
    else:
        raise ValueError(f"unknown re-centring method {cfg.method!r}")
    k = project_kernel(Kernel(est, cfg.support))
    if k.grid[0, 0] == 1.0 and k.grid.sum() == 1.0 and np.count_nonzero(k.grid) == 1:
        # projection collapsed to the delta fallback: nothing learned
        return np.array(base_mean, dtype=float)
    return np.array(k.grid)


@dataclass(frozen=True)
class ConditionedKernelPrior:
    """Kernel denoising-posterior sampler bound to a measurement ``y``.

    Behaves as the Gaussian ``base`` prior with its mean replaced by a
    kernel estimate extracted from ``y``.
    """

    y: np.ndarray
    base: GaussianPrior
    conditioning: KernelConditioning = field(default_factory=KernelConditioning)
    prior: GaussianPrior = field(init=False, repr=False)

    def __post_init__(self):
        y = as_grid(self.y, name="y")
        check_same_shape(y, self.base.mean)
        object.__setattr__(self, "y", y)
        mean = recentred_kernel_mean(y, self.base, self.conditioning)
        object.__setattr__(self, "prior", self.base.with_mean(mean))

    @property
    def mean(self) -> np.ndarray:
        return self.prior.mean

    @property
    def support(self):
        return self.conditioning.support

    def sample(self, v, rho, rng) -> np.ndarray:
        return self.prior.sample(v, rho, rng)


def conditioned_kernel_sampler(y, config: KernelConditioning, base_prior: GaussianPrior) -> ConditionedKernelPrior:
    return ConditionedKernelPrior(y, base_prior, config)


# -- external denoiser bridge ------------------------------------------------------------

_endpoint_locks: dict[str, threading.Lock] = {}
_endpoint_locks_guard = threading.Lock()
_REQ_RE = re.compile(r"^req_(\d+)\.meta$")


def _endpoint_lock(path: Path) -> threading.Lock:
    key = str(path.resolve())
    with _endpoint_locks_guard:
        return _endpoint_locks.setdefault(key, threading.Lock())


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


class BridgeSampler:
    """Denoising-posterior sampler served by an external process.

    Each call writes ``req_<n>.pgrd`` and ``req_<n>.meta`` (lines ``rho=``,
    ``seed=`` and optionally ``measurement=``) into the exchange directory
    and waits for ``resp_<n>.pgrd``. The seed is drawn from the caller's
    generator so a deterministic responder gives reproducible chains.
    """

    def __init__(self, endpoint, timeout: float = 30.0, measurement=None, poll: float = 0.002):
        self.endpoint = Path(endpoint)
        if not self.endpoint.is_dir():
            raise FileNotFoundError(f"bridge endpoint {self.endpoint} does not exist")
        self.timeout = float(timeout)
        self.poll = poll
        self.measurement_path = None
        if measurement is not None:
            self.measurement_path = self.endpoint / "measurement.pgrd"
            write_pgrd(self.measurement_path, as_grid(measurement, name="measurement"))
        existing = [
            int(m.group(1))
            for p in self.endpoint.iterdir()
            if (m := re.match(r"^(?:req|resp)_(\d+)\.", p.name))
        ]
        self._counter = max(existing, default=0)

    def sample(self, v, rho, rng) -> np.ndarray:
        v = as_grid(v, name="v")
        rho = _check_rho(rho)
        seed = int(rng.integers(0, 2**63))
        with _endpoint_lock(self.endpoint):
            self._counter += 1
            n = self._counter
            req = self.endpoint / f"req_{n:08d}.pgrd"
            meta = self.endpoint / f"req_{n:08d}.meta"
            resp = self.endpoint / f"resp_{n:08d}.pgrd"
            write_pgrd(req, v)
            lines = [f"rho={rho!r}", f"seed={seed}"]
            if self.measurement_path is not None:
                lines.append(f"measurement={self.measurement_path}")
            _write_text_atomic(meta, "\n".join(lines) + "\n")
            try:
                out = self._await(resp)
            finally:
                for p in (req, meta, resp):
                    p.unlink(missing_ok=True)
        if out.shape != v.shape:
            raise MalformedResponse(f"response shape {out.shape} != request shape {v.shape}")
        if not np.all(np.isfinite(out)):
            raise MalformedResponse("response contains non-finite values")
        return out

    def _await(self, resp: Path) -> np.ndarray:
        deadline = time.monotonic() + self.timeout
        while True:
            if resp.exists():
                try:
                    return read_pgrd(resp)
                except Exception as exc:
                    raise MalformedResponse(f"{resp}: {exc}") from exc
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeTimeout(f"no response at {resp} after {self.timeout:g}s")
            time.sleep(min(self.poll, remaining))


def bridge_sampler(endpoint, timeout: float = 30.0, measurement=None) -> BridgeSampler:
    return BridgeSampler(endpoint, timeout, measurement)


Handler = Callable[[np.ndarray, float, int, Optional[np.ndarray]], np.ndarray]


def respond_pending(endpoint, handler: Handler) -> int:
    """Answer every pending request in ``endpoint``; returns how many were handled."""
    endpoint = Path(endpoint)
    handled = 0
    for p in sorted(endpoint.iterdir()):
        m = _REQ_RE.match(p.name)
        if not m:
            continue
        n = m.group(1)
        resp = endpoint / f"resp_{n}.pgrd"
        if resp.exists():
            continue
        try:
            meta = read_meta(p)
            v = read_pgrd(endpoint / f"req_{n}.pgrd")
        except FileNotFoundError:
            continue  # client gave up and cleaned up
        measurement = read_pgrd(meta["measurement"]) if "measurement" in meta else None
        out = handler(v, float(meta["rho"]), int(meta.get("seed", 0)), measurement)
        write_pgrd(resp, np.asarray(out, dtype=float))
        handled += 1
    return handled


def serve_bridge(endpoint, handler: Handler, stop: threading.Event, poll: float = 0.002) -> None:
    """Responder loop: answer requests until ``stop`` is set."""
    while not stop.is_set():
        if not respond_pending(endpoint, handler):
            stop.wait(poll)


def echo_handler(v, rho, seed, measurement):
    return v


def gaussian_handler(prior: GaussianPrior) -> Handler:
    """Responder that samples ``prior``'s denoising posterior with the request seed."""

    def handle(v, rho, seed, measurement):
        return prior.sample(v, rho, make_rng(seed))

    return handle
