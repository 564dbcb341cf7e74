"""The split Gibbs chain for blind deconvolution.

Each iteration performs four conditional draws in a fixed order:

1. kernel ``phi`` from the (measurement-conditioned) kernel prior at the
   split kernel ``m`` with coupling ``rho_phi``;
2. split image ``z`` from the Gaussian likelihood conditional given ``x``
   and ``phi``;
3. image ``x`` from the image prior at ``z`` with coupling ``rho_x``;
4. split kernel ``m`` from the Gaussian likelihood conditional given ``x``
   and ``phi``.

Coupling parameters follow exponential annealing schedules. Iteration ``k``
draws all of its randomness from a generator derived from ``(seed, k)``, so
a chain can be checkpointed and resumed bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from prism.errors import EmptySampleSet, PrismError
from prism.forward import ForwardModel, Kernel, delta_kernel, support_mask
from prism.grid import as_grid, make_rng, read_pgrd, write_pgrd
from prism.likelihood import build_image_conditional, build_kernel_conditional
from prism.prior import DenoisingPosteriorSampler, project_kernel

logger = logging.getLogger(__name__)

INIT_STREAM = 0


@dataclass(frozen=True)
class AnnealingSchedule:
    """Exponentially decaying coupling parameters ``rho^1 .. rho^K``."""

    rho_max: float
    rho_min: float
    iters: int

    def __post_init__(self):
        if not (self.rho_min > 0 and np.isfinite(self.rho_max)):
            raise ValueError(f"need finite rho_max >= rho_min > 0, got {self.rho_max}, {self.rho_min}")
        if self.rho_max < self.rho_min:
            raise ValueError(f"rho_max {self.rho_max} < rho_min {self.rho_min}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")

    @cached_property
    def values(self) -> np.ndarray:
        if self.iters == 1:
            return np.array([float(self.rho_min)])
        t = np.arange(self.iters) / (self.iters - 1)
        vals = self.rho_max * (self.rho_min / self.rho_max) ** t
        vals[0], vals[-1] = self.rho_max, self.rho_min
        vals.setflags(write=False)
        return vals

    def __getitem__(self, k: int) -> float:
        """Coupling at 1-based iteration ``k``."""
        return float(self.values[k - 1])


@dataclass(frozen=True)
class CouplingSchedule:
    """An annealing schedule held at its final value for the remaining iterations."""

    anneal: AnnealingSchedule
    iters: int

    @property
    def values(self) -> np.ndarray:
        vals = self.anneal.values
        return np.concatenate([vals, np.full(self.iters - len(vals), vals[-1])])

    def __getitem__(self, k: int) -> float:
        if not 1 <= k <= self.iters:
            raise IndexError(f"iteration {k} outside 1..{self.iters}")
        return self.anneal[min(k, self.anneal.iters)]


@dataclass(frozen=True)
class ChainConfig:
    iters: int = 200
    rho_x_max: float = 1.0
    rho_x_min: float = 0.01
    rho_phi_max: float = 1.0
    rho_phi_min: float = 0.01
    mode: str = "single"  # "single" or "mean"
    count: int = 1
    burn_in: Optional[int] = None
    thin: int = 1
    seed: int = 0
    project_kernel: bool = True
    kernel_support: Optional[tuple[int, int]] = None
    anneal_iters: Optional[int] = None
    init_sd: float = 0.2
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.mode not in ("single", "mean"):
            raise ValueError(f"mode must be 'single' or 'mean', got {self.mode!r}")
        if self.thin < 1 or self.count < 1:
            raise ValueError("thin and count must be >= 1")
        if self.kernel_support is not None and np.isscalar(self.kernel_support):
            object.__setattr__(self, "kernel_support", (int(self.kernel_support),) * 2)
        elif self.kernel_support is not None:
            object.__setattr__(self, "kernel_support", tuple(int(s) for s in self.kernel_support))
        if self.anneal_iters is not None and not 1 <= self.anneal_iters <= self.iters:
            raise ValueError(f"anneal_iters must be in [1, iters], got {self.anneal_iters}")
        if self.mode == "mean" and self.burn_in_iters + self.thin * (self.count - 1) >= self.iters:
            raise ValueError("burn_in + thin * (count - 1) must be < iters")

    @classmethod
    def parse_mode(cls, text: str) -> dict:
        """``"single"`` or ``"mean:N"`` to keyword arguments."""
        if text == "single":
            return {"mode": "single", "count": 1}
        if text.startswith("mean"):
            _, _, n = text.partition(":")
            return {"mode": "mean", "count": int(n) if n else 20}
        raise ValueError(f"bad mode {text!r}")

    @property
    def mode_label(self) -> str:
        return "single" if self.mode == "single" else f"mean{self.count}"

    @property
    def burn_in_iters(self) -> int:
        if self.burn_in is not None:
            return int(self.burn_in)
        return self.iters - self.thin * (self.count - 1) - 1 if self.mode == "mean" else self.iters - 1

    @property
    def rho_x(self) -> "CouplingSchedule":
        return CouplingSchedule(AnnealingSchedule(self.rho_x_max, self.rho_x_min, self._anneal), self.iters)

    @property
    def rho_phi(self) -> "CouplingSchedule":
        return CouplingSchedule(AnnealingSchedule(self.rho_phi_max, self.rho_phi_min, self._anneal), self.iters)

    @property
    def _anneal(self) -> int:
        return self.iters if self.anneal_iters is None else self.anneal_iters

    def retains(self, k: int) -> bool:
        """Whether the sample at 1-based iteration ``k`` is kept."""
        if self.mode == "single":
            return k == self.iters
        offset = k - self.burn_in_iters - 1
        return offset >= 0 and offset % self.thin == 0 and offset // self.thin < self.count

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["kernel_support"] is not None:
            d["kernel_support"] = list(d["kernel_support"])
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ChainState:
    x: np.ndarray
    z: np.ndarray
    phi: Kernel
    m: Kernel
    k: int = 0


@dataclass
class ChainResult:
    final: tuple[np.ndarray, np.ndarray]
    samples: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    state: Optional[ChainState] = None


def initial_state(config: ChainConfig, kernel_prior, y: np.ndarray) -> ChainState:
    """Random image and a delta kernel blended with the kernel prior mean."""
    y = as_grid(y, name="y")
    rng = make_rng(config.seed, INIT_STREAM)
    x0 = 0.5 + config.init_sd * rng.standard_normal(y.shape)
    support = config.kernel_support
    mean = getattr(kernel_prior, "mean", None)
    base = delta_kernel(y.shape).grid
    if mean is not None:
        base = 0.5 * base + 0.5 * np.asarray(mean)
    jitter = np.abs(rng.standard_normal(y.shape))
    if support is not None:
        jitter *= support_mask(y.shape, support)
        jitter /= support[0] * support[1]
    else:
        jitter /= y.size
    m0 = project_kernel(Kernel(base + jitter, support))
    return ChainState(x=x0, z=x0.copy(), phi=m0, m=m0, k=0)


def prism_step(
    state: ChainState,
    config: ChainConfig,
    image_prior: DenoisingPosteriorSampler,
    kernel_prior: DenoisingPosteriorSampler,
    y: np.ndarray,
    sigma_y: float,
) -> ChainState:
    k = state.k + 1
    if k > config.iters:
        raise PrismError(f"chain already finished ({state.k} of {config.iters} iterations)")
    rng = make_rng(config.seed, k)
    rho_x = config.rho_x[k]
    rho_phi = config.rho_phi[k]

    phi = Kernel(kernel_prior.sample(state.m.grid, rho_phi, rng), config.kernel_support)
    if config.project_kernel:
        phi = project_kernel(phi)
    z = build_image_conditional(ForwardModel(phi, sigma_y), y, state.x, rho_x).sample(rng)
    x = as_grid(image_prior.sample(z, rho_x, rng), name="x")
    m = build_kernel_conditional(x, y, phi, rho_phi, sigma_y).sample(rng)
    return ChainState(x=x, z=z, phi=phi, m=Kernel(m, config.kernel_support), k=k)


def _trace_row(state, config, y, sigma_y, truth, truth_kernel) -> dict:
    from prism.analysis import kernel_rmse, psnr

    resid = ForwardModel(state.phi, sigma_y).apply(state.x) - y
    row = {
        "iteration": state.k,
        "rho_x": config.rho_x[state.k],
        "rho_phi": config.rho_phi[state.k],
        "residual": float(np.linalg.norm(resid)),
    }
    if truth is not None:
        row["psnr"] = psnr(state.x, truth, 1.0)
    if truth_kernel is not None:
        row["kernel_rmse"] = kernel_rmse(state.phi, truth_kernel)
    return row


def run_chain(
    config: ChainConfig,
    image_prior: DenoisingPosteriorSampler,
    kernel_prior: DenoisingPosteriorSampler,
    y: np.ndarray,
    sigma_y: float,
    *,
    truth: Optional[np.ndarray] = None,
    truth_kernel=None,
    checkpoint_dir=None,
    resume=None,
    until: Optional[int] = None,
    initial: Optional[ChainState] = None,
) -> ChainResult:
    """Run the chain to ``config.iters`` (or stop after iteration ``until``).

    With ``checkpoint_dir`` set, the state is saved every
    ``config.checkpoint_every`` iterations, at ``until``, and when a step
    raises (the exception gets a ``checkpoint`` attribute with the path).
    ``resume`` continues from such a checkpoint.
    """
    y = as_grid(y, name="y")
    if resume is not None:
        state, samples, trace = load_checkpoint(resume, config)
    else:
        state = initial if initial is not None else initial_state(config, kernel_prior, y)
        samples, trace = [], []
    stop = config.iters if until is None else min(until, config.iters)

    while state.k < stop:
        try:
            state = prism_step(state, config, image_prior, kernel_prior, y, sigma_y)
        except Exception as exc:
            if checkpoint_dir is not None:
                exc.checkpoint = save_checkpoint(checkpoint_dir, state, config, samples, trace)
                logger.error("chain halted at k=%d; checkpoint %s", state.k, exc.checkpoint)
            raise
        trace.append(_trace_row(state, config, y, sigma_y, truth, truth_kernel))
        if config.retains(state.k):
            samples.append((state.x, state.phi.grid))
        if checkpoint_dir is not None and (
            state.k % config.checkpoint_every == 0 or state.k == stop
        ):
            save_checkpoint(checkpoint_dir, state, config, samples, trace)
        logger.debug("k=%d residual=%.4g", state.k, trace[-1]["residual"])

    return ChainResult(final=(state.x, state.phi.grid), samples=samples, trace=trace, state=state)


def estimate(samples) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise average of ``(x, phi)`` samples."""
    if len(samples) == 0:
        raise EmptySampleSet("no samples to average")
    if len(samples) == 1:
        return samples[0]
    xs = np.mean([s[0] for s in samples], axis=0)
    phis = np.mean([np.asarray(getattr(s[1], "grid", s[1])) for s in samples], axis=0)
    return xs, phis


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(directory, state: ChainState, config: ChainConfig, samples, trace) -> Path:
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    for name, g in (("x", state.x), ("z", state.z), ("phi", state.phi.grid), ("m", state.m.grid)):
        write_pgrd(directory / f"{name}.pgrd", g)
    for i, (xs, ps) in enumerate(samples):
        write_pgrd(directory / "samples" / f"x_{i:04d}.pgrd", xs)
        write_pgrd(directory / "samples" / f"phi_{i:04d}.pgrd", ps)
    write_trace(directory / "trace.csv", trace)
    lines = [
        f"k={state.k}",
        f"seed={config.seed}",
        f"config_hash={config.digest()}",
        f"samples={len(samples)}",
        f"phi_normalized={int(state.phi.normalized)}",
    ]
    tmp = directory / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(directory / "manifest.txt")
    return directory


def load_checkpoint(directory, config: ChainConfig):
    from prism.prior import read_meta

    directory = Path(directory)
    meta = read_meta(directory / "manifest.txt")
    if meta["config_hash"] != config.digest():
        raise PrismError(
            f"checkpoint {directory} was written with config {meta['config_hash']}, "
            f"current config is {config.digest()}"
        )
    support = config.kernel_support
    state = ChainState(
        x=read_pgrd(directory / "x.pgrd"),
        z=read_pgrd(directory / "z.pgrd"),
        phi=Kernel(read_pgrd(directory / "phi.pgrd"), support, bool(int(meta["phi_normalized"]))),
        m=Kernel(read_pgrd(directory / "m.pgrd"), support),
        k=int(meta["k"]),
    )
    samples = [
        (read_pgrd(directory / "samples" / f"x_{i:04d}.pgrd"),
         read_pgrd(directory / "samples" / f"phi_{i:04d}.pgrd"))
        for i in range(int(meta["samples"]))
    ]
    trace = read_trace(directory / "trace.csv")
    return state, samples, trace


TRACE_FIELDS = ["iteration", "rho_x", "rho_phi", "residual", "psnr", "kernel_rmse"]


def write_trace(path, trace) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    tmp.replace(path)


def read_trace(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"iteration": int(row["iteration"])}
            for key in TRACE_FIELDS[1:]:
                if row.get(key):
                    parsed[key] = float(row[key])
            rows.append(parsed)
    return rows
