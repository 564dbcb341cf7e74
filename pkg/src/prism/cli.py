"""Command-line experiment runner: ``simulate``, ``run`` and ``metrics``.

Every output directory gets a ``manifest.txt`` (UTF-8 ``key=value``) with the
configuration hash, seeds and library versions needed to repeat the run.
Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

import prism
from prism.analysis import (
    error_to_sd_map,
    kernel_rmse,
    posterior_stats,
    psnr,
    ssim,
    write_metrics_csv,
)
from prism.datagen import (
    ProblemInstance,
    learn_kernel_prior,
    learn_texture_prior,
    load_instance,
    make_instance,
    save_instance,
)
from prism.errors import BridgeTimeout, MalformedResponse, PrismError, ShapeMismatch, TooSmall
from prism.grid import read_pgrd, write_pgrd
from prism.prior import BridgeSampler, ConditionedKernelPrior, KernelConditioning, read_meta
from prism.sampler import ChainConfig, ChainResult, estimate, run_chain, write_trace

logger = logging.getLogger("prism")

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2

SUMMARY_FIELDS = ["count", "noise_sigma", "mode", "psnr", "ssim", "kernel_rmse", "nll", "coverage3sd"]


class InvalidInput(PrismError):
    """Bad user input; mapped to exit code 2."""


# -- shared experiment plumbing ----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run besides the instance data itself."""

    chain: ChainConfig
    prior: str = "analytic"  # "analytic" or "bridge:<dir>"
    prior_slope: float = 2.0
    prior_intensity: float = 0.5
    conditioning: str = "marginal"
    kernel_sd_floor: float = 1e-8
    bridge_timeout: float = 30.0
    png: bool = False

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "chain"}
        d["chain"] = self.chain.to_dict()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@lru_cache(maxsize=8)
def _texture_prior(shape, slope):
    return learn_texture_prior(shape, slope)


@lru_cache(maxsize=8)
def _kernel_prior(shape, support, intensity, floor):
    return learn_kernel_prior(shape, support, intensity, floor=floor)


def build_priors(inst: ProblemInstance, exp: ExperimentConfig, support: int):
    """Image and kernel denoising samplers for one instance."""
    shape = inst.y.shape
    texture = _texture_prior(shape, exp.prior_slope)
    base = _kernel_prior(shape, support, exp.prior_intensity, exp.kernel_sd_floor)
    kernel_prior = ConditionedKernelPrior(
        inst.y,
        base,
        KernelConditioning(
            method=exp.conditioning,
            noise_sigma=inst.noise_sigma,
            support=(support, support),
            image_prior=texture,
        ),
    )
    if exp.prior.startswith("bridge:"):
        image_prior = BridgeSampler(exp.prior.split(":", 1)[1], exp.bridge_timeout, measurement=inst.y)
    elif exp.prior == "analytic":
        image_prior = texture
    else:
        raise InvalidInput(f"unknown prior {exp.prior!r}")
    return image_prior, kernel_prior


def solve(inst: ProblemInstance, exp: ExperimentConfig, *, checkpoint_dir=None, resume=None,
          until=None) -> tuple[ChainResult, ConditionedKernelPrior]:
    """Run the chain on ``inst`` and return the result with the kernel prior used."""
    support = exp.chain.kernel_support[0]
    image_prior, kernel_prior = build_priors(inst, exp, support)
    result = run_chain(
        exp.chain, image_prior, kernel_prior, inst.y, inst.noise_sigma,
        truth=inst.truth_x, truth_kernel=inst.truth_kernel,
        checkpoint_dir=checkpoint_dir, resume=resume, until=until,
    )
    return result, kernel_prior


def write_manifest(directory: Path, entries: dict) -> None:
    base = {
        "prism_version": prism.__version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
    }
    base.update(entries)
    text = "".join(f"{k}={base[k]}\n" for k in sorted(base))
    (directory / "manifest.txt").write_text(text, encoding="utf-8")


def save_png(path: Path, grid: np.ndarray, *, stretch: bool = False) -> None:
    """8-bit grayscale preview; values clipped to [0, 1] unless ``stretch``."""
    from PIL import Image

    g = np.asarray(grid, dtype=float)
    if stretch:
        lo, hi = g.min(), g.max()
        g = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    Image.fromarray(np.round(np.clip(g, 0, 1) * 255).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    """Grayscale image in [0, 1] by luminance."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


# -- simulate ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    image = load_png(args.image) if args.image else None
    targets = [(out, args.seed)] if args.count == 1 else [
        (out / f"inst_{i:03d}", args.seed + i) for i in range(args.count)
    ]
    for directory, seed in targets:
        inst = make_instance(
            args.size, image=image, slope=args.slope, kernel_support=args.kernel_support,
            intensity=args.intensity, sigma=args.sigma, seed=seed,
        )
        save_instance(inst, directory)
        print(f"{directory}: {inst.y.shape[0]}x{inst.y.shape[1]} seed={seed} sigma={inst.noise_sigma:g} "
              f"support={args.kernel_support} intensity={args.intensity:g}")
    return EXIT_OK


# -- run ---------------------------------------------------------------------------------


def _instance_dirs(path: Path) -> list[Path]:
    if (path / "manifest.txt").exists() and (path / "y.pgrd").exists():
        return [path]
    dirs = sorted(p for p in path.iterdir() if (p / "y.pgrd").exists()) if path.is_dir() else []
    if not dirs:
        raise InvalidInput(f"no problem instance found at {path}")
    return dirs


def run_one(instance_dir: Path, out: Path, exp: ExperimentConfig, resume=None, until=None) -> dict:
    """Run one instance into ``out`` and return its metrics row."""
    inst = load_instance(instance_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    try:
        result, kernel_prior = solve(inst, exp, checkpoint_dir=ckpt, resume=resume, until=until)
    except Exception as exc:
        if getattr(exc, "checkpoint", None) is not None:
            logger.error("chain failed; resume with --resume %s", exc.checkpoint)
        raise

    manifest = {
        "config_hash": exp.digest(),
        "config": json.dumps(exp.to_dict(), sort_keys=True),
        "instance": str(instance_dir),
        "instance_seed": inst.seed,
        "chain_seed": exp.chain.seed,
        "iterations": result.state.k,
    }
    write_trace(out / "trace.csv", result.trace)
    if result.state.k < exp.chain.iters:
        manifest["status"] = "interrupted"
        write_manifest(out, manifest)
        return {}

    x, phi = estimate(result.samples) if exp.chain.mode == "mean" else result.final
    write_pgrd(out / "x.pgrd", x)
    write_pgrd(out / "phi.pgrd", phi)
    write_pgrd(out / "kernel_prior_mean.pgrd", kernel_prior.mean)
    if exp.png:
        save_png(out / "x.png", x)
        save_png(out / "phi.png", phi, stretch=True)

    row = {
        "run_id": out.name,
        "noise_sigma": inst.noise_sigma,
        "mode": exp.chain.mode_label,
        "psnr": psnr(x, inst.truth_x),
        "kernel_rmse": kernel_rmse(phi, inst.truth_kernel),
    }
    try:
        row["ssim"] = ssim(x, inst.truth_x)
    except TooSmall:
        pass
    if exp.chain.mode == "mean" and len(result.samples) >= 2:
        stats = posterior_stats([s[0] for s in result.samples], inst.truth_x)
        sdir = out / "stats"
        sdir.mkdir(exist_ok=True)
        maps = {
            "mean": stats.mean,
            "sd": stats.sd,
            "abs_error": stats.abs_error,
            "outlier_mask": stats.outlier_mask.astype(float),
            "error_to_sd": error_to_sd_map(stats, inst.truth_x),
        }
        for name, grid in maps.items():
            write_pgrd(sdir / f"{name}.pgrd", grid)
            if exp.png:
                save_png(sdir / f"{name}.png", grid, stretch=name != "mean")
        sample_dir = out / "samples"
        sample_dir.mkdir(exist_ok=True)
        for i, (xs, _) in enumerate(result.samples):
            write_pgrd(sample_dir / f"x_{i:04d}.pgrd", xs)
        row.update(nll=stats.nll, coverage3sd=stats.coverage3sd)
    write_metrics_csv(out / "metrics.csv", [row])
    manifest["status"] = "complete"
    write_manifest(out, manifest)
    return row


def _run_job(job):
    instance_dir, out, exp, resume, until = job
    _setup_logging()
    return run_one(instance_dir, out, exp, resume, until)


def _chain_config(args, support: int) -> ChainConfig:
    mode = ChainConfig.parse_mode(args.mode)
    return ChainConfig(
        iters=args.iters,
        rho_x_max=args.rho_x_max,
        rho_x_min=args.rho_x_min,
        rho_phi_max=args.rho_phi_max,
        rho_phi_min=args.rho_phi_min,
        burn_in=args.burn_in,
        thin=args.thin,
        seed=args.seed,
        project_kernel=args.project_kernel == "on",
        kernel_support=support,
        anneal_iters=args.anneal_iters,
        **mode,
    )


def cmd_run(args) -> int:
    if args.instance is None and args.resume is None:
        raise InvalidInput("run needs --instance (or --resume)")
    resume = Path(args.resume) if args.resume else None
    if args.instance is None:
        # a checkpoint lives in <out>/checkpoint; the instance is in the run manifest
        meta = read_meta(resume.parent / "manifest.txt")
        args.instance = meta["instance"]
    instance_path = Path(args.instance)
    if not instance_path.exists():
        raise InvalidInput(f"instance {instance_path} does not exist")
    dirs = _instance_dirs(instance_path)
    out = Path(args.out)
    single = len(dirs) == 1 and dirs[0] == instance_path

    jobs = []
    for d in dirs:
        meta = read_meta(d / "manifest.txt")
        support = args.kernel_support or int(meta.get("kernel_support", 0))
        if not support:
            raise InvalidInput(f"{d}: kernel support unknown; pass --kernel-support")
        exp = ExperimentConfig(
            chain=_chain_config(args, support),
            prior=args.prior,
            prior_slope=args.prior_slope if args.prior_slope is not None else float(meta.get("slope", 2.0)),
            prior_intensity=(args.prior_intensity if args.prior_intensity is not None
                             else float(meta.get("intensity", 0.5))),
            conditioning=args.conditioning,
            bridge_timeout=args.bridge_timeout,
            png=args.png,
        )
        target = out if single else out / d.name
        jobs.append((d, target, exp, resume if single else None, args.until))

    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [run_one(*job) for job in jobs]

    rows = [r for r in rows if r]
    if not single and rows:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", rows)
        write_metrics_csv(out / "summary.csv", [summarize(rows)], SUMMARY_FIELDS)
    for r in rows:
        logger.info("%s psnr=%.3f kernel_rmse=%.3g", r["run_id"], r["psnr"], r["kernel_rmse"])
    return EXIT_OK


# -- metrics -----------------------------------------------------------------------------


def summarize(rows: list[dict]) -> dict:
    """Dataset-level averages of the numeric metric columns."""
    out = {"count": len(rows)}
    for key in ("noise_sigma", "psnr", "ssim", "kernel_rmse", "nll", "coverage3sd"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            out[key] = float(np.mean(vals))
    modes = {r.get("mode") for r in rows}
    out["mode"] = modes.pop() if len(modes) == 1 else "mixed"
    return out


def _pairs(recon: Path, truth: Path) -> list[tuple[str, Path, Path]]:
    if (recon / "x.pgrd").exists():
        return [(recon.name, recon, truth)]
    names = sorted(p.name for p in recon.iterdir() if (p / "x.pgrd").exists()) if recon.is_dir() else []
    return [(n, recon / n, truth / n) for n in names]


def metrics_row(name: str, recon: Path, truth_dir: Path) -> dict:
    inst = load_instance(truth_dir)
    x = read_pgrd(recon / "x.pgrd")
    if x.shape != inst.truth_x.shape:
        raise ShapeMismatch(f"{recon / 'x.pgrd'}: shape {x.shape} vs truth {inst.truth_x.shape}")
    row = {"run_id": name, "noise_sigma": inst.noise_sigma, "psnr": psnr(x, inst.truth_x)}
    run_meta = read_meta(recon / "manifest.txt") if (recon / "manifest.txt").exists() else {}
    if "config" in run_meta:
        chain = json.loads(run_meta["config"])["chain"]
        row["mode"] = "single" if chain["mode"] == "single" else f"mean{chain['count']}"
    try:
        row["ssim"] = ssim(x, inst.truth_x)
    except TooSmall:
        pass
    if (recon / "phi.pgrd").exists():
        phi = read_pgrd(recon / "phi.pgrd")
        if phi.shape != inst.truth_kernel.shape:
            raise ShapeMismatch(f"{recon / 'phi.pgrd'}: shape {phi.shape} vs {inst.truth_kernel.shape}")
        row["kernel_rmse"] = kernel_rmse(phi, inst.truth_kernel)
    samples = sorted((recon / "samples").glob("x_*.pgrd")) if (recon / "samples").is_dir() else []
    if len(samples) >= 2:
        stats = posterior_stats([read_pgrd(p) for p in samples], inst.truth_x)
        row.update(nll=stats.nll, coverage3sd=stats.coverage3sd)
    return row


def cmd_metrics(args) -> int:
    recon, truth = Path(args.recon), Path(args.truth)
    pairs = _pairs(recon, truth)
    if not pairs:
        logger.error("no reconstructions found in %s", recon)
        return EXIT_INVALID
    rows, failed = [], 0
    for name, r, t in pairs:
        try:
            rows.append(metrics_row(name, r, t))
        except (ShapeMismatch, FileNotFoundError, KeyError) as exc:
            logger.error("skipping %s: %s", name, exc)
            failed += 1
    if not rows:
        return EXIT_INVALID
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows)
    write_metrics_csv(out.with_name(out.stem + "_summary.csv"), [summarize(rows)], SUMMARY_FIELDS)
    for key, val in summarize(rows).items():
        print(f"{key}={val}")
    return EXIT_INVALID if failed else EXIT_OK


# -- argument parsing --------------------------------------------------------------------


def _on_off(text: str) -> str:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prism", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="UTF-8 key=value file; command-line flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a problem instance (or a dataset of them)")
    sim.add_argument("--size", type=int, default=64)
    sim.add_argument("--kernel-support", type=int, default=31)
    sim.add_argument("--intensity", type=float, default=0.5)
    sim.add_argument("--sigma", type=float, default=0.05)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--slope", type=float, default=2.0, help="texture spectral slope")
    sim.add_argument("--image", help="grayscale-converted PNG to use instead of a texture")
    sim.add_argument("--count", type=int, default=1, help="instances to generate (seeds seed..seed+count-1)")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    run = sub.add_parser("run", help="sample the posterior for an instance or dataset")
    run.add_argument("--instance")
    run.add_argument("--iters", type=int, default=200)
    run.add_argument("--rho-x-max", type=float, default=1.0)
    run.add_argument("--rho-x-min", type=float, default=0.01)
    run.add_argument("--rho-phi-max", type=float, default=1.0)
    run.add_argument("--rho-phi-min", type=float, default=0.01)
    run.add_argument("--anneal-iters", type=int, default=None,
                     help="anneal over this many iterations, then hold at the minimum")
    run.add_argument("--mode", default="single", help="single or mean:N")
    run.add_argument("--burn-in", type=int, default=None)
    run.add_argument("--thin", type=int, default=1)
    run.add_argument("--prior", default="analytic", help="analytic or bridge:<dir>")
    run.add_argument("--bridge-timeout", type=float, default=30.0, help="seconds to wait per bridge request")
    run.add_argument("--prior-slope", type=float, default=None)
    run.add_argument("--prior-intensity", type=float, default=None)
    run.add_argument("--conditioning", choices=["marginal", "inverse", "none"], default="marginal")
    run.add_argument("--kernel-support", type=int, default=None)
    run.add_argument("--project-kernel", type=_on_off, default="on")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--png", action="store_true", help="also write 8-bit PNG previews")
    run.add_argument("--resume", help="checkpoint directory to continue from")
    run.add_argument("--until", type=int, default=None, help=argparse.SUPPRESS)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    met = sub.add_parser("metrics", help="score reconstructions against truth")
    met.add_argument("--recon", required=True)
    met.add_argument("--truth", required=True)
    met.add_argument("--out", required=True)
    met.set_defaults(func=cmd_metrics)
    return parser


def _config_tokens(path) -> list[str]:
    tokens = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInput(f"{path}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() == "true":
            tokens.append(flag)
        elif value.lower() != "false":
            tokens += [flag, value]
    return tokens


def _expand_config(argv: list[str]) -> list[str]:
    """Splice config-file options in right after the subcommand so flags override them."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise InvalidInput("--config needs a path")
    path = argv[i + 1]
    rest = argv[:i] + argv[i + 2:]
    commands = {"simulate", "run", "metrics"}
    j = next((n for n, tok in enumerate(rest) if tok in commands), None)
    if j is None:
        raise InvalidInput("--config given without a subcommand")
    return rest[: j + 1] + _config_tokens(path) + rest[j + 1:]


def _setup_logging() -> None:
    level = os.environ.get("PRISM_LOG", "info").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _expand_config(argv)
    except (InvalidInput, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except (BridgeTimeout, MalformedResponse) as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE
    except (InvalidInput, PrismError, ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logger.error("%s", exc, exc_info=logger.isEnabledFor(logging.DEBUG))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
