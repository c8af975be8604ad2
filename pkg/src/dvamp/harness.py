"""Experiment harness: images, measurement synthesis, seeded trials, CSV output.

A sweep is a list of ``ExperimentConfig`` cells.  Every cell runs
``trials`` trials; trial ``k`` uses seed ``base_seed + k`` for the
measurement matrix (shared by all images of that trial), and independent
labelled sub-streams for the noise and the Monte Carlo probes.  Results
are collected in grid order, so the CSV does not depend on the number
of worker processes.
"""

import csv
import hashlib
import io
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from dvamp.amp import amp_run
from dvamp.denoise import DenoiserSpec, ExternalDenoiser, Masked, make_denoiser
from dvamp.errors import DimensionError, PGMFormatError
from dvamp.oplib import (WaveletTransform, compose_measurement, make_gaussian_operator,
                         make_structured_operator)
from dvamp.result import PSNR_CAP, TrialResult, capped, psnr
from dvamp.vamp import VampConfig, vamp_run

ALGORITHMS = ("l1-amp", "l1-vamp", "d-amp", "d-vamp")
ENSEMBLES = ("gaussian", "structured")
SWEEP_COLUMNS = ["algorithm", "ensemble", "ratio", "cond", "snr_db", "iters",
                 "mean_psnr_db", "std_psnr_db", "mean_runtime_s", "diverged_count"]
TRACE_COLUMNS = ["algorithm", "ensemble", "ratio", "cond", "snr_db", "iter",
                 "mean_psnr_db", "min_psnr_db", "max_psnr_db"]
TEST_IMAGES = ("cameraman", "moon", "astronaut", "coffee", "chelsea", "clock")

# sub-stream labels under a trial seed
_MATRIX, _NOISE, _PROBES = 0, 1, 2


###############################################################################
# Images
###############################################################################

_PGM_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)"
                         rb"\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def load_pgm(path, require_pow2=False):
    """Read a binary (P5) 8-bit PGM as a float array in [0, 255]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise PGMFormatError(f"{path}: unsupported format {raw[:2]!r}, expected binary P5")
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise PGMFormatError(f"{path}: malformed PGM header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PGMFormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    body = raw[m.end():]
    if len(body) != width * height:
        raise PGMFormatError(f"{path}: expected {width * height} pixel bytes, got {len(body)}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(float)
    if require_pow2 and (width != height or width & (width - 1)):
        raise PGMFormatError(f"{path}: recovery needs a square power-of-two image,"
                             f" got {width}x{height}")
    return img


def save_pgm(image, path):
    """Write an image as binary PGM, rounding and clipping to 0..255."""
    img = np.clip(np.round(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise DimensionError("save_pgm expects a 2-D image")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def downsample(image, side):
    """Block-average a square power-of-two image down to ``side``."""
    n = image.shape[0]
    if side == n:
        return image
    if n % side:
        raise DimensionError(f"cannot downsample {n} to {side}")
    f = n // side
    return image.reshape(side, f, side, f).mean(axis=(1, 3))


def bundled_image_paths():
    root = resources.files("dvamp") / "data"
    return [str(root / f"{name}.pgm") for name in TEST_IMAGES]


def load_images(paths=(), side=None):
    """(name, image) pairs; bundled 128x128 test images when ``paths`` is empty."""
    expanded = []
    for p in paths or bundled_image_paths():
        p = Path(p)
        expanded.extend(sorted(p.glob("*.pgm")) if p.is_dir() else [p])
    out = []
    for p in expanded:
        img = load_pgm(p, require_pow2=True)
        if side is not None:
            img = downsample(img, side)
        out.append((p.stem, img))
    return out


###############################################################################
# Measurements
###############################################################################

def synthesize_measurements(phi, x0, snr_db=None, seed=0):
    """y = Phi x0 + w with noise variance ||Phi x0||^2 10^(-snr/10) / M.

    ``snr_db=None`` means noiseless.  Returns ``(y, noise_variance)``.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != phi.cols:
        raise DimensionError(f"x0 has {x0.size} entries, operator has {phi.cols} columns")
    clean = phi.forward(x0)
    if snr_db is None:
        return clean, 0.0
    var = float(clean @ clean) * 10.0 ** (-snr_db / 10.0) / phi.rows
    rng = np.random.default_rng(seed)
    return clean + np.sqrt(var) * rng.standard_normal(phi.rows), var


###############################################################################
# Configuration
###############################################################################

@dataclass(frozen=True)
class ExperimentConfig:
    """One grid cell.

    ``snr_db=None`` is noiseless.  ``side`` resamples images (block mean)
    before recovery; dense Gaussian operators get expensive beyond 64x64.
    ``denoiser`` defaults to soft thresholding at 2 sigma for the l1
    algorithms (detail bands only, see ``run_trial``) and cycle-spun
    wavelet soft thresholding at 1.5 sigma for d-amp/d-vamp.
    """

    algorithm: str = "l1-vamp"
    ensemble: str = "gaussian"
    ratio: float = 0.1
    cond: float = 1.0
    snr_db: Optional[float] = None
    iters: int = 10
    trials: int = 1
    base_seed: int = 0
    images: tuple = ()
    side: Optional[int] = None
    denoiser: Optional[str] = None
    external_denoiser: Optional[str] = None
    damping: Optional[float] = None
    auto_tune: bool = True
    timing: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.ensemble not in ENSEMBLES:
            raise ValueError(f"unknown ensemble {self.ensemble!r}; expected one of {ENSEMBLES}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"sampling ratio must lie in (0, 1], got {self.ratio}")
        if self.trials < 1 or self.iters < 1:
            raise ValueError("trials and iters must be >= 1")
        if not self.cond >= 1:
            raise ValueError(f"condition number must be >= 1, got {self.cond}")
        object.__setattr__(self, "images", tuple(str(p) for p in self.images))

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def denoiser_spec(self):
        if self.external_denoiser:
            return DenoiserSpec(kind="external", executable=self.external_denoiser)
        if self.denoiser:
            return DenoiserSpec.parse(self.denoiser)
        if self.algorithm.startswith("l1"):
            return DenoiserSpec(kind="soft-threshold")
        return DenoiserSpec(kind="ti-wavelet", rule="soft")

    def vamp_config(self, noise_var):
        kwargs = {"max_iters": self.iters, "auto_tune_noise": self.auto_tune}
        if self.damping is not None:
            kwargs["damping"] = self.damping
        if not self.auto_tune:
            kwargs["gamma_w_init"] = 1.0 / noise_var if noise_var > 0 else VampConfig.clamp[1]
        return VampConfig.for_condition(self.cond, **kwargs)


def _sub_seed(seed, *labels):
    return int(np.random.SeedSequence(seed, spawn_key=labels).generate_state(1, np.uint64)[0])


@lru_cache(maxsize=2)
def _operator(ensemble, M, N, cond, seed):
    if ensemble == "gaussian":
        return make_gaussian_operator(M, N, seed)
    return make_structured_operator(M, N, cond, seed)


def measurement_operator(config, n_pixels, trial_seed):
    M = int(round(config.ratio * n_pixels))
    return _operator(config.ensemble, max(M, 1), n_pixels, float(config.cond),
                     _sub_seed(trial_seed, _MATRIX))


###############################################################################
# Trials
###############################################################################

def run_trial(config, image, trial=0, image_index=0, denoiser=None):
    """Recover one image under one measurement realization."""
    seed = config.base_seed + trial
    side = image.shape[0]
    x0 = image.ravel()
    phi = measurement_operator(config, x0.size, seed)
    y, noise_var = synthesize_measurements(phi, x0, config.snr_db,
                                           seed=_sub_seed(seed, _NOISE, image_index))
    if denoiser is None:
        denoiser = make_denoiser(config.denoiser_spec())
    probe_seed = _sub_seed(seed, _PROBES, image_index)
    if config.algorithm.startswith("l1"):
        psi = WaveletTransform(side)
        A = compose_measurement(phi, psi)
        if not isinstance(denoiser, ExternalDenoiser):
            denoiser = Masked(denoiser, psi.detail_mask())

        def to_image(v):
            return psi.inverse(v)
    else:
        A, to_image = phi, None
    if config.algorithm.endswith("amp") and not config.algorithm.endswith("vamp"):
        res = amp_run(A, y, denoiser, config.iters, ground_truth=x0, to_image=to_image,
                      seed=probe_seed)
    else:
        res = vamp_run(A, y, denoiser, config.vamp_config(noise_var), ground_truth=x0,
                       to_image=to_image, seed=probe_seed)
    res.seed = seed
    res.config_digest = config.digest()
    res.noise_var = noise_var
    return res


def _run_cell_trial(config, trial):
    images = load_images(config.images, config.side)
    denoiser = make_denoiser(config.denoiser_spec())
    out = []
    for idx, (_, img) in enumerate(images):
        res = run_trial(config, img, trial, idx, denoiser)
        out.append((res.psnr_series, res.runtime_s, res.diverged))
    return out


def _gather(tasks, workers):
    """Yield results of (config, trial) tasks in task order."""
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(tasks) <= 1:
        for c, t in tasks:
            yield _run_cell_trial(c, t)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell_trial, c, t) for c, t in tasks]
        try:
            for f in futures:
                yield f.result()
        finally:
            for f in futures:
                f.cancel()


def _fmt(x):
    return f"{x:.4f}"


def _snr_field(snr_db):
    return "inf" if snr_db is None else f"{snr_db:g}"


def summarize_cell(config, runs):
    """Aggregate flattened (series, runtime, diverged) runs into one CSV row."""
    finals = np.array([capped(r[0][-1]) for r in runs])
    runtimes = np.array([r[1] for r in runs])
    return {
        "algorithm": config.algorithm,
        "ensemble": config.ensemble,
        "ratio": f"{config.ratio:g}",
        "cond": f"{config.cond:g}",
        "snr_db": _snr_field(config.snr_db),
        "iters": str(config.iters),
        "mean_psnr_db": _fmt(finals.mean()),
        "std_psnr_db": _fmt(finals.std()),
        "mean_runtime_s": _fmt(runtimes.mean()) if config.timing else "",
        "diverged_count": str(int(sum(r[2] for r in runs))),
    }


def run_sweep(configs, out=None, workers=None):
    """Run every cell and return the CSV text (also written to ``out``).

    If a cell fails, rows of the cells finished before it are flushed to
    ``out`` and the error is re-raised.
    """
    configs = list(configs)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    try:
        tasks = [(c, t) for c in configs for t in range(c.trials)]
        results = _gather(tasks, workers)
        for c in configs:
            runs = [r for _ in range(c.trials) for r in next(results)]
            writer.writerow(summarize_cell(c, runs))
    finally:
        if out is not None:
            Path(out).write_text(buf.getvalue())
    return buf.getvalue()


def run_trace(config, ratios=None, algorithms=None, out=None, workers=None):
    """Per-iteration PSNR (mean/min/max over images x trials) as CSV text.

    A diverged run's series is extended with its last finite value.
    """
    ratios = ratios or [config.ratio]
    algorithms = algorithms or [config.algorithm]
    cells = [replace(config, algorithm=a, ratio=r) for a in algorithms for r in ratios]
    tasks = [(c, t) for c in cells for t in range(c.trials)]
    results = _gather(tasks, workers)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for c in cells:
        runs = [r for _ in range(c.trials) for r in next(results)]
        length = c.iters + 1
        table = np.array([[capped(v) for v in s] + [capped(s[-1])] * (length - len(s))
                          for s, _, _ in runs])
        for it in range(length):
            col = table[:, it]
            writer.writerow({
                "algorithm": c.algorithm, "ensemble": c.ensemble, "ratio": f"{c.ratio:g}",
                "cond": f"{c.cond:g}", "snr_db": _snr_field(c.snr_db), "iter": str(it),
                "mean_psnr_db": _fmt(col.mean()), "min_psnr_db": _fmt(col.min()),
                "max_psnr_db": _fmt(col.max()),
            })
    if out is not None:
        Path(out).write_text(buf.getvalue())
    return buf.getvalue()


def recover(config, image_path, out=None, trial=0):
    """Recover a single image; optionally save the estimate as PGM."""
    img = load_pgm(image_path, require_pow2=True)
    if config.side is not None:
        img = downsample(img, config.side)
    res = run_trial(config, img, trial)
    if out is not None:
        save_pgm(res.estimate.reshape(img.shape), out)
    return res
