"""Outcome record shared by the AMP and VAMP drivers and the harness."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dvamp.errors import DimensionError

PSNR_CAP = 200.0


def psnr(x_hat, x0, peak=255.0):
    """Peak SNR in dB; +inf when the images coincide."""
    x_hat = np.asarray(x_hat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_hat.shape != x0.shape and x_hat.size != x0.size:
        raise DimensionError(f"shape mismatch {x_hat.shape} vs {x0.shape}")
    err = float(np.sum((x_hat.ravel() - x0.ravel()) ** 2))
    if err == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 * x0.size / err)


def capped(value):
    return min(value, PSNR_CAP)


@dataclass
class TrialResult:
    """Final estimate and per-iteration metrics of one solver run.

    ``psnr_series`` starts with the initialization point, so a run of
    ``iters`` iterations yields at most ``iters + 1`` values.  When the run
    diverged, ``final_psnr`` is taken from the last finite estimate.
    """

    estimate: np.ndarray
    psnr_series: list
    runtime_s: float
    diverged: bool
    iterations: int
    trace: list = field(default_factory=list)
    seed: Optional[int] = None
    config_digest: Optional[str] = None
    noise_var: Optional[float] = None

    @property
    def final_psnr(self):
        return self.psnr_series[-1] if self.psnr_series else float("nan")
