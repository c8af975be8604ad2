"""AMP and D-AMP.

Each iteration forms the pseudo-measurement ``r = x + A^T z``, denoises it
at the effective noise level ``sigma_t = ||z|| / sqrt(M)`` and updates the
residual with the Onsager correction ``(N/M) * div * z``.  Exactly one
forward and one adjoint application per iteration.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from dvamp.errors import DimensionError, DivergenceDetected
from dvamp.result import TrialResult, psnr

# sigma_t above this multiple of sigma_0 counts as divergence
RUNAWAY_FACTOR = 1e6


@dataclass
class AmpState:
    x: np.ndarray
    z: np.ndarray
    sigma: float
    iter: int = 0
    trace: list = field(default_factory=list)


def amp_init(A, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (A.rows,):
        raise DimensionError(f"y has shape {y.shape}, operator has {A.rows} rows")
    sigma = float(np.linalg.norm(y) / np.sqrt(A.rows))
    rec = {"iter": 0, "sigma": sigma, "residual_norm": float(np.linalg.norm(y))}
    return AmpState(x=np.zeros(A.cols), z=y.copy(), sigma=sigma, iter=0, trace=[rec])


def amp_iterate(state, A, y, denoiser, seed=0):
    """One AMP step.  Raises DivergenceDetected on non-finite output."""
    M, N = A.rows, A.cols
    r = state.x + A.adjoint(state.z)
    out = denoiser(r, state.sigma, seed=seed)
    x_new = out.estimate
    resid = y - A.forward(x_new)
    z_new = resid + (N / M) * out.divergence * state.z
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(z_new))):
        raise DivergenceDetected(f"non-finite iterate at t={state.iter + 1}", state)
    sigma = float(np.linalg.norm(z_new) / np.sqrt(M))
    rec = {"iter": state.iter + 1, "sigma": sigma,
           "residual_norm": float(np.linalg.norm(resid)),
           "divergence": float(out.divergence)}
    return replace(state, x=x_new, z=z_new, sigma=sigma, iter=state.iter + 1,
                   trace=state.trace + [rec])


def amp_run(A, y, denoiser, iters, ground_truth=None, to_image=None, seed=0):
    """Run ``iters`` AMP iterations, stopping early on divergence.

    ``to_image`` maps the iterate to an image (e.g. an inverse wavelet
    transform) for PSNR tracking and for the returned estimate.  Every
    iteration hands the denoiser the same ``seed``, so Monte Carlo
    divergence probes are common across iterations.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    to_image = to_image or (lambda v: v)
    state = amp_init(A, y)
    sigma0 = state.sigma
    series = []

    def record(st):
        if ground_truth is not None:
            p = psnr(to_image(st.x), ground_truth)
            st.trace[-1]["psnr"] = p
            series.append(p)

    record(state)
    diverged = False
    elapsed = 0.0
    for t in range(iters):
        tic = time.perf_counter()
        try:
            state = amp_iterate(state, A, y, denoiser, seed=seed)
        except DivergenceDetected:
            diverged = True
            break
        finally:
            elapsed += time.perf_counter() - tic
        record(state)
        if sigma0 > 0 and state.sigma > RUNAWAY_FACTOR * sigma0:
            diverged = True
            break
    return TrialResult(estimate=to_image(state.x), psnr_series=series, runtime_s=elapsed,
                       diverged=diverged, iterations=state.iter, trace=state.trace)
