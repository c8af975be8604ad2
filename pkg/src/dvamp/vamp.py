"""VAMP and D-VAMP with EM tuning of the noise precision.

One iteration runs

    denoise:  (x1, a1) = D(r1; 1/sqrt(g1))       eta1 = g1/a1
              g2 = eta1 - g1,  r2 = (eta1 x1 - g1 r1)/g2
    LMMSE:    x2 = argmin gw ||y - A x||^2 + g2 ||x - r2||^2     (via the SVD)
              a2 = (g2/N) tr[(gw A^T A + g2 I)^-1]                eta2 = g2/a2
              g1 = eta2 - g2,  r1 = (eta2 x2 - g2 r2)/g1
    EM:       1/gw = (||y - A x2||^2 + sum s^2/(gw s^2 + g2)) / M

The LMMSE stage costs one ``ut``, one ``vt`` and one ``v`` application of
the operator's SVD factors.  Precisions are clamped to ``config.clamp`` and
divergences to ``config.div_clamp``.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from dvamp.errors import DimensionError, DivergenceDetected
from dvamp.result import TrialResult, psnr


@dataclass(frozen=True)
class VampConfig:
    damping: float = 1.0
    max_iters: int = 10
    auto_tune_noise: bool = True
    gamma_w_init: Optional[float] = None
    clamp: tuple = (1e-11, 1e11)
    div_clamp: tuple = (1e-8, 1 - 1e-8)
    init: str = "adjoint"

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        lo, hi = self.clamp
        if not 0 < lo < hi:
            raise ValueError(f"bad precision clamp {self.clamp}")
        lo, hi = self.div_clamp
        if not 0 < lo < hi < 1:
            raise ValueError(f"bad divergence clamp {self.div_clamp}")
        if self.init not in ("zero", "adjoint"):
            raise ValueError(f"init must be 'zero' or 'adjoint', got {self.init!r}")
        if not self.auto_tune_noise and self.gamma_w_init is None:
            raise ValueError("fixed noise precision requires gamma_w_init")

    @classmethod
    def for_condition(cls, cond, **kwargs):
        """Defaults with damping 0.85 for condition numbers of 1e3 and up."""
        kwargs.setdefault("damping", 0.85 if cond >= 1e3 else 1.0)
        return cls(**kwargs)


@dataclass
class VampState:
    r1: np.ndarray
    gamma1: float
    x1: np.ndarray
    r2: Optional[np.ndarray]
    gamma2: Optional[float]
    x2: np.ndarray
    gamma_w: float
    iter: int = 0
    trace: list = field(default_factory=list)
    # per-iteration LMMSE by-products reused by the EM update
    lmmse_cache: Optional[dict] = field(default=None, repr=False)


def _clip(value, bounds):
    return float(min(max(value, bounds[0]), bounds[1]))


def vamp_init(A, y, config=VampConfig()):
    """Initial messages.

    ``init="adjoint"`` (default): r1 = A^T y with gamma1 = M/||y||^2.
    ``init="zero"``: r1 = 0 with gamma1 = sum(s^2)/||y||^2, the inverse of
    the per-entry signal energy implied by E||A x||^2 = ||x||^2 sum(s^2)/N.
    ``y = 0`` gives r1 = 0 and gamma1 = 1 either way.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (A.rows,):
        raise DimensionError(f"y has shape {y.shape}, operator has {A.rows} rows")
    with np.errstate(over="ignore"):
        energy = float(y @ y)     # inf for huge y; the clamp then takes over
    if config.init == "adjoint":
        r1 = A.adjoint(y)
        gamma1 = A.rows / energy if energy > 0 else 1.0
    else:
        r1 = np.zeros(A.cols)
        gamma1 = float(np.sum(A.s ** 2)) / energy if energy > 0 else 1.0
    if config.gamma_w_init is not None:
        gamma_w = config.gamma_w_init
    else:
        gamma_w = A.rows / energy if energy > 0 else 1.0
    gamma1 = _clip(gamma1, config.clamp)
    gamma_w = _clip(gamma_w, config.clamp)
    rec = {"iter": 0, "gamma1": gamma1, "gamma2": None, "gamma_w": gamma_w}
    return VampState(r1=r1, gamma1=gamma1, x1=np.zeros(A.cols), r2=None,
                     gamma2=None, x2=np.zeros(A.cols), gamma_w=gamma_w, iter=0,
                     trace=[rec])


def vamp_denoise_step(state, denoiser, config=VampConfig(), seed=0):
    """Denoising stage; returns a state with new x1, r2, gamma2."""
    out = denoiser(state.r1, 1.0 / np.sqrt(state.gamma1), seed=seed)
    raw = float(out.divergence)
    alpha1 = _clip(raw, config.div_clamp)
    eta1 = state.gamma1 / alpha1
    gamma2 = eta1 - state.gamma1
    r2 = (eta1 * out.estimate - state.gamma1 * state.r1) / gamma2
    theta = config.damping
    if state.r2 is not None and theta < 1:
        r2 = theta * r2 + (1 - theta) * state.r2
        gamma2 = theta * gamma2 + (1 - theta) * state.gamma2
    flags = {"alpha1": raw, "alpha1_clamped": alpha1 != raw,
             "gamma2_clamped": not config.clamp[0] <= gamma2 <= config.clamp[1]}
    return replace(state, x1=out.estimate, r2=r2, gamma2=_clip(gamma2, config.clamp)), flags


def lmmse_solve(A, y, r2, gamma2, gamma_w):
    """x2 and alpha2 for the quadratic stage, plus reusable by-products."""
    s = A.s
    M, N = A.rows, A.cols
    uty = A.ut(y)
    c = A.vt(r2)
    d = 1.0 / (gamma_w * s ** 2 + gamma2)
    coef = d * (gamma_w * s * uty + gamma2 * c)
    # the null space of A keeps r2 unchanged
    x2 = r2 + A.v(coef - c)
    alpha2 = (gamma2 / N) * (np.sum(d) + (N - M) / gamma2)
    return x2, float(alpha2), {"uty": uty, "coef": coef, "d": d}


def vamp_lmmse_step(state, A, y, config=VampConfig()):
    """LMMSE stage; returns a state with new x2, r1, gamma1."""
    x2, raw, cache = lmmse_solve(A, y, state.r2, state.gamma2, state.gamma_w)
    alpha2 = _clip(raw, config.div_clamp)
    eta2 = state.gamma2 / alpha2
    gamma1 = eta2 - state.gamma2
    r1 = (eta2 * x2 - state.gamma2 * state.r2) / gamma1
    theta = config.damping
    if theta < 1:
        r1 = theta * r1 + (1 - theta) * state.r1
        gamma1 = theta * gamma1 + (1 - theta) * state.gamma1
    flags = {"alpha2": raw, "alpha2_clamped": alpha2 != raw,
             "gamma1_clamped": not config.clamp[0] <= gamma1 <= config.clamp[1]}
    new = replace(state, x2=x2, r1=r1, gamma1=_clip(gamma1, config.clamp), lmmse_cache=cache)
    return new, flags


def em_update_noise_precision(state, A, y, config=VampConfig()):
    """One EM fixed-point sweep for gamma_w, evaluated at the current x2."""
    s = A.s
    cache = state.lmmse_cache
    if cache is not None:
        # ||y - A x2|| = ||U^T y - s * V^T x2|| and V^T x2 = coef
        resid2 = float(np.sum((cache["uty"] - s * cache["coef"]) ** 2))
    else:
        resid2 = float(np.sum((y - A.forward(state.x2)) ** 2))
    trace_term = float(np.sum(s ** 2 / (state.gamma_w * s ** 2 + state.gamma2)))
    noise_var = (resid2 + trace_term) / A.rows
    if noise_var <= 0:
        return config.clamp[1]
    return _clip(1.0 / noise_var, config.clamp)


def vamp_iterate(state, A, y, denoiser, config=VampConfig(), seed=0):
    st, f1 = vamp_denoise_step(state, denoiser, config, seed=seed)
    st, f2 = vamp_lmmse_step(st, A, y, config)
    gw_raw = st.gamma_w
    if config.auto_tune_noise:
        st = replace(st, gamma_w=em_update_noise_precision(st, A, y, config))
    finite = (np.all(np.isfinite(st.x1)) and np.all(np.isfinite(st.x2))
              and np.all(np.isfinite(st.r1)) and np.all(np.isfinite(st.r2)))
    if not finite:
        raise DivergenceDetected(f"non-finite iterate at t={state.iter + 1}", state)
    rec = {"iter": state.iter + 1, "gamma1": st.gamma1, "gamma2": st.gamma2,
           "gamma_w": st.gamma_w, **f1, **f2,
           "gamma_w_clamped": config.auto_tune_noise and st.gamma_w in config.clamp
           and gw_raw != st.gamma_w}
    return replace(st, iter=state.iter + 1, trace=state.trace + [rec])


def vamp_run(A, y, denoiser, config=VampConfig(), ground_truth=None, to_image=None, seed=0):
    """Run ``config.max_iters`` VAMP iterations; same contract as ``amp_run``.

    The returned estimate and PSNR series come from the denoiser output x1.
    The denoiser sees the same ``seed`` at every iteration: reusing the
    Monte Carlo probe keeps divergence errors from jittering the
    extrinsic precisions near the fixed point.
    """
    to_image = to_image or (lambda v: v)
    state = vamp_init(A, y, config)
    series = []

    def record(st):
        if ground_truth is not None:
            p1 = psnr(to_image(st.x1), ground_truth)
            st.trace[-1]["psnr"] = p1
            st.trace[-1]["psnr2"] = psnr(to_image(st.x2), ground_truth)
            series.append(p1)

    record(state)
    diverged = False
    elapsed = 0.0
    for t in range(config.max_iters):
        tic = time.perf_counter()
        try:
            state = vamp_iterate(state, A, y, denoiser, config, seed=seed)
        except DivergenceDetected:
            diverged = True
            break
        finally:
            elapsed += time.perf_counter() - tic
        record(state)
    return TrialResult(estimate=to_image(state.x1), psnr_series=series, runtime_s=elapsed,
                       diverged=diverged, iterations=state.iter, trace=state.trace)
