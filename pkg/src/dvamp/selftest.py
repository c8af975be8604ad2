"""Oracle checks runnable without pytest (``dvamp selftest``).

Each check compares a fast path against an independent slow construction
on small random instances and returns the worst discrepancy.
"""

import numpy as np

from dvamp.denoise import mc_divergence, soft_threshold, sure_risk, sure_threshold
from dvamp.oplib import (_STREAM_PERM, _STREAM_SIGNS, WaveletTransform, _stream, check_adjoint,
                         fwht, geometric_singular_values, make_gaussian_operator,
                         make_structured_operator)
from dvamp.vamp import lmmse_solve


def _hadamard(n):
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def check_fwht(rng):
    err = 0.0
    for n in (2, 16, 256):
        H = _hadamard(n)
        for _ in range(20):
            x = rng.standard_normal(n)
            err = max(err, np.abs(fwht(x) - H @ x).max(), np.abs(fwht(fwht(x)) - x).max())
    return err, 1e-10


def check_structured_dense(rng):
    err = 0.0
    for M, N in ((8, 16), (16, 32)):
        seed = int(rng.integers(2 ** 31))
        op = make_structured_operator(M, N, 100.0, seed)
        signs = _stream(seed, _STREAM_SIGNS).choice(np.array([-1.0, 1.0]), size=N)
        perm = _stream(seed, _STREAM_PERM).permutation(N)
        S = np.zeros((M, N))
        S[:, :M] = np.diag(geometric_singular_values(M, 100.0, N))
        dense = S @ np.eye(N)[perm] @ _hadamard(N) @ np.diag(signs)
        err = max(err, np.abs(op.to_dense() - dense).max(), check_adjoint(op))
    return err, 1e-10


def check_lmmse(rng):
    err = 0.0
    for M, N in ((8, 16), (16, 32)):
        for k in range(20):
            A = make_gaussian_operator(M, N, k)
            Ad = A.to_dense()
            y, r2 = rng.standard_normal(M), rng.standard_normal(N)
            g2, gw = 10 ** rng.uniform(-2, 2), 10 ** rng.uniform(-2, 2)
            H = gw * Ad.T @ Ad + g2 * np.eye(N)
            x2, _, _ = lmmse_solve(A, y, r2, g2, gw)
            err = max(err, np.abs(x2 - np.linalg.solve(H, gw * Ad.T @ y + g2 * r2)).max())
    return err, 1e-8


def check_alpha2(rng):
    err = 0.0
    for k in range(20):
        A = make_gaussian_operator(8, 16, k)
        Ad = A.to_dense()
        g2, gw = 10 ** rng.uniform(-2, 2), 10 ** rng.uniform(-2, 2)
        _, alpha2, _ = lmmse_solve(A, np.zeros(8), np.zeros(16), g2, gw)
        ref = g2 / 16 * np.trace(np.linalg.inv(gw * Ad.T @ Ad + g2 * np.eye(16)))
        err = max(err, abs(alpha2 - ref))
    return err, 1e-10


def check_soft_divergence(rng):
    lam, h = 0.7, 1e-6
    r = rng.standard_normal(300) * 2
    r = r[np.abs(np.abs(r) - lam) > 1e-3]
    fd = np.empty_like(r)
    for i in range(r.size):
        e = np.zeros_like(r)
        e[i] = h
        fd[i] = (soft_threshold(r + e, lam).estimate[i]
                 - soft_threshold(r - e, lam).estimate[i]) / (2 * h)
    return abs(fd.mean() - soft_threshold(r, lam).divergence), 1e-6


def check_sure(rng):
    r = np.array([5.0, 5.0, 0.1, -0.1])
    grid = np.linspace(0.0, 6.0, 10_001)
    risks = np.array([sure_risk(r, 0.5, lam) for lam in grid])
    lam = sure_threshold(r, 0.5)
    return max(sure_risk(r, 0.5, lam) - risks.min(), 0.0), 1e-12


def check_wavelet(rng):
    err = 0.0
    for family in ("db2", "haar"):
        wt = WaveletTransform(32, family=family)
        for _ in range(20):
            x = rng.standard_normal((32, 32))
            c = wt.forward(x)
            err = max(err, abs(np.linalg.norm(c) - np.linalg.norm(x)),
                      np.abs(wt.inverse(c) - x.ravel()).max())
    return err, 1e-10


def check_mc_affine(rng):
    d = rng.uniform(-1, 2, 64)
    b = rng.standard_normal(64)
    r = rng.standard_normal(64)
    est = mc_divergence(lambda x, s: d * x + b, r, 1.0, probes=3, eps=0.5, seed=1)
    return abs(est - d.mean()), 1e-12


CHECKS = {
    "fwht vs Sylvester Hadamard": check_fwht,
    "structured operator vs dense": check_structured_dense,
    "LMMSE vs dense solve": check_lmmse,
    "alpha2 vs dense trace": check_alpha2,
    "soft-threshold divergence vs finite differences": check_soft_divergence,
    "SURE minimizer vs grid": check_sure,
    "wavelet round trip and Parseval": check_wavelet,
    "MC divergence on affine maps": check_mc_affine,
}


def run(seed=0, stream=None):
    """Run every check; print one line each and return True if all pass."""
    rng = np.random.default_rng(seed)
    ok = True
    for name, fn in CHECKS.items():
        err, tol = fn(rng)
        passed = err <= tol
        ok &= passed
        line = f"{'PASS' if passed else 'FAIL'}  {name}: max err {err:.3g} (tol {tol:g})"
        print(line, file=stream)
    return ok
