"""Matrix-free linear operators and fast orthonormal transforms.

Contents
    * fwht                        -- orthonormal fast Walsh-Hadamard transform
    * LinearOperator, SvdOperator -- operators with forward/adjoint (and SVD) access
    * make_gaussian_operator      -- dense i.i.d. Gaussian ensemble
    * make_structured_operator    -- [diag(s) | 0] P F D ensemble
    * WaveletTransform            -- 2-D periodic orthonormal DWT (db2, haar)
    * compose_measurement         -- A = Phi Psi^T

Conventions
    Vectors are 1-D float64 arrays.  An ``SvdOperator`` of shape (M, N),
    M <= N, carries a thin SVD ``A = U diag(s) V_M^T`` where ``V_M`` holds
    the first M right singular vectors.  ``vt`` maps R^N -> R^M and ``v``
    maps R^M -> R^N; the null-space part of R^N never needs an explicit
    basis because the LMMSE stage treats it as a scalar multiple of the
    identity.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from dvamp.errors import DimensionError, DomainError, UnsupportedShapeError

# Fixed labels for splitting one operator seed into independent streams.
_STREAM_SIGNS = 0
_STREAM_PERM = 1


def _stream(seed, label):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(label,)))


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


###############################################################################
# Fast Walsh-Hadamard transform
###############################################################################

def fwht(x, out=None):
    """Orthonormal Walsh-Hadamard transform (natural / Hadamard ordering).

    Scaled by 2^(-k/2) so the transform is orthogonal and self-inverse.
    Pass ``out=x`` to transform in place.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if x.ndim != 1 or not _is_pow2(n):
        raise DimensionError(f"fwht needs a 1-D power-of-two length, got shape {x.shape}")
    if out is None:
        out = x.copy()
    elif out is not x:
        out[...] = x
    h = 1
    while h < n:
        blocks = out.reshape(-1, 2, h)
        a = blocks[:, 0, :].copy()
        blocks[:, 0, :] += blocks[:, 1, :]
        blocks[:, 1, :] *= -1.0
        blocks[:, 1, :] += a
        h *= 2
    out *= 1.0 / np.sqrt(n)
    return out


###############################################################################
# Operators
###############################################################################

@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free real linear map R^cols -> R^rows."""

    rows: int
    cols: int
    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]

    @property
    def shape(self):
        return (self.rows, self.cols)

    def to_dense(self):
        """Materialize column by column.  Small sizes only."""
        eye = np.eye(self.cols)
        return np.stack([self.forward(eye[:, j]) for j in range(self.cols)], axis=1)


@dataclass(frozen=True)
class SvdOperator(LinearOperator):
    """Linear operator with an explicit thin SVD A = U diag(s) V_M^T.

    ``u``/``ut`` apply the M x M left factor and its transpose, ``v``/``vt``
    the N x M right factor and its transpose.  ``s`` is nonincreasing.
    """

    s: np.ndarray = field(default=None)
    u: Callable[[np.ndarray], np.ndarray] = field(default=None)
    ut: Callable[[np.ndarray], np.ndarray] = field(default=None)
    v: Callable[[np.ndarray], np.ndarray] = field(default=None)
    vt: Callable[[np.ndarray], np.ndarray] = field(default=None)

    @property
    def cond(self):
        return float(self.s[0] / self.s[-1])


def check_adjoint(op, n_trials=20, seed=0):
    """Largest adjoint-consistency defect |<u, Av> - <A^T u, v>| / (|u||v| + 1)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        u = rng.standard_normal(op.rows)
        v = rng.standard_normal(op.cols)
        lhs = u @ op.forward(v)
        rhs = op.adjoint(u) @ v
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(v) + 1.0))
    return worst


def make_gaussian_operator(M, N, seed):
    """Dense M x N matrix with i.i.d. N(0, 1/M) entries and a cached thin SVD."""
    if not (0 < M <= N):
        raise UnsupportedShapeError(f"need 0 < M <= N, got M={M}, N={N}")
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((M, N)) / np.sqrt(M)
    mat.setflags(write=False)
    # LAPACK gesdd; computed once here and never again.
    umat, s, vtmat = np.linalg.svd(mat, full_matrices=False)
    for arr in (umat, s, vtmat):
        arr.setflags(write=False)

    return SvdOperator(
        rows=M, cols=N,
        forward=lambda x: mat @ x,
        adjoint=lambda y: mat.T @ y,
        s=s,
        u=lambda c: umat @ c,
        ut=lambda y: umat.T @ y,
        v=lambda c: vtmat.T @ c,
        vt=lambda x: vtmat @ x,
    )


def geometric_singular_values(M, cond, N):
    """Geometric spectrum s_i = c * rho^(i-1), rho = cond^(-1/(M-1)), sum s_i^2 = N."""
    if M < 1:
        raise DimensionError(f"M must be >= 1, got {M}")
    if not cond >= 1:
        raise DomainError(f"condition number must be >= 1, got {cond}")
    if M == 1 or cond == 1:
        ratios = np.ones(M)
    else:
        rho = float(cond) ** (-1.0 / (M - 1))
        ratios = rho ** np.arange(M)
    c = np.sqrt(N / np.sum(ratios ** 2))
    return c * ratios


def make_structured_operator(M, N, cond, seed):
    """Phi = [diag(s) | 0] P F D with F the orthonormal FWHT.

    D is a random +-1 diagonal, P a uniform random permutation and s a
    geometric spectrum with s[0]/s[-1] = cond.  U is the identity and
    V_M^T = (P F D) restricted to its first M rows.  No dense matrix is
    stored; forward and adjoint cost O(N log N).
    """
    if not _is_pow2(N):
        raise DimensionError(f"N must be a power of two, got {N}")
    if not (0 < M <= N):
        raise UnsupportedShapeError(f"need 0 < M <= N, got M={M}, N={N}")
    signs = _stream(seed, _STREAM_SIGNS).choice(np.array([-1.0, 1.0]), size=N)
    perm = _stream(seed, _STREAM_PERM).permutation(N)
    s = geometric_singular_values(M, cond, N)
    for arr in (signs, perm, s):
        arr.setflags(write=False)
    keep = perm[:M]

    def vt(x):
        return fwht(signs * x)[keep]

    def v(c):
        full = np.zeros(N)
        full[keep] = c
        return signs * fwht(full, out=full)

    def ident(c):
        return np.array(c, dtype=float)

    return SvdOperator(
        rows=M, cols=N,
        forward=lambda x: s * vt(x),
        adjoint=lambda y: v(s * y),
        s=s, u=ident, ut=ident, v=v, vt=vt,
    )


###############################################################################
# Wavelets
###############################################################################

_SQ3 = np.sqrt(3.0)
FILTERS = {
    "haar": np.array([1.0, 1.0]) / np.sqrt(2.0),
    "db2": np.array([1 + _SQ3, 3 + _SQ3, 3 - _SQ3, 1 - _SQ3]) / (4 * np.sqrt(2.0)),
}


def _qmf(h):
    g = h[::-1].copy()
    g[1::2] *= -1.0
    return g


def _analysis(x, h, g, axis):
    # lo[n] = sum_k h[k] x[(2n + k) mod L], periodic
    lo = np.zeros_like(np.take(x, np.arange(0, x.shape[axis], 2), axis=axis))
    hi = np.zeros_like(lo)
    for k in range(len(h)):
        shifted = np.take(np.roll(x, -k, axis=axis), np.arange(0, x.shape[axis], 2), axis=axis)
        lo += h[k] * shifted
        hi += g[k] * shifted
    return lo, hi


def _synthesis(lo, hi, h, g, axis):
    shape = list(lo.shape)
    shape[axis] *= 2
    up = np.zeros(shape)
    out = np.zeros(shape)
    idx = [slice(None)] * lo.ndim
    idx[axis] = slice(0, None, 2)
    idx = tuple(idx)
    for k in range(len(h)):
        up[...] = 0.0
        up[idx] = h[k] * lo + g[k] * hi
        out += np.roll(up, k, axis=axis)
    return out


@dataclass(frozen=True)
class WaveletTransform:
    """Separable 2-D orthonormal DWT with periodic boundaries.

    Coefficients use the Mallat layout of a ``side x side`` array (coarse
    approximation in the top-left corner) flattened row-major.
    """

    side: int
    levels: Optional[int] = None
    family: str = "db2"

    def __post_init__(self):
        if not _is_pow2(self.side) or self.side < 4:
            raise DimensionError(f"side must be a power of two >= 4, got {self.side}")
        depth = int(np.log2(self.side))
        if self.levels is None:
            object.__setattr__(self, "levels", max(depth - 3, 1))
        if not (1 <= self.levels <= depth - 2):
            raise DimensionError(f"levels must lie in [1, {depth - 2}] for side {self.side}")
        if self.family not in FILTERS:
            raise ValueError(f"unknown wavelet family {self.family!r}")

    @property
    def size(self):
        return self.side * self.side

    @property
    def approx_side(self):
        return self.side >> self.levels

    def detail_mask(self):
        """Boolean coefficient mask, True on detail bands."""
        mask = np.ones((self.side, self.side), dtype=bool)
        a = self.approx_side
        mask[:a, :a] = False
        return mask.ravel()

    def forward(self, image):
        x = np.asarray(image, dtype=float)
        if x.size != self.size:
            raise DimensionError(f"expected {self.size} pixels, got {x.size}")
        out = x.reshape(self.side, self.side).copy()
        h = FILTERS[self.family]
        g = _qmf(h)
        n = self.side
        for _ in range(self.levels):
            block = out[:n, :n]
            lo, hi = _analysis(block, h, g, axis=1)
            block = np.concatenate([lo, hi], axis=1)
            lo, hi = _analysis(block, h, g, axis=0)
            out[:n, :n] = np.concatenate([lo, hi], axis=0)
            n //= 2
        return out.ravel()

    def inverse(self, coefs):
        c = np.asarray(coefs, dtype=float)
        if c.size != self.size:
            raise DimensionError(f"expected {self.size} coefficients, got {c.size}")
        out = c.reshape(self.side, self.side).copy()
        h = FILTERS[self.family]
        g = _qmf(h)
        n = self.approx_side * 2
        for _ in range(self.levels):
            block = out[:n, :n]
            half = n // 2
            block = _synthesis(block[:half], block[half:], h, g, axis=0)
            out[:n, :n] = _synthesis(block[:, :half], block[:, half:], h, g, axis=1)
            n *= 2
        return out.ravel()


def wavelet_forward(x, levels=None, family="db2"):
    x = np.asarray(x, dtype=float)
    return WaveletTransform(x.shape[0], levels, family).forward(x)


def wavelet_inverse(v, side, levels=None, family="db2"):
    return WaveletTransform(side, levels, family).inverse(v).reshape(side, side)


def compose_measurement(phi, psi):
    """A = Phi Psi^T.  Same spectrum as Phi; right factor becomes Psi V."""
    if phi.cols != psi.size:
        raise DimensionError(f"Phi has {phi.cols} columns but Psi acts on {psi.size} pixels")
    return SvdOperator(
        rows=phi.rows, cols=phi.cols,
        forward=lambda c: phi.forward(psi.inverse(c)),
        adjoint=lambda y: psi.forward(phi.adjoint(y)),
        s=phi.s, u=phi.u, ut=phi.ut,
        v=lambda c: psi.forward(phi.v(c)),
        vt=lambda c: phi.vt(psi.inverse(c)),
    )
