"""Denoisers for AMP/VAMP and their divergences.

Every denoiser is a callable ``D(r, sigma, seed=0) -> DenoiserResult``.
``sigma`` is the standard deviation of the white Gaussian noise assumed
on ``r``; ``seed`` feeds Monte Carlo divergence probes and is ignored by
denoisers with an analytic divergence.  Divergences are reported raw;
clamping is left to the calling algorithm.
"""

import os
import selectors
import shlex
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from dvamp.errors import (
    DenoiserProtocolError,
    DenoiserSpawnError,
    DenoiserTimeoutError,
    DimensionError,
    DomainError,
)
from dvamp.oplib import WaveletTransform


@dataclass(frozen=True)
class DenoiserResult:
    estimate: np.ndarray
    divergence: float


###############################################################################
# Soft thresholding
###############################################################################

def soft_threshold(r, lam):
    """Elementwise soft threshold with its exact divergence.

    >>> soft_threshold(np.array([3.0, -0.5, 2.0]), 1.0).estimate
    array([ 2., -0.,  1.])
    """
    if lam < 0:
        raise DomainError(f"threshold must be >= 0, got {lam}")
    r = np.asarray(r, dtype=float)
    mag = np.abs(r)
    keep = mag > lam
    est = np.sign(r) * np.maximum(mag - lam, 0.0)
    return DenoiserResult(est, float(np.count_nonzero(keep)) / r.size)


def sure_risk(r, sigma, lam):
    """Stein unbiased estimate of ||soft_threshold(r, lam) - x||^2."""
    r = np.asarray(r, dtype=float)
    mag = np.abs(r)
    return (-r.size * sigma ** 2
            + np.sum(np.minimum(mag ** 2, lam ** 2))
            + 2 * sigma ** 2 * np.count_nonzero(mag > lam))


def sure_threshold(r, sigma):
    """Minimize SURE over the candidate set {0} U {|r_i|} in O(N log N).

    With t sorted ascending and lam = t_k (k = 0 meaning lam = 0), the
    risk is -N s^2 + sum_{j<=k} t_j^2 + (N - k) lam^2 + 2 s^2 #{t > lam}.
    Ties are broken toward the smallest threshold.
    """
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    t = np.sort(np.abs(np.asarray(r, dtype=float)))
    n = t.size
    if n == 0:
        return 0.0
    cands = np.concatenate([[0.0], t])
    below = np.concatenate([[0.0], np.cumsum(t ** 2)])
    # number of entries strictly above each candidate (handles ties)
    above = n - np.searchsorted(t, cands, side="right")
    at_or_below = n - above
    risk = (-n * sigma ** 2
            + below[at_or_below]
            + above * cands ** 2
            + 2 * sigma ** 2 * above)
    return float(cands[int(np.argmin(risk))])


def sure_tuned_soft_threshold(r, sigma, seed=0):
    return soft_threshold(r, sure_threshold(r, sigma))


###############################################################################
# Monte Carlo divergence
###############################################################################

def _estimate_of(out):
    return out.estimate if isinstance(out, DenoiserResult) else np.asarray(out)


def default_mc_step(r):
    return max(float(np.max(np.abs(r))) if np.size(r) else 0.0, 1.0) * 1e-3


def mc_divergence(denoiser, r, sigma, probes=1, eps=None, seed=0, base=None):
    """Rademacher-probe estimate of (1/N) tr(dD/dr) at ``r``.

    ``denoiser(r, sigma)`` may return an array or a DenoiserResult.  Pass
    ``base`` to reuse an already computed D(r).
    """
    if probes < 1:
        raise DomainError(f"probe count must be >= 1, got {probes}")
    r = np.asarray(r, dtype=float)
    if eps is None:
        eps = default_mc_step(r)
    if eps <= 0:
        raise DomainError(f"step must be > 0, got {eps}")
    if base is None:
        base = _estimate_of(denoiser(r, sigma))
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(probes):
        eta = rng.choice(np.array([-1.0, 1.0]), size=r.size)
        moved = _estimate_of(denoiser(r + eps * eta, sigma))
        total += eta @ (moved - base)
    return total / (probes * eps * r.size)


###############################################################################
# Translation-invariant wavelet denoiser
###############################################################################

def _side_of(n):
    side = int(round(np.sqrt(n)))
    if side * side != n or side & (side - 1):
        raise DimensionError(f"{n} pixels is not a square power-of-two image")
    return side


RULES = ("hard", "soft")


def ti_wavelet_estimate(r, sigma, shifts=8, multiplier=3.0, family="db2", levels=None,
                        rule="hard"):
    """Cycle-spun thresholding of detail coefficients at multiplier*sigma.

    ``rule="hard"`` zeroes small coefficients; ``rule="soft"`` also shrinks
    the survivors, which makes the map continuous.
    """
    if rule not in RULES:
        raise ValueError(f"unknown threshold rule {rule!r}; expected one of {RULES}")
    r = np.asarray(r, dtype=float)
    side = _side_of(r.size)
    wt = WaveletTransform(side, levels, family)
    detail = wt.detail_mask()
    img = r.reshape(side, side)
    thresh = multiplier * sigma
    acc = np.zeros((side, side))
    for k in range(shifts):
        c = wt.forward(np.roll(img, (k, k), axis=(0, 1)))
        if rule == "hard":
            c[detail & (np.abs(c) < thresh)] = 0.0
        else:
            d = c[detail]
            c[detail] = np.sign(d) * np.maximum(np.abs(d) - thresh, 0.0)
        acc += np.roll(wt.inverse(c).reshape(side, side), (-k, -k), axis=(0, 1))
    return (acc / shifts).ravel()


def ti_wavelet_denoise(r, sigma, seed=0, shifts=8, multiplier=3.0, family="db2",
                       levels=None, probes=1, eps=None, rule="hard"):
    """Cycle-spun wavelet thresholding with a Monte Carlo divergence."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")

    def est(x, s):
        return ti_wavelet_estimate(x, s, shifts, multiplier, family, levels, rule)

    base = est(r, sigma)
    div = mc_divergence(est, r, sigma, probes=probes, eps=eps, seed=seed, base=base)
    return DenoiserResult(base, div)


###############################################################################
# External denoiser over a binary stdio protocol
###############################################################################

MAGIC = b"DNZ1"
_REQ_HEAD = struct.Struct("<4sIId")
_RESP_HEAD = struct.Struct("<4sII")


def encode_request(image, sigma):
    img = np.asarray(image)
    rows, cols = img.shape
    return _REQ_HEAD.pack(MAGIC, rows, cols, float(sigma)) + img.astype("<f4").tobytes()


def encode_response(image):
    img = np.asarray(image)
    rows, cols = img.shape
    return _RESP_HEAD.pack(MAGIC, rows, cols) + img.astype("<f4").tobytes()


def _read_exact(stream, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return bytes(buf)
        buf += chunk
    return bytes(buf)


def serve(denoise_image, stdin=None, stdout=None):
    """Run ``denoise_image(image, sigma) -> image`` as a protocol server.

    Reads requests from ``stdin`` until EOF.  Use this to wrap any Python
    denoiser (e.g. a BM3D binding) as an external denoiser executable.
    """
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        head = _read_exact(stdin, _REQ_HEAD.size)
        if not head:
            return
        magic, rows, cols, sigma = _REQ_HEAD.unpack(head)
        if magic != MAGIC:
            raise DenoiserProtocolError(f"bad request magic {magic!r}")
        body = _read_exact(stdin, 4 * rows * cols)
        img = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(float)
        stdout.write(encode_response(denoise_image(img, sigma)))
        stdout.flush()


class ExternalDenoiser:
    """Out-of-process image denoiser speaking the DNZ1 protocol.

    One persistent subprocess per calling thread and process; processes
    are never shared between simultaneous calls.  The divergence is a
    Monte Carlo estimate, so each probe costs one extra round trip.
    """

    def __init__(self, command, timeout=60.0, probes=1, eps=None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.probes = probes
        self.eps = eps
        self._procs = {}
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_procs"] = {}
        state["_lock"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def _proc(self):
        key = (os.getpid(), threading.get_ident())
        with self._lock:
            proc = self._procs.get(key)
            if proc is not None and proc.poll() is None:
                return proc
            try:
                proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                        stdout=subprocess.PIPE, bufsize=0)
            except OSError as exc:
                raise DenoiserSpawnError(f"cannot start {self.command!r}: {exc}") from exc
            self._procs[key] = proc
            return proc

    def _drop(self, proc):
        with self._lock:
            for key, p in list(self._procs.items()):
                if p is proc:
                    del self._procs[key]
        proc.kill()
        proc.wait()

    def _recv(self, proc, n, deadline):
        buf = bytearray()
        with selectors.DefaultSelector() as sel:
            sel.register(proc.stdout, selectors.EVENT_READ)
            while len(buf) < n:
                left = deadline - time.monotonic()
                if left <= 0 or not sel.select(left):
                    self._drop(proc)
                    raise DenoiserTimeoutError(f"no response within {self.timeout} s")
                chunk = os.read(proc.stdout.fileno(), n - len(buf))
                if not chunk:
                    code = proc.poll()
                    self._drop(proc)
                    raise DenoiserProtocolError(
                        f"denoiser closed its output after {len(buf)} of {n} bytes"
                        f" (exit status {code})")
                buf += chunk
        return bytes(buf)

    def denoise_image(self, image, sigma):
        img = np.asarray(image, dtype=float)
        if img.ndim != 2:
            raise DimensionError("external denoiser expects a 2-D image")
        proc = self._proc()
        deadline = time.monotonic() + self.timeout
        try:
            proc.stdin.write(encode_request(img, sigma))
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._drop(proc)
            raise DenoiserSpawnError(f"denoiser is not accepting input: {exc}") from exc
        magic, rows, cols = _RESP_HEAD.unpack(self._recv(proc, _RESP_HEAD.size, deadline))
        if magic != MAGIC or (rows, cols) != img.shape:
            self._drop(proc)
            raise DenoiserProtocolError(
                f"bad response header magic={magic!r} shape=({rows}, {cols})")
        body = self._recv(proc, 4 * rows * cols, deadline)
        return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(float)

    def _flat(self, r, sigma):
        side = _side_of(r.size)
        return self.denoise_image(r.reshape(side, side), sigma).ravel()

    def __call__(self, r, sigma, seed=0):
        r = np.asarray(r, dtype=float)
        base = self._flat(r, sigma)
        div = mc_divergence(self._flat, r, sigma, probes=self.probes, eps=self.eps,
                            seed=seed, base=base)
        return DenoiserResult(base, div)

    def close(self):
        with self._lock:
            procs, self._procs = list(self._procs.values()), {}
        for proc in procs:
            try:
                proc.stdin.close()
                proc.wait(timeout=5)
            except Exception:
                proc.kill()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def external_denoise(spec, r, sigma, seed=0):
    return make_denoiser(spec)(r, sigma, seed)


###############################################################################
# Specs
###############################################################################

KINDS = ("soft-threshold", "sure-soft-threshold", "ti-wavelet", "external")
DEFAULT_MULTIPLIER = {"soft-threshold": 2.0, ("ti-wavelet", "hard"): 3.0,
                      ("ti-wavelet", "soft"): 1.5}


@dataclass(frozen=True)
class DenoiserSpec:
    """Parameters selecting and configuring a denoiser.

    ``multiplier`` scales sigma into a threshold: lambda = multiplier * sigma
    for soft-threshold (default 2).  ti-wavelet thresholds detail
    coefficients with ``rule`` "hard" (default multiplier 3) or "soft"
    (default 1.5).
    """

    kind: str = "soft-threshold"
    multiplier: Optional[float] = None
    shifts: int = 8
    executable: Optional[str] = None
    timeout: float = 60.0
    probes: int = 1
    eps: Optional[float] = None
    rule: str = "hard"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")
        if self.rule not in RULES:
            raise ValueError(f"unknown threshold rule {self.rule!r}; expected one of {RULES}")
        if self.multiplier is None:
            default = DEFAULT_MULTIPLIER.get(self.kind,
                                             DEFAULT_MULTIPLIER.get((self.kind, self.rule), 1.0))
            object.__setattr__(self, "multiplier", default)
        if not self.multiplier > 0:
            raise DomainError(f"multiplier must be > 0, got {self.multiplier}")
        if self.shifts < 1:
            raise DomainError(f"shift count must be >= 1, got {self.shifts}")
        if self.probes < 1:
            raise DomainError(f"probe count must be >= 1, got {self.probes}")
        if self.kind == "external" and not self.executable:
            raise ValueError("external denoiser needs an executable")

    @classmethod
    def parse(cls, text, **overrides):
        """Parse ``kind[:key=value,...]``, e.g. ``ti-wavelet:shifts=4``."""
        kind, _, rest = text.partition(":")
        kwargs = dict(overrides)
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            key = key.strip()
            if key in ("shifts", "probes"):
                kwargs[key] = int(value)
            elif key in ("multiplier", "timeout", "eps"):
                kwargs[key] = float(value)
            elif key in ("executable", "rule"):
                kwargs[key] = value
            else:
                raise ValueError(f"unknown denoiser parameter {key!r}")
        return cls(kind=kind.strip(), **kwargs)


class _SoftThreshold:
    def __init__(self, multiplier):
        self.multiplier = multiplier

    def __call__(self, r, sigma, seed=0):
        return soft_threshold(r, self.multiplier * sigma)


class _TIWavelet:
    def __init__(self, spec):
        self.spec = spec

    def __call__(self, r, sigma, seed=0):
        s = self.spec
        return ti_wavelet_denoise(r, sigma, seed=seed, shifts=s.shifts,
                                  multiplier=s.multiplier, probes=s.probes, eps=s.eps,
                                  rule=s.rule)


class Masked:
    """Apply a separable denoiser to the entries selected by ``active``.

    Other entries pass through unchanged and count with unit divergence.
    Used to leave the coarse wavelet approximation band unpenalized.
    """

    def __init__(self, denoiser, active):
        self.denoiser = denoiser
        self.active = np.asarray(active, dtype=bool)

    def __call__(self, r, sigma, seed=0):
        r = np.asarray(r, dtype=float)
        out = self.denoiser(r[self.active], sigma, seed=seed)
        est = r.copy()
        est[self.active] = out.estimate
        n_act = np.count_nonzero(self.active)
        div = (out.divergence * n_act + (r.size - n_act)) / r.size
        return DenoiserResult(est, div)


def make_denoiser(spec):
    if isinstance(spec, str):
        spec = DenoiserSpec.parse(spec)
    if spec.kind == "soft-threshold":
        return _SoftThreshold(spec.multiplier)
    if spec.kind == "sure-soft-threshold":
        return sure_tuned_soft_threshold
    if spec.kind == "ti-wavelet":
        return _TIWavelet(spec)
    return ExternalDenoiser(spec.executable, timeout=spec.timeout, probes=spec.probes,
                            eps=spec.eps)
