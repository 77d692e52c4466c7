"""Scalar normal-distribution helpers, counter-based random streams and a
1-D adaptive quadrature used as ground truth for orthant probabilities."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

SQRT2 = math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _out(a: np.ndarray):
    # 0-d arrays come back as Python floats
    return a[()] if a.ndim == 0 else a


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return _out(INV_SQRT_2PI * np.exp(-0.5 * x * x))


def std_normal_cdf(x):
    x = np.asarray(x, dtype=float)
    return _out(0.5 * special.erfc(-x / SQRT2))


def log_std_normal_cdf(x):
    """log Phi(x) without underflow.

    The left tail uses the scaled complementary error function, i.e. the
    Mills ratio, so that values stay finite far below x = -37.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    left = x <= 0.0
    xl = x[left]
    out[left] = np.log(0.5 * special.erfcx(-xl / SQRT2)) - 0.5 * xl * xl
    xr = x[~left]
    out[~left] = np.log1p(-0.5 * special.erfc(xr / SQRT2))
    return _out(out)


def inverse_mills(x):
    """phi(x) / Phi(x), stable for very negative x."""
    x = np.asarray(x, dtype=float)
    return _out(np.exp(-0.5 * x * x - LOG_SQRT_2PI - np.asarray(log_std_normal_cdf(x))))


# ---------------------------------------------------------------------------
# counter-based random streams


@np.errstate(over="ignore")
def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _u64(v) -> np.ndarray:
    if isinstance(v, (int, np.integer)):
        return np.asarray(int(v) & _MASK64, dtype=np.uint64)
    return np.asarray(v).astype(np.uint64)


@np.errstate(over="ignore")
def _hash_keys(seed: int, stream: int, *counters) -> np.ndarray:
    h = _mix64(_u64(seed) + _GOLDEN)
    h = _mix64(h ^ (_u64(stream) * _GOLDEN + _GOLDEN))
    for c in counters:
        h = _mix64(h ^ (_u64(c) * _GOLDEN))
    return _mix64(h)


def _to_uniform(h: np.ndarray) -> np.ndarray:
    # 53 high bits, centred so 0 and 1 are never produced
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def derive_stream_id(*keys: int) -> int:
    """Fold integer keys (epoch, phase, ...) into one 64-bit stream id."""
    h = _hash_keys(0x5EED, len(keys), *[np.asarray(k, dtype=np.uint64) for k in keys])
    return int(h)


class RngStream:
    """Deterministic random stream identified by (seed, stream_id).

    Draw ``j`` of the stream is a pure function of (seed, stream_id, j), so
    the sequence is reproducible across runs and platforms, and substreams
    can be derived without shared state.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._counter = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self._counter})"

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, derive_stream_id(self.stream_id, *keys))

    def _take(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        return _hash_keys(self.seed, self.stream_id, idx)

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = _to_uniform(self._take(n))
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        z = special.ndtri(_to_uniform(self._take(n)))
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from range(n), uniformly."""
        return self.permutation(n)[:size]


def keyed_normals(seed: int, stream_id: int, keys, count: int) -> np.ndarray:
    """Standard normals of shape (len(keys), count).

    Row j depends only on (seed, stream_id, keys[j]); the order in which
    keys appear in a batch never changes the draws of a key.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 1)
    cols = np.arange(count, dtype=np.uint64).reshape(1, -1)
    h = _hash_keys(seed, stream_id, keys, cols)
    return special.ndtri(_to_uniform(h))


@dataclass
class BivariateSample:
    eps: np.ndarray | float
    delta: np.ndarray | float


def sample_bivariate(rho: float, rng: RngStream, size=None) -> BivariateSample:
    """Draw (eps, delta) with unit variances and correlation rho."""
    if not abs(rho) < 1.0:
        raise ValueError(f"correlation must satisfy |rho| < 1, got {rho}")
    eps = rng.normal(size)
    eta = rng.normal(size)
    delta = rho * np.asarray(eps) + math.sqrt(1.0 - rho * rho) * np.asarray(eta)
    if size is None:
        delta = float(delta)
    return BivariateSample(eps, delta)


# ---------------------------------------------------------------------------
# quadrature


class QuadratureError(RuntimeError):
    pass


def adaptive_simpson(f: Callable[[float], float], lo: float, hi: float,
                     tol: float = 1e-10, max_depth: int = 60,
                     max_evals: int = 2_000_000) -> float:
    """Adaptive Simpson rule with interval halving and Richardson correction."""
    if hi == lo:
        return 0.0
    sign = 1.0
    if hi < lo:
        lo, hi, sign = hi, lo, -1.0
    flo, fhi = f(lo), f(hi)
    mid = 0.5 * (lo + hi)
    fmid = f(mid)
    evals = 3
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
    total = 0.0
    stack = [(lo, hi, flo, fmid, fhi, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, s, eps, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        evals += 2
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        diff = left + right - s
        if abs(diff) <= 15.0 * eps:
            total += left + right + diff / 15.0
            continue
        if depth >= max_depth or evals > max_evals:
            raise QuadratureError(
                f"adaptive Simpson did not converge on [{a}, {b}] (depth {depth}, {evals} evaluations)")
        stack.append((a, m, fa, flm, fm, left, 0.5 * eps, depth + 1))
        stack.append((m, b, fm, frm, fb, right, 0.5 * eps, depth + 1))
    return sign * total


_TRUNC = 10.0


def _orthant_integrand(a: float, rho: float) -> Callable[[float], float]:
    s = math.sqrt(1.0 - rho * rho)

    def f(p: float) -> float:
        return 0.5 * math.erfc(-(a + rho * p) / (s * SQRT2)) * INV_SQRT_2PI * math.exp(-0.5 * p * p)

    return f


def _integrate_with_break(f, lo, hi, brk, tol):
    if lo >= hi:
        return 0.0
    if lo < brk < hi:
        return adaptive_simpson(f, lo, brk, tol / 2) + adaptive_simpson(f, brk, hi, tol / 2)
    return adaptive_simpson(f, lo, hi, tol)


def _check_orthant_args(a, b, rho):
    if not abs(rho) <= 0.999:
        raise ValueError(f"quadrature oracle requires |rho| <= 0.999, got {rho}")
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("a and b must be finite")


def orthant_prob_quadrature(a: float, b: float, rho: float, tol: float = 1e-10) -> float:
    """P(Z > 0, Y > 0) for Z ~ N(a, 1), Y ~ N(b, 1) with correlation rho.

    Integrates Phi((a + rho p) / sqrt(1 - rho^2)) phi(p) over p > -b, with the
    domain cut at |p| = 10.
    """
    _check_orthant_args(a, b, rho)
    f = _orthant_integrand(a, rho)
    brk = -a / rho if rho != 0.0 else math.inf
    val = _integrate_with_break(f, max(-b, -_TRUNC), _TRUNC, brk, tol)
    return min(max(val, 0.0), float(std_normal_cdf(a)))


def orthant_prob_quadrature_complement(a: float, b: float, rho: float, tol: float = 1e-10) -> float:
    """P(Z > 0, Y <= 0), the other half of the total-probability split."""
    _check_orthant_args(a, b, rho)
    f = _orthant_integrand(a, rho)
    brk = -a / rho if rho != 0.0 else math.inf
    val = _integrate_with_break(f, -_TRUNC, min(-b, _TRUNC), brk, tol)
    return min(max(val, 0.0), float(std_normal_cdf(a)))


def bivariate_normal_pdf(z, y, mu_z, mu_y, rho):
    """Density of (Z, Y) with unit variances, means (mu_z, mu_y), correlation rho."""
    dz = np.asarray(z, dtype=float) - mu_z
    dy = np.asarray(y, dtype=float) - mu_y
    det = 1.0 - rho * rho
    q = (dz * dz - 2.0 * rho * dz * dy + dy * dy) / det
    return _out(np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det)))
