"""Dense float64 linear algebra shared by every other module.

Conjugate gradient for SPD operators, box projections, and a counter-based
random stream (Philox + explicit Box-Muller) so that every draw is
bit-reproducible for a fixed seed, across platforms and across concurrently
running attack instances.
"""

from dataclasses import dataclass

import numpy as np


class NonConvergenceError(RuntimeError):
    """CG residual still above tolerance after max_iter iterations."""

    def __init__(self, residual, iterations):
        super().__init__(
            f"cg_solve: residual {residual:.3e} after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


class BreakdownError(RuntimeError):
    """Non-finite or non-SPD behaviour detected inside an iterative solve."""


def as_vector(x, name="vector"):
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name}: expected 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: contains non-finite entries")
    return v


def as_matrix(x, name="matrix"):
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains non-finite entries")
    return m


@dataclass(frozen=True)
class BoxDomain:
    """Per-coordinate box [lo, hi]; scalars broadcast over any shape."""

    lo: np.ndarray
    hi: np.ndarray

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        lo_b, hi_b = np.broadcast_arrays(lo, hi)
        if np.any(lo_b > hi_b):
            raise ValueError("BoxDomain: lo > hi on some coordinate")
        object.__setattr__(self, "lo", lo.copy())
        object.__setattr__(self, "hi", hi.copy())

    @classmethod
    def cube(cls, lo, hi):
        return cls(float(lo), float(hi))


def project_box(x, dom):
    """Clip x coordinate-wise into dom. Idempotent; x is not modified."""
    x = np.asarray(x, dtype=np.float64)
    # np.clip broadcasts silently; reject genuinely incompatible trailing dims
    if dom.lo.size > 1 and (x.ndim == 0 or x.shape[-1] != dom.lo.size):
        raise ValueError(
            f"project_box: x has shape {x.shape}, domain has {dom.lo.size} coords"
        )
    return np.clip(x, dom.lo, dom.hi)


_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _splitmix64(z):
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class RngStream:
    """Seeded counter-based stream (Philox4x64).

    Identical seed => identical draw sequence. Streams must not be shared
    between concurrent tasks; derive one child per task via `child(tag)`.
    """

    def __init__(self, seed):
        self.seed = int(seed) & _MASK
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag):
        """Independent stream keyed by (seed, tag); deterministic.

        tag may be an int or a short string label.
        """
        if isinstance(tag, str):
            h = 0
            for byte in tag.encode("utf-8"):
                h = _splitmix64(h ^ byte)
            tag = h
        return RngStream(_splitmix64(self.seed ^ _splitmix64(int(tag) & _MASK)))

    def uniform(self, size=None, lo=0.0, hi=1.0):
        return lo + (hi - lo) * self._gen.random(size)

    def integers(self, lo, hi, size=None):
        return self._gen.integers(lo, hi, size=size)

    def shuffle(self, x):
        self._gen.shuffle(x)

    def choice_no_replace(self, n, k):
        """k distinct indices from range(n), uniform order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self._gen.choice(n, size=k, replace=False)

    def standard_normal(self, size):
        """Box-Muller on the uniform stream (sampler pinned for stability)."""
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log never sees zero
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(size)


def draw_gaussian(rng, mean, cov_diag, n):
    """n rows from N(mean, diag(cov_diag)), reproducible per stream state."""
    mean = as_vector(mean, "mean")
    cov_diag = as_vector(cov_diag, "cov_diag")
    if mean.shape != cov_diag.shape:
        raise ValueError("mean and cov_diag shapes differ")
    if np.any(cov_diag <= 0):
        raise ValueError("draw_gaussian: non-positive variance")
    z = rng.standard_normal((int(n), mean.size))
    return mean + np.sqrt(cov_diag) * z


def cg_solve(apply_A, b, tol=1e-8, max_iter=None):
    """Solve A v = b for a symmetric positive-definite operator.

    Terminates when ||A v - b|| <= tol * ||b||. Raises NonConvergenceError
    past max_iter (default: dim of b) and BreakdownError on non-finite
    intermediates or a non-positive curvature p'Ap (non-SPD operator).
    """
    b = as_vector(b, "b")
    if tol <= 0:
        raise ValueError("cg_solve: tol must be positive")
    if max_iter is None:
        max_iter = b.size
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return x
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    target = tol * b_norm
    for k in range(max_iter):
        Ap = np.asarray(apply_A(p), dtype=np.float64)
        if Ap.shape != p.shape or not np.all(np.isfinite(Ap)):
            raise BreakdownError(f"cg_solve: operator output invalid at iter {k}")
        pAp = float(p @ Ap)
        if pAp <= 0.0 or not np.isfinite(pAp):
            raise BreakdownError(
                f"cg_solve: non-positive curvature {pAp:.3e} at iter {k}"
            )
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise BreakdownError(f"cg_solve: residual non-finite at iter {k}")
        if np.sqrt(rs_new) <= target:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise NonConvergenceError(float(np.linalg.norm(r)), max_iter)
