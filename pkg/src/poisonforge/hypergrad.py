"""Hypergradients of the validation loss through inner model training.

Two routes to d(val loss)/d(poison features) and d(val loss)/d(lambda):

* rmd_hypergrad: truncated reverse-mode differentiation of T unrolled
  full-batch gradient-descent steps. Trains forward, stores the trajectory
  (or checkpoints), then sweeps backward accumulating the two mixed products
  against a running adjoint dw.
* implicit_hypergrad: at an (approximately) stationary inner solution, solve
  (d2L/dw2) v = grad_w(val loss) by conjugate gradient and contract v with
  the two mixed second derivatives; equals the RMD limit for strongly convex
  inner problems.
"""

from dataclasses import dataclass, field

import numpy as np

from . import models
from .linalg import cg_solve


class DivergenceError(RuntimeError):
    """Inner training produced a non-finite state."""

    def __init__(self, epoch):
        super().__init__(f"inner training diverged at epoch {epoch}")
        self.epoch = epoch


class StationarityViolationError(RuntimeError):
    """implicit_hypergrad called away from an inner stationary point."""


@dataclass
class TrainTrajectory:
    """States w^(0..T) of full-batch gradient descent, possibly checkpointed.

    With checkpoint_every=k only every k-th state (plus w^(0), w^(T)) is
    kept; state(t) then recomputes the containing segment forward from the
    nearest stored checkpoint and caches it, which makes a backward sweep
    cost one extra forward training in total.
    """

    eta: float
    T: int
    _full: np.ndarray | None = None            # (T+1, d) when fully stored
    _checkpoints: dict = field(default_factory=dict)
    _checkpoint_every: int = 0
    _recompute: callable = None
    _segment_start: int = -1
    _segment: np.ndarray | None = None

    def state(self, t):
        if not (0 <= t <= self.T):
            raise IndexError(f"state {t} outside 0..{self.T}")
        if self._full is not None:
            return self._full[t]
        if t in self._checkpoints:
            return self._checkpoints[t]
        k = self._checkpoint_every
        start = (t // k) * k
        if start != self._segment_start:
            self._segment = self._recompute(self._checkpoints[start],
                                            min(k, self.T - start))
            self._segment_start = start
        return self._segment[t - start]

    @property
    def final(self):
        return self.state(self.T)


@dataclass
class HyperGrads:
    """Outer gradients plus diagnostics from one reverse sweep."""

    d_xp: np.ndarray          # (n_p, m)
    d_lambda: np.ndarray      # (n_groups,)
    w_final: np.ndarray
    inner_grad_norm: float
    val_loss_final: float


def _gd_steps(spec, data, lam, w0, n_steps, eta, sink=None, offset=0):
    """n_steps of w <- w - eta * grad; optionally record into sink."""
    w = w0.copy()
    if sink is not None:
        sink[0] = w
    for i in range(n_steps):
        try:
            g = models.grad_w(spec, data, w, lam)
        except models.NonFiniteError:
            raise DivergenceError(offset + i) from None
        w = w - eta * g
        if not np.all(np.isfinite(w)):
            raise DivergenceError(offset + i + 1)
        if sink is not None:
            sink[i + 1] = w
    return w


def inner_train(spec, data, lam, w0, T, eta, checkpoint_every=0):
    """T full-batch gradient steps from w0, trajectory retained.

    checkpoint_every=0 stores all T+1 states; k>0 stores every k-th state
    and recomputes segments on demand.
    """
    if T < 1:
        raise ValueError("inner_train: T must be >= 1")
    if eta < 0:
        raise ValueError("inner_train: eta must be non-negative")
    w0 = np.asarray(w0, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)

    if checkpoint_every <= 0:
        sink = np.empty((T + 1, w0.size))
        _gd_steps(spec, data, lam, w0, T, eta, sink=sink)
        return TrainTrajectory(eta=eta, T=T, _full=sink)

    k = int(checkpoint_every)
    checkpoints = {0: w0.copy()}
    w = w0
    t = 0
    while t < T:
        step = min(k, T - t)
        w = _gd_steps(spec, data, lam, w, step, eta, offset=t)
        t += step
        checkpoints[t] = w.copy()

    def recompute(w_start, n_steps, _s=spec, _d=data, _l=lam, _e=eta):
        seg = np.empty((n_steps + 1, w_start.size))
        _gd_steps(_s, _d, _l, w_start, n_steps, _e, sink=seg)
        return seg

    return TrainTrajectory(
        eta=eta, T=T, _checkpoints=checkpoints,
        _checkpoint_every=k, _recompute=recompute,
    )


def rmd_hypergrad(spec, data, poison_indices, val_data, lam, w0, T, eta,
                  checkpoint_every=0):
    """Reverse-mode hypergradients of the validation loss at w^(T).

    Forward: T full-batch GD steps. Backward: dw starts at the validation
    gradient; each step t contracts dw with the three second-derivative
    operators at w^(t) and accumulates

        d_xp   -= eta * (dXp dw L)^T dw
        d_lam  -= eta * (dLam dw L)^T dw
        dw     -= eta * (d2L/dw2) dw

    using the same dw for all three before updating it.
    """
    lam = np.asarray(lam, dtype=np.float64)
    P = np.asarray(poison_indices, dtype=np.intp)
    traj = inner_train(spec, data, lam, w0, T, eta,
                       checkpoint_every=checkpoint_every)
    wT = traj.final.copy()
    dw = models.grad_w_val(spec, val_data, wT)
    d_xp = np.zeros((P.size, data.n_features))
    d_lam = np.zeros(models.n_lambda_groups(spec))
    for t in range(T - 1, -1, -1):
        w_t = traj.state(t)
        h_ww, h_xp, h_lam = models.rmd_partials(spec, data, P, w_t, lam, dw)
        d_xp -= eta * h_xp
        d_lam -= eta * h_lam
        dw = dw - eta * h_ww
        if not np.all(np.isfinite(dw)):
            raise DivergenceError(t)
    inner_norm = float(np.linalg.norm(models.grad_w(spec, data, wT, lam)))
    return HyperGrads(
        d_xp=d_xp,
        d_lambda=d_lam,
        w_final=wT,
        inner_grad_norm=inner_norm,
        val_loss_final=models.val_loss(spec, val_data, wT),
    )


def implicit_hypergrad(spec, data, poison_indices, val_data, lam, w_star,
                       cg_tol=1e-10, stationarity_tol=None, damping=0.0,
                       max_iter=None):
    """Implicit-function hypergradients at a stationary inner solution.

    Solves (d2L/dw2 + damping I) v = grad_w(val loss) with conjugate
    gradient, then returns -(dXp dw L)^T v and -(dLam dw L)^T v. Requires
    ||grad_w L(w_star)|| below stationarity_tol (default
    1e-5 * (1 + ||grad_w L at zero-parameters||-free scale, i.e. 1e-5)).
    """
    lam = np.asarray(lam, dtype=np.float64)
    w_star = np.asarray(w_star, dtype=np.float64)
    P = np.asarray(poison_indices, dtype=np.intp)
    g_inner = models.grad_w(spec, data, w_star, lam)
    g_norm = float(np.linalg.norm(g_inner))
    if stationarity_tol is None:
        stationarity_tol = 1e-5
    if g_norm > stationarity_tol:
        raise StationarityViolationError(
            f"||grad_w L|| = {g_norm:.3e} exceeds tolerance {stationarity_tol:.3e}"
        )
    gA = models.grad_w_val(spec, val_data, w_star)

    def apply_H(u):
        out = models.hvp_ww(spec, data, w_star, lam, u)
        if damping:
            out = out + damping * u
        return out

    v = cg_solve(apply_H, gA, tol=cg_tol, max_iter=max_iter)
    d_xp = -models.hvp_xp_w(spec, data, P, w_star, lam, v)
    d_lam = -models.hvp_lambda_w(spec, data, w_star, lam, v)
    return HyperGrads(
        d_xp=d_xp,
        d_lambda=d_lam,
        w_final=w_star.copy(),
        inner_grad_norm=g_norm,
        val_loss_final=models.val_loss(spec, val_data, w_star),
    )
