"""Learning the regularization strength on clean data.

learn_lambda_rmd runs projected hypergradient descent on lambda alone (the
0%-poisoning baseline of the learned-lambda curves); cv_grid_lambda is the
classical k-fold grid search the fixed-lambda baseline uses.
"""

from dataclasses import dataclass

import numpy as np

from . import hypergrad, models
from .attack import AttackState, AttackTrace, TraceRow, maybe_restart
from .linalg import BoxDomain


@dataclass(frozen=True)
class LambdaGrid:
    """Log-scale candidates (lambda is already a log quantity, so the grid
    is linear in lambda), fold count, and the fold-shuffle seed."""

    values: tuple
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("empty lambda grid")
        if self.k < 2:
            raise ValueError("need at least 2 folds")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def default(cls, lo=-8.0, hi=1.0, n=10, k=5, seed=0):
        return cls(tuple(np.linspace(lo, hi, n)), k=k, seed=seed)


def learn_lambda_rmd(spec, train_data, val_data, lam0, t_lambda, beta, T, eta,
                     lam_box=None, rng=None, patience=20, restarts=True,
                     checkpoint_every=0):
    """t_lambda projected descent steps on lambda over clean training data.

    No poison rows are involved; each step re-initializes the inner
    parameters, runs one reverse sweep, and moves lambda against its
    hypergradient (raw, not normalized), projected into lam_box.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    n_groups = models.n_lambda_groups(spec)
    lam0 = np.asarray(lam0, dtype=np.float64)
    if lam0.ndim == 0:
        lam0 = np.full(n_groups, float(lam0))
    if lam_box is None:
        lam_box = BoxDomain.cube(-8.0, np.log(200.0))
    hyper = models.HyperParams(lam0, lam_box).clipped(lam0)
    no_poison = np.empty(0, dtype=np.intp)

    trace = AttackTrace()
    state = AttackState(target="lambda", patience=patience, x_p=None,
                        hyper=hyper)
    w_rng = rng.child("init-w") if rng is not None else None
    restart_rng = rng.child("restart") if rng is not None else None

    for tau in range(t_lambda):
        if spec.kind == "logreg":
            w0 = np.zeros(models.param_count(spec))
        else:
            w0 = models.init_params(spec, w_rng.child(tau))
        sweep = hypergrad.rmd_hypergrad(
            spec, train_data, no_poison, val_data, state.hyper.values, w0,
            T, eta, checkpoint_every=checkpoint_every,
        )
        state.observe(sweep.val_loss_final, None, state.hyper)
        state.hyper = state.hyper.clipped(
            state.hyper.values - beta * sweep.d_lambda
        )
        trace.append(TraceRow(
            tau=tau,
            val_loss=sweep.val_loss_final,
            lam=state.hyper.values.copy(),
            wnorm2=models.group_norms_sq(spec, sweep.w_final),
            xp_grad_norm=0.0,
            lam_grad_norm=float(np.linalg.norm(sweep.d_lambda)),
        ))
        if restarts and restart_rng is not None:
            maybe_restart(state, trace, restart_rng)

    hyper_out = state.hyper
    if state.restarts and state.best_hyper is not None:
        if state.best_obj < trace.rows[-1].val_loss:
            hyper_out = state.best_hyper
    return hyper_out, trace


def _fold_splits(n, k, seed):
    """Seeded shuffle, then k contiguous slices."""
    from .linalg import RngStream

    order = np.arange(n)
    RngStream(seed).shuffle(order)
    return [order[i::k] for i in range(k)]   # interleaved => sizes differ by <= 1


def cv_grid_lambda(spec, train_data, grid, T, eta, rng=None):
    """k-fold cross-validated grid search; returns the winning scalar lambda.

    Each candidate trains on k-1 folds with full-batch descent and is scored
    by mean 0/1 error on the held-out fold. Ties break toward the LARGER
    lambda (more regularization).
    """
    n = len(train_data)
    folds = _fold_splits(n, grid.k, grid.seed)
    n_groups = models.n_lambda_groups(spec)
    mean_errors = []
    for cand in grid.values:
        lam = np.full(n_groups, cand)
        errs = []
        for fi, hold in enumerate(folds):
            mask = np.ones(n, dtype=bool)
            mask[hold] = False
            tr = models.Dataset(train_data.X[mask], train_data.y[mask],
                                train_data.domain)
            va = models.Dataset(train_data.X[hold], train_data.y[hold],
                                train_data.domain)
            if spec.kind == "logreg":
                w0 = np.zeros(models.param_count(spec))
            else:
                seed_rng = (rng or _default_rng(grid.seed)).child(f"cv-{fi}")
                w0 = models.init_params(spec, seed_rng)
            try:
                with np.errstate(over="ignore"):
                    traj = hypergrad.inner_train(spec, tr, lam, w0, T, eta)
            except hypergrad.DivergenceError:
                # candidate unstable at this step size: worst possible score
                errs.append(1.0)
                continue
            errs.append(models.zero_one_error(spec, va, traj.final))
        mean_errors.append(float(np.mean(errs)))
    best = 0
    for i in range(1, len(grid.values)):
        # strictly-better wins; equal error falls to the larger candidate
        if mean_errors[i] <= mean_errors[best]:
            if (mean_errors[i] < mean_errors[best]
                    or grid.values[i] > grid.values[best]):
                best = i
    return grid.values[best], mean_errors


def _default_rng(seed):
    from .linalg import RngStream

    return RngStream(seed)
