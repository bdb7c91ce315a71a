"""Coordinate projected hypergradient ascent/descent over poison features
and regularization strength.

One outer iteration (hyperiteration): re-initialize the inner parameters,
run the reverse-mode sweep for the poison-feature gradient, take a
normalized projected ascent step on X_p, write it into the training set,
then (when lambda is learned) run a second sweep on the updated set and
take a raw projected descent step on lambda.

Rising poison fractions are simulated cumulatively: batches of points are
optimized one after another, each frozen once done, lambda carried across
batches.
"""

from dataclasses import dataclass, field

import numpy as np

from . import hypergrad, models
from .linalg import BoxDomain, project_box

FIXED_LAMBDA = "fixed-lambda"
LEARN_LAMBDA = "learn-lambda"


@dataclass
class PoisonBatch:
    """Poison features, their fixed flipped labels, and the replaced rows.

    indices is None for append-style batches (the points are concatenated
    to the training set instead of replacing rows).
    """

    X_p: np.ndarray
    y_p: np.ndarray
    indices: np.ndarray | None
    box: BoxDomain

    def __post_init__(self):
        self.X_p = np.asarray(self.X_p, dtype=np.float64)
        self.y_p = np.asarray(self.y_p, dtype=np.float64)
        if len(self.X_p) != len(self.y_p):
            raise ValueError("poison feature/label count mismatch")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.intp)
            if len(set(self.indices.tolist())) != len(self.indices):
                raise ValueError("duplicate replacement indices")
            if len(self.indices) != len(self.X_p):
                raise ValueError("replacement index count mismatch")

    def __len__(self):
        return len(self.y_p)


@dataclass(frozen=True)
class AttackConfig:
    """Outer/inner loop settings; defaults follow the MNIST-scale profile."""

    t_dp: int = 100          # hyperiterations, poison-only mode
    t_lambda: int = 50       # hyperiterations, lambda-only mode
    t_mul: int = 100         # hyperiterations, joint mode
    t_inner: int = 150       # inner full-batch epochs per sweep
    eta: float = 0.1         # inner learning rate
    alpha: float = 0.99      # poison-feature step (applied to unit-norm grad)
    beta: float = 0.80       # lambda step (raw gradient)
    batch_size: int = 17
    max_fraction: float = 0.166
    lam_lo: float = -8.0
    lam_hi: float = float(np.log(200.0))
    lam_init: float = float(np.log(5.0))
    patience: int = 20       # hyperiterations without improvement => restart
    restarts: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        # zero rates are legal degenerate cases (frozen ascent / descent)
        if min(self.alpha, self.beta, self.eta) < 0:
            raise ValueError("learning rates must be non-negative")
        if min(self.t_dp, self.t_lambda, self.t_mul, self.t_inner) < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.max_fraction <= 1.0:
            raise ValueError("max_fraction outside [0, 1]")
        if self.lam_lo > self.lam_hi:
            raise ValueError("lambda box inverted")

    @property
    def lam_box(self):
        return BoxDomain.cube(self.lam_lo, self.lam_hi)

    def initial_hyper(self, n_groups):
        return models.HyperParams(
            np.full(n_groups, self.lam_init), self.lam_box
        )


@dataclass
class TraceRow:
    tau: int
    val_loss: float
    lam: np.ndarray
    wnorm2: np.ndarray          # per lambda group, at the sweep's final w
    xp_grad_norm: float
    lam_grad_norm: float
    restarted: bool = False


@dataclass
class AttackTrace:
    rows: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row.tau <= self.rows[-1].tau:
            raise ValueError("hyperiteration index must increase")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def objectives(self):
        return [r.val_loss for r in self.rows]


@dataclass
class AttackState:
    """Mutable loop state consulted by the restart rule."""

    target: str                       # "poison" | "lambda"
    patience: int
    x_p: np.ndarray | None
    hyper: models.HyperParams
    val_pool: models.Dataset | None = None
    y_p: np.ndarray | None = None
    best_obj: float = np.nan
    best_x_p: np.ndarray | None = None
    best_hyper: models.HyperParams | None = None
    last_restart: int = -1
    restarts: int = 0

    def observe(self, obj, x_p, hyper):
        better = (
            np.isnan(self.best_obj)
            or (self.target == "poison" and obj > self.best_obj)
            or (self.target == "lambda" and obj < self.best_obj)
        )
        if better:
            self.best_obj = obj
            self.best_x_p = None if x_p is None else x_p.copy()
            self.best_hyper = hyper


def init_poison(val_data, n_p, rng, replace_indices=None, train_size=None,
                append=False):
    """Clone n_p validation points (no duplicates), flip their labels.

    Replacement rows come from replace_indices when given, are sampled
    uniformly without duplicates from range(train_size) otherwise, or are
    absent entirely for append-style batches.
    """
    if n_p > len(val_data):
        raise ValueError(f"n_p={n_p} exceeds validation pool {len(val_data)}")
    take = rng.choice_no_replace(len(val_data), n_p)
    X_p = val_data.X[take].copy()
    y_p = 1.0 - val_data.y[take]
    if append:
        indices = None
    elif replace_indices is not None:
        indices = np.asarray(replace_indices, dtype=np.intp)
    else:
        if train_size is None:
            raise ValueError("need train_size to sample replacement rows")
        indices = rng.choice_no_replace(int(train_size), n_p)
    return PoisonBatch(X_p=X_p, y_p=y_p, indices=indices, box=val_data.domain)


def apply_poison(train_data, batch):
    """Training set with the batch written in (replace or append)."""
    if batch.indices is None:
        X = np.vstack([train_data.X, batch.X_p])
        y = np.concatenate([train_data.y, batch.y_p])
        positions = np.arange(len(train_data), len(train_data) + len(batch))
        return models.Dataset(X, y, train_data.domain), positions
    work = train_data.copy()
    work.X[batch.indices] = batch.X_p
    work.y[batch.indices] = batch.y_p
    return work, batch.indices.copy()


def _redraw_poison(state, rng):
    """Fresh flipped clones from the validation pool, labels preserved."""
    val = state.val_pool
    new_x = np.empty_like(state.x_p)
    for label in (0.0, 1.0):
        rows = np.flatnonzero(state.y_p == label)
        if rows.size == 0:
            continue
        pool = np.flatnonzero(val.y != label)   # clones come from the other class
        take = rng.choice_no_replace(pool.size, rows.size)
        new_x[rows] = val.X[pool[take]]
    return new_x


def maybe_restart(state, trace, rng):
    """Re-draw the outer variable when the objective has stalled.

    Poison target: features re-cloned from the validation pool. Lambda
    target: uniform re-sample in [lam - 0.5, lam + 0.5], projected into the
    feasible box. The best-so-far snapshot in state is never touched.
    """
    objs = trace.objectives()
    if not objs:
        return state
    if state.target == "poison":
        best_idx = int(np.argmax(objs))
    else:
        best_idx = int(np.argmin(objs))
    since = len(objs) - 1 - max(best_idx, state.last_restart)
    if since < state.patience:
        return state
    if state.target == "poison":
        state.x_p = _redraw_poison(state, rng)
    else:
        lam = state.hyper.values
        jitter = rng.uniform(size=lam.shape, lo=-0.5, hi=0.5)
        state.hyper = state.hyper.clipped(lam + jitter)
    state.last_restart = len(objs) - 1
    state.restarts += 1
    trace.rows[-1].restarted = True
    return state


def _init_w(spec, rng, tau):
    if spec.kind == "logreg":
        return np.zeros(models.param_count(spec))
    return models.init_params(spec, rng.child(tau))


@dataclass
class AttackResult:
    poison: PoisonBatch
    hyper: models.HyperParams
    trace: AttackTrace


def run_attack(spec, train_data, val_data, cfg, mode, rng, poison=None,
               hyper=None):
    """Optimize one batch of poison points (and optionally lambda).

    mode "fixed-lambda": t_dp ascent steps on X_p, lambda frozen, restarts
    allowed. mode "learn-lambda": t_mul joint iterations, X_p step first,
    then a lambda descent step computed on the updated training set; no
    restarts. Poison labels are never modified; X_p and lambda stay inside
    their boxes after every iteration.
    """
    if mode not in (FIXED_LAMBDA, LEARN_LAMBDA):
        raise ValueError(f"unknown mode {mode!r}")
    n_groups = models.n_lambda_groups(spec)
    if hyper is None:
        hyper = cfg.initial_hyper(n_groups)
    if poison is None:
        poison = init_poison(
            val_data, min(cfg.batch_size, len(val_data)),
            rng.child("init-dp"), train_size=len(train_data),
        )
    x_p = poison.X_p.copy()
    x_p = project_box(x_p, poison.box)
    t_outer = cfg.t_dp if mode == FIXED_LAMBDA else cfg.t_mul

    work, positions = apply_poison(
        train_data, PoisonBatch(x_p, poison.y_p, poison.indices, poison.box)
    )
    trace = AttackTrace()
    state = AttackState(
        target="poison", patience=cfg.patience, x_p=x_p, hyper=hyper,
        val_pool=val_data, y_p=poison.y_p,
    )
    w_rng = rng.child("init-w")
    restart_rng = rng.child("restart")

    for tau in range(t_outer):
        w0 = _init_w(spec, w_rng, tau)
        sweep = hypergrad.rmd_hypergrad(
            spec, work, positions, val_data, state.hyper.values, w0,
            cfg.t_inner, cfg.eta, checkpoint_every=cfg.checkpoint_every,
        )
        state.observe(sweep.val_loss_final, state.x_p, state.hyper)

        g = sweep.d_xp
        g_norm = float(np.linalg.norm(g))
        if g_norm > 0:
            state.x_p = project_box(state.x_p + cfg.alpha * g / g_norm,
                                    poison.box)
        work.X[positions] = state.x_p

        lam_grad_norm = 0.0
        if mode == LEARN_LAMBDA:
            sweep_l = hypergrad.rmd_hypergrad(
                spec, work, positions, val_data, state.hyper.values, w0,
                cfg.t_inner, cfg.eta, checkpoint_every=cfg.checkpoint_every,
            )
            lam_grad_norm = float(np.linalg.norm(sweep_l.d_lambda))
            state.hyper = state.hyper.clipped(
                state.hyper.values - cfg.beta * sweep_l.d_lambda
            )

        trace.append(TraceRow(
            tau=tau,
            val_loss=sweep.val_loss_final,
            lam=state.hyper.values.copy(),
            wnorm2=models.group_norms_sq(spec, sweep.w_final),
            xp_grad_norm=g_norm,
            lam_grad_norm=lam_grad_norm,
        ))

        if mode == FIXED_LAMBDA and cfg.restarts:
            maybe_restart(state, trace, restart_rng)
            work.X[positions] = state.x_p

    x_out, hyper_out = state.x_p, state.hyper
    if state.restarts and state.best_x_p is not None:
        # a late restart may leave the final iterate worse than the best seen
        final_obj = trace.rows[-1].val_loss
        if state.best_obj > final_obj:
            x_out, hyper_out = state.best_x_p, state.best_hyper
    out_batch = PoisonBatch(x_out, poison.y_p.copy(), poison.indices, poison.box)
    return AttackResult(poison=out_batch, hyper=hyper_out, trace=trace)


@dataclass(frozen=True)
class ScheduleEntry:
    fraction: float            # cumulative poisoned fraction once this batch lands
    indices: np.ndarray        # training rows this batch replaces


def cumulative_schedule(train_size, max_fraction, batch, rng):
    """Partition round(max_fraction * train_size) distinct training rows
    into successive batches of `batch` points (last one may be short)."""
    if max_fraction > 1.0 or max_fraction < 0.0:
        raise ValueError("max_fraction outside [0, 1]")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    n_total = int(round(max_fraction * train_size))
    if n_total == 0:
        return []
    master = rng.choice_no_replace(train_size, n_total)
    entries = []
    taken = 0
    while taken < n_total:
        size = min(batch, n_total - taken)
        idx = master[taken:taken + size]
        taken += size
        entries.append(ScheduleEntry(fraction=taken / train_size, indices=idx))
    return entries


@dataclass
class FractionSnapshot:
    fraction: float
    n_poison: int
    poisoned_train: models.Dataset
    hyper: models.HyperParams
    batches: list
    trace: AttackTrace


def run_cumulative(spec, train_data, val_data, cfg, mode, rng, hyper=None):
    """Optimize the whole cumulative schedule; one snapshot per fraction.

    Finished batches are frozen verbatim; lambda carries over across
    batches in learn mode.
    """
    schedule = cumulative_schedule(
        len(train_data), cfg.max_fraction, cfg.batch_size, rng.child("sched")
    )
    if hyper is None:
        hyper = cfg.initial_hyper(models.n_lambda_groups(spec))
    work = train_data.copy()
    snapshots = []
    batches = []
    for bi, entry in enumerate(schedule):
        batch = init_poison(
            val_data, len(entry.indices), rng.child(f"dp-{bi}"),
            replace_indices=entry.indices,
        )
        result = run_attack(
            spec, work, val_data, cfg, mode, rng.child(f"atk-{bi}"),
            poison=batch, hyper=hyper,
        )
        work, _ = apply_poison(work, result.poison)   # freeze this batch
        hyper = result.hyper
        batches.append(result.poison)
        snapshots.append(FractionSnapshot(
            fraction=entry.fraction,
            n_poison=sum(len(b) for b in batches),
            poisoned_train=work.copy(),
            hyper=hyper,
            batches=list(batches),
            trace=result.trace,
        ))
    return snapshots
