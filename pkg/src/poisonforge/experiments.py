"""Experiment orchestration: the (lambda-mode x poison-fraction x repetition)
matrix, attack evaluation by mini-batch SGD retraining, CSV emission, poison
caching, histogram and image exports, and the synthetic colormap grids.

All CSV files start with a `# schema: poisonforge.<kind> v1 ...` comment so
downstream consumers can validate compatibility before parsing.
"""

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import data as data_mod
from . import hypergrad, hyperopt, models
from .attack import FIXED_LAMBDA, LEARN_LAMBDA, AttackConfig, PoisonBatch
from .linalg import RngStream

SCHEMA_PREFIX = "# schema: poisonforge"
CACHE_ENV = "POISONFORGE_CACHE"


class ConfigError(ValueError):
    """Bad or missing experiment configuration."""


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class EvalSettings:
    eta_tr: float
    batch: int
    epochs: int

    def __post_init__(self):
        if self.eta_tr <= 0 or self.batch < 1 or self.epochs < 1:
            raise ConfigError("bad eval settings")


@dataclass(frozen=True)
class ModeSpec:
    name: str
    kind: str                  # fixed | cv | learn
    lam: float | None = None   # fixed modes only
    grid_lo: float = -8.0
    grid_hi: float = 1.0
    grid_n: int = 10
    folds: int = 5

    def __post_init__(self):
        if self.kind not in ("fixed", "cv", "learn"):
            raise ConfigError(f"unknown mode kind {self.kind!r}")
        if self.kind == "fixed" and self.lam is None:
            raise ConfigError(f"mode {self.name}: fixed mode needs lam")


@dataclass(frozen=True)
class GridSettings:
    """Synthetic colormap settings: validation-error and learned-lambda maps
    over a lattice of single-poison-point locations."""

    resolution: int = 25
    lam_small: float = -8.0
    lam_reg: float = float(np.log(20.0))
    lambda_lo: float = -8.0
    lambda_hi: float = 6.0
    lambda_n: int = 29


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: data_mod.DatasetManifest
    model_kind: str
    hidden: tuple
    negative_slope: float
    attack: AttackConfig
    eval: EvalSettings
    modes: tuple
    repetitions: int = 3
    seed: int = 0
    out_dir: str = "runs"
    cache_dir: str | None = None
    long_running: bool = False
    grid: GridSettings | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.modes:
            raise ConfigError("need at least one lambda mode")
        for m in self.modes:
            if m.kind == "fixed" and not (
                    self.attack.lam_lo <= m.lam <= self.attack.lam_hi):
                raise ConfigError(
                    f"mode {m.name}: lam {m.lam} outside the feasible box "
                    f"[{self.attack.lam_lo}, {self.attack.lam_hi}]"
                )

    def model_spec(self, n_features):
        if self.model_kind == "logreg":
            return models.ModelSpec.logreg(n_features)
        return models.ModelSpec.mlp(
            (n_features, *self.hidden, 1), self.negative_slope
        )


def config_from_dict(doc):
    try:
        ds = doc["dataset"]
        manifest = data_mod.DatasetManifest(
            source=ds["source"],
            n_train=ds["n_train"],
            n_val=ds["n_val"],
            n_test=ds.get("n_test"),
            seed=ds.get("seed", 0),
            class_a=ds.get("class_a", 0),
            class_b=ds.get("class_b", 1),
            normalization=ds.get("normalization", "none"),
            paths=tuple(ds.get("paths", ())),
        )
        model = doc.get("model", {"kind": "logreg"})
        atk = AttackConfig(**doc.get("attack", {}))
        ev = EvalSettings(**doc["eval"])
        modes = tuple(ModeSpec(**m) for m in doc["modes"])
        grid = GridSettings(**doc["grid"]) if doc.get("grid") else None
        return ExperimentConfig(
            name=doc["name"],
            dataset=manifest,
            model_kind=model.get("kind", "logreg"),
            hidden=tuple(model.get("hidden", ())),
            negative_slope=model.get("negative_slope", 0.1),
            attack=atk,
            eval=ev,
            modes=modes,
            repetitions=doc.get("repetitions", 3),
            seed=doc.get("seed", 0),
            out_dir=doc.get("out_dir", "runs"),
            cache_dir=doc.get("cache_dir"),
            long_running=doc.get("long_running", False),
            grid=grid,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid experiment config: {exc}") from exc


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


# ------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    test_error: float
    fpr: float
    fnr: float
    tp: int
    fp: int
    tn: int
    fn: int
    w: np.ndarray


def sgd_train(spec, train_data, lam, eta_tr, batch, epochs, rng):
    """Mini-batch SGD with a seeded reshuffle each epoch."""
    lam = np.asarray(lam, dtype=np.float64)
    w = models.init_params(spec, rng.child("init"))
    n = len(train_data)
    order = np.arange(n)
    shuffle_rng = rng.child("shuffle")
    for epoch in range(epochs):
        shuffle_rng.shuffle(order)
        for s in range(0, n, batch):
            take = order[s:s + batch]
            part = models.Dataset(
                train_data.X[take], train_data.y[take], train_data.domain
            )
            w = w - eta_tr * models.grad_w(spec, part, w, lam)
            if not np.all(np.isfinite(w)):
                raise hypergrad.DivergenceError(epoch)
    return w


def confusion(spec, data, w, threshold=0.5):
    pred = models.predict_proba(spec, data.X, w) >= threshold
    actual = data.y == 1.0
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    tn = int(np.sum(~pred & ~actual))
    fn = int(np.sum(~pred & actual))
    return tp, fp, tn, fn


def evaluate(spec, train_data, test_data, lam, eta_tr, batch, epochs, rng,
             threshold=0.5):
    """Retrain on (possibly poisoned) data, score 0/1 error, FPR, FNR."""
    w = sgd_train(spec, train_data, lam, eta_tr, batch, epochs, rng)
    tp, fp, tn, fn = confusion(spec, test_data, w, threshold)
    total = tp + fp + tn + fn
    return EvalResult(
        test_error=(fp + fn) / total if total else 0.0,
        fpr=fp / (fp + tn) if (fp + tn) else 0.0,
        fnr=fn / (fn + tp) if (fn + tp) else 0.0,
        tp=tp, fp=fp, tn=tn, fn=fn, w=w,
    )


# ------------------------------------------------------------- CSV output

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, kind, columns, rows, extra=""):
    header = f"{SCHEMA_PREFIX}.{kind} v1"
    if extra:
        header += f" {extra}"
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


@dataclass
class MetricsRow:
    rep: int
    seed: int
    mode: str
    fraction: float
    n_poison: int
    test_error: float
    fpr: float
    fnr: float
    tp: int
    fp: int
    tn: int
    fn: int
    val_error: float
    wnorm2: float
    lam: np.ndarray           # per group
    wnorm2n: np.ndarray       # per group, normalized by group size

    def __post_init__(self):
        for name in ("test_error", "fpr", "fnr", "val_error"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def metrics_columns(n_groups):
    cols = ["rep", "seed", "mode", "fraction", "n_poison", "test_error",
            "fpr", "fnr", "tp", "fp", "tn", "fn", "val_error", "wnorm2"]
    cols += [f"lambda_{g}" for g in range(n_groups)]
    cols += [f"wnorm2n_{g}" for g in range(n_groups)]
    return cols


def metrics_row_values(r):
    return [r.rep, r.seed, r.mode, r.fraction, r.n_poison, r.test_error,
            r.fpr, r.fnr, r.tp, r.fp, r.tn, r.fn, r.val_error, r.wnorm2,
            *r.lam, *r.wnorm2n]


def aggregate_rows(rows, n_groups):
    """Mean and standard error per (mode, fraction) cell."""
    cells = {}
    for r in rows:
        cells.setdefault((r.mode, r.fraction), []).append(r)
    out = []
    for (mode, fraction), group in sorted(
            cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        def stats(get):
            vals = np.array([get(r) for r in group], dtype=np.float64)
            mean = float(vals.mean())
            se = float(vals.std(ddof=1) / np.sqrt(len(vals))) \
                if len(vals) > 1 else 0.0
            return mean, se
        row = [mode, fraction, len(group)]
        for get in (lambda r: r.test_error, lambda r: r.fpr,
                    lambda r: r.fnr, lambda r: r.val_error,
                    lambda r: r.wnorm2):
            row.extend(stats(get))
        for g in range(n_groups):
            row.extend(stats(lambda r, g=g: r.lam[g]))
        for g in range(n_groups):
            row.extend(stats(lambda r, g=g: r.wnorm2n[g]))
        out.append(row)
    return out


def aggregate_columns(n_groups):
    cols = ["mode", "fraction", "n_reps"]
    for base in ("test_error", "fpr", "fnr", "val_error", "wnorm2"):
        cols += [f"{base}_mean", f"{base}_stderr"]
    for g in range(n_groups):
        cols += [f"lambda_{g}_mean", f"lambda_{g}_stderr"]
    for g in range(n_groups):
        cols += [f"wnorm2n_{g}_mean", f"wnorm2n_{g}_stderr"]
    return cols


def trace_columns(n_groups):
    cols = ["batch", "fraction", "tau", "val_loss", "xp_grad_norm",
            "lam_grad_norm", "restarted"]
    cols += [f"lambda_{g}" for g in range(n_groups)]
    cols += [f"wnorm2_{g}" for g in range(n_groups)]
    return cols


def trace_table(snapshots):
    """Flatten per-batch traces into one numeric table."""
    rows = []
    for bi, snap in enumerate(snapshots):
        for tr in snap.trace.rows:
            rows.append([bi, snap.fraction, tr.tau, tr.val_loss,
                         tr.xp_grad_norm, tr.lam_grad_norm,
                         float(tr.restarted), *tr.lam, *tr.wnorm2])
    return np.array(rows, dtype=np.float64) if rows else np.empty((0, 0))


# ---------------------------------------------------------------- exports

def emit_histograms(spec, w, bins, path):
    """Per lambda-group relative-frequency histogram CSV."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    rows = []
    for g, sl in enumerate(models.lambda_groups(spec)):
        values = w[sl]
        counts, edges = np.histogram(values, bins=bins)
        freq = counts / counts.sum() if counts.sum() else counts.astype(float)
        for b in range(bins):
            rows.append([g, edges[b], edges[b + 1], freq[b]])
    write_csv(path, "hist", ["group", "bin_lo", "bin_hi", "freq"], rows)
    return path


def export_poison_images(X_p, height, width, out_dir, prefix="poison"):
    """One binary PGM (P5, maxval 255) per poison point."""
    X_p = np.asarray(X_p, dtype=np.float64)
    if X_p.ndim != 2 or X_p.shape[1] != height * width:
        raise ValueError(
            f"poison features {X_p.shape} do not fill {height}x{width} images"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, row in enumerate(X_p):
        pixels = np.rint(255.0 * np.clip(row, 0.0, 1.0)).astype(np.uint8)
        p = out_dir / f"{prefix}_{i:03d}.pgm"
        with open(p, "wb") as f:
            f.write(f"P5\n{width} {height}\n255\n".encode())
            f.write(pixels.tobytes())
        paths.append(p)
    return paths


def read_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        width, height = (int(v) for v in f.readline().split())
        maxval = int(f.readline())
        payload = f.read(width * height)
    if maxval != 255 or len(payload) != width * height:
        raise ValueError(f"{path}: unsupported or truncated PGM")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


# ------------------------------------------------------------------ cache

def cache_root(cfg):
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    if cfg.cache_dir:
        return Path(cfg.cache_dir)
    return Path(cfg.out_dir) / "cache"


def _dataset_fingerprint(manifest):
    """Manifest fields with source files identified by content, not path."""
    doc = json.loads(manifest.to_json())
    hashes = []
    for p in doc.pop("paths", ()):
        digest = hashlib.sha256()
        with open(p, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        hashes.append(digest.hexdigest()[:16])
    doc["content"] = hashes
    return doc


def _cache_key(cfg, mode, rep_seed, lam_fixed):
    payload = {
        "v": 1,
        "dataset": _dataset_fingerprint(cfg.dataset),
        "model": [cfg.model_kind, list(cfg.hidden), cfg.negative_slope],
        "attack": {k: getattr(cfg.attack, k) for k in (
            "t_dp", "t_lambda", "t_mul", "t_inner", "eta", "alpha", "beta",
            "batch_size", "max_fraction", "lam_lo", "lam_hi", "lam_init",
            "patience", "restarts", "checkpoint_every")},
        "mode": [mode.name, mode.kind, lam_fixed],
        "rep_seed": rep_seed,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _save_poison_cache(path, snapshots, hyper0):
    sizes = np.array([len(s.batches[-1]) for s in snapshots], dtype=np.int64)
    np.savez_compressed(
        path,
        fractions=np.array([s.fraction for s in snapshots]),
        n_poison=np.array([s.n_poison for s in snapshots], dtype=np.int64),
        batch_sizes=sizes,
        xp=np.vstack([s.batches[-1].X_p for s in snapshots]),
        yp=np.concatenate([s.batches[-1].y_p for s in snapshots]),
        indices=np.concatenate([s.batches[-1].indices for s in snapshots]),
        lam=np.vstack([s.hyper.values for s in snapshots]),
        hyper0=hyper0,
        trace=trace_table(snapshots),
    )


def _load_poison_cache(path, train_data, cfg):
    z = np.load(path)
    box = train_data.domain
    snapshots = []
    batches = []
    work = train_data.copy()
    offset = 0
    lam_box = cfg.attack.lam_box
    trace_all = z["trace"]
    for i, size in enumerate(z["batch_sizes"]):
        size = int(size)
        batch = PoisonBatch(
            X_p=z["xp"][offset:offset + size],
            y_p=z["yp"][offset:offset + size],
            indices=z["indices"][offset:offset + size],
            box=box,
        )
        offset += size
        work, _ = attack_mod.apply_poison(work, batch)
        batches.append(batch)
        trace = attack_mod.AttackTrace()
        if trace_all.size:
            for row in trace_all[trace_all[:, 0] == i]:
                n_groups = (row.size - 7) // 2
                trace.rows.append(attack_mod.TraceRow(
                    tau=int(row[2]), val_loss=row[3], lam=row[7:7 + n_groups],
                    wnorm2=row[7 + n_groups:7 + 2 * n_groups],
                    xp_grad_norm=row[4], lam_grad_norm=row[5],
                    restarted=bool(row[6]),
                ))
        snapshots.append(attack_mod.FractionSnapshot(
            fraction=float(z["fractions"][i]),
            n_poison=int(z["n_poison"][i]),
            poisoned_train=work.copy(),
            hyper=models.HyperParams(z["lam"][i], lam_box),
            batches=list(batches),
            trace=trace,
        ))
    return snapshots, z["hyper0"]


# ------------------------------------------------------------ matrix cells

def _rep_seed(cfg, rep):
    return (cfg.seed * 1_000_003 + rep) & 0x7FFFFFFF


def run_cell(cfg, rep, mode):
    """One (repetition x lambda-mode) cell: attack schedule + evaluations.

    Returns (metrics rows, snapshots, lambda at zero poisoning).
    """
    rep_seed = _rep_seed(cfg, rep)
    train, val, test = data_mod.build_datasets(cfg.dataset, seed=rep_seed)
    spec = cfg.model_spec(train.n_features)
    n_groups = models.n_lambda_groups(spec)
    rng = RngStream(rep_seed).child(f"mode-{mode.name}")
    atk = cfg.attack

    lam_fixed = None
    if mode.kind == "fixed":
        lam_fixed = float(mode.lam)
    elif mode.kind == "cv":
        grid = hyperopt.LambdaGrid(
            tuple(np.linspace(mode.grid_lo, mode.grid_hi, mode.grid_n)),
            k=mode.folds, seed=rep_seed,
        )
        lam_fixed, _ = hyperopt.cv_grid_lambda(
            spec, train, grid, atk.t_inner, atk.eta, rng=rng.child("cv"),
        )

    key = _cache_key(cfg, mode, rep_seed, lam_fixed)
    cache_path = cache_root(cfg) / f"poison_{key}.npz"

    if mode.kind == "learn":
        run_mode = LEARN_LAMBDA
    else:
        run_mode = FIXED_LAMBDA

    if cache_path.exists():
        snapshots, hyper0_values = _load_poison_cache(cache_path, train, cfg)
        hyper0 = models.HyperParams(hyper0_values, atk.lam_box)
    else:
        if mode.kind == "learn":
            hyper0, _ = hyperopt.learn_lambda_rmd(
                spec, train, val, atk.lam_init, atk.t_lambda, atk.beta,
                atk.t_inner, atk.eta, lam_box=atk.lam_box,
                rng=rng.child("lam0"), patience=atk.patience,
                restarts=atk.restarts, checkpoint_every=atk.checkpoint_every,
            )
        else:
            hyper0 = models.HyperParams(
                np.full(n_groups, lam_fixed), atk.lam_box
            )
        snapshots = attack_mod.run_cumulative(
            spec, train, val, atk, run_mode, rng.child("attack"), hyper=hyper0,
        )
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        if snapshots:
            _save_poison_cache(cache_path, snapshots, hyper0.values)

    rows = []

    def eval_at(fraction, n_poison, dataset, hyper):
        ev_rng = RngStream(rep_seed).child(f"eval-{mode.name}-{n_poison}")
        res = evaluate(spec, dataset, test, hyper.values, cfg.eval.eta_tr,
                       cfg.eval.batch, cfg.eval.epochs, ev_rng)
        val_err = models.zero_one_error(spec, val, res.w)
        norms = models.group_norms_sq(spec, res.w)
        rows.append(MetricsRow(
            rep=rep, seed=rep_seed, mode=mode.name, fraction=fraction,
            n_poison=n_poison, test_error=res.test_error, fpr=res.fpr,
            fnr=res.fnr, tp=res.tp, fp=res.fp, tn=res.tn, fn=res.fn,
            val_error=val_err, wnorm2=float(norms.sum()), lam=hyper.values,
            wnorm2n=norms / models.group_sizes(spec),
        ))

    eval_at(0.0, 0, train, hyper0)
    for snap in snapshots:
        eval_at(snap.fraction, snap.n_poison, snap.poisoned_train, snap.hyper)
    return rows, snapshots, hyper0


def _cell_worker(args):
    cfg_doc, rep, mode_index = args
    cfg = config_from_dict(cfg_doc)
    mode = cfg.modes[mode_index]
    try:
        rows, snapshots, _ = run_cell(cfg, rep, mode)
        return rep, mode_index, rows, trace_table(snapshots), None
    except Exception as exc:        # isolate cell failures
        return rep, mode_index, [], None, f"{type(exc).__name__}: {exc}"


def run_matrix(cfg, cfg_doc=None, parallel=1):
    """The whole experiment matrix; returns a summary dict.

    Writes metrics.csv, aggregate.csv, one trace CSV per (mode, rep), and
    failures.csv when any cell failed. Rows are sorted before writing, so
    the output is byte-identical for a given config regardless of
    scheduling.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg_doc is None:
        cfg_doc = _config_to_doc(cfg)

    jobs = [(cfg_doc, rep, mi)
            for rep in range(cfg.repetitions)
            for mi in range(len(cfg.modes))]
    results = []
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_cell_worker, jobs))
    else:
        results = [_cell_worker(j) for j in jobs]

    # model spec is dataset-dependent; probe once for the group count
    train, _, _ = data_mod.build_datasets(cfg.dataset, seed=_rep_seed(cfg, 0))
    n_groups = models.n_lambda_groups(cfg.model_spec(train.n_features))

    all_rows = []
    failures = []
    mode_order = {m.name: i for i, m in enumerate(cfg.modes)}
    for rep, mi, rows, trace, err in results:
        mode = cfg.modes[mi]
        if err is not None:
            failures.append([rep, mode.name, err])
            continue
        all_rows.extend(rows)
        if trace is not None and trace.size:
            write_csv(
                out / f"trace_{cfg.name}_{mode.name}_rep{rep}.csv",
                "trace", trace_columns(n_groups), trace.tolist(),
                extra=f"groups={n_groups}",
            )

    all_rows.sort(key=lambda r: (mode_order[r.mode], r.rep, r.fraction))
    write_csv(out / "metrics.csv", "metrics", metrics_columns(n_groups),
              [metrics_row_values(r) for r in all_rows],
              extra=f"groups={n_groups}")
    write_csv(out / "aggregate.csv", "aggregate", aggregate_columns(n_groups),
              aggregate_rows(all_rows, n_groups),
              extra=f"groups={n_groups}")
    if failures:
        write_csv(out / "failures.csv", "failures", ["rep", "mode", "error"],
                  failures)

    if cfg.grid is not None:
        run_synthetic_grid(cfg, out)

    return {
        "name": cfg.name,
        "rows": len(all_rows),
        "failures": len(failures),
        "out_dir": str(out),
    }


def _config_to_doc(cfg):
    return {
        "name": cfg.name,
        "dataset": json.loads(cfg.dataset.to_json()),
        "model": {"kind": cfg.model_kind, "hidden": list(cfg.hidden),
                  "negative_slope": cfg.negative_slope},
        "attack": {k: getattr(cfg.attack, k) for k in (
            "t_dp", "t_lambda", "t_mul", "t_inner", "eta", "alpha", "beta",
            "batch_size", "max_fraction", "lam_lo", "lam_hi", "lam_init",
            "patience", "restarts", "checkpoint_every")},
        "eval": {"eta_tr": cfg.eval.eta_tr, "batch": cfg.eval.batch,
                 "epochs": cfg.eval.epochs},
        "modes": [{k: v for k, v in (
            ("name", m.name), ("kind", m.kind), ("lam", m.lam),
            ("grid_lo", m.grid_lo), ("grid_hi", m.grid_hi),
            ("grid_n", m.grid_n), ("folds", m.folds)) if v is not None}
            for m in cfg.modes],
        "repetitions": cfg.repetitions,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "cache_dir": cfg.cache_dir,
        "long_running": cfg.long_running,
        "grid": None if cfg.grid is None else {
            "resolution": cfg.grid.resolution,
            "lam_small": cfg.grid.lam_small,
            "lam_reg": cfg.grid.lam_reg,
            "lambda_lo": cfg.grid.lambda_lo,
            "lambda_hi": cfg.grid.lambda_hi,
            "lambda_n": cfg.grid.lambda_n,
        },
    }


# -------------------------------------------------- synthetic colormaps

def _append_point(train, point, label):
    X = np.vstack([train.X, point[None, :]])
    y = np.concatenate([train.y, [label]])
    return models.Dataset(X, y, train.domain)


def run_synthetic_grid(cfg, out_dir):
    """Validation-error maps (with and without regularization) and the
    learned-lambda map over a lattice of single poison locations, plus the
    scatter points and decision boundaries of the worst single-point attack.
    """
    if cfg.dataset.source != "synthetic":
        raise ConfigError("grid profile needs the synthetic dataset")
    grid = cfg.grid
    seed = _rep_seed(cfg, 0)
    train, val, _ = data_mod.build_datasets(cfg.dataset, seed=seed)
    spec = cfg.model_spec(train.n_features)
    rng = RngStream(seed).child("grid")
    ev = cfg.eval

    lam_values = np.linspace(grid.lambda_lo, grid.lambda_hi, grid.lambda_n)
    axis = np.linspace(*data_mod.SYNTH_BOX, grid.resolution)

    def train_error(dataset, lam_scalar, tag):
        try:
            with np.errstate(over="ignore"):
                w = sgd_train(spec, dataset, np.array([lam_scalar]),
                              ev.eta_tr, ev.batch, ev.epochs, rng.child(tag))
        except hypergrad.DivergenceError:
            # unstable (eta, lambda) pairing at the sweep's edge: worst score
            return 1.0, np.zeros(models.param_count(spec))
        return models.zero_one_error(spec, val, w), w

    err_small = np.empty((grid.resolution, grid.resolution))
    err_reg = np.empty_like(err_small)
    lam_map = np.empty_like(err_small)
    # poison label: flipped clone of a class-0 point
    poison_label = 1.0
    for iy, py in enumerate(axis):
        for ix, px in enumerate(axis):
            poisoned = _append_point(train, np.array([px, py]), poison_label)
            err_small[iy, ix], _ = train_error(
                poisoned, grid.lam_small, f"s-{ix}-{iy}")
            err_reg[iy, ix], _ = train_error(
                poisoned, grid.lam_reg, f"r-{ix}-{iy}")
            best_err, best_lam = np.inf, lam_values[0]
            for lv in lam_values:
                e, _ = train_error(poisoned, lv, f"l-{ix}-{iy}-{lv:.3f}")
                if e < best_err or (e == best_err and lv > best_lam):
                    best_err, best_lam = e, lv
            lam_map[iy, ix] = best_lam

    def dump_grid(name, Z):
        rows = [[axis[ix], axis[iy], Z[iy, ix]]
                for iy in range(grid.resolution)
                for ix in range(grid.resolution)]
        write_csv(Path(out_dir) / name, "grid", ["x", "y", "value"], rows)

    dump_grid("grid_error_noreg.csv", err_small)
    dump_grid("grid_error_reg.csv", err_reg)
    dump_grid("grid_lambda.csv", lam_map)

    # worst single poison point, found by the attack itself, for both lambdas
    boundaries = []
    points = [[x, y, int(lbl), "train"] for (x, y), lbl in zip(train.X, train.y)]
    points += [[x, y, int(lbl), "val"] for (x, y), lbl in zip(val.X, val.y)]
    for tag, lam_scalar in (("noreg", grid.lam_small), ("reg", grid.lam_reg)):
        _, w_clean = train_error(train, lam_scalar, f"clean-{tag}")
        boundaries.append([f"clean_{tag}", w_clean[0], w_clean[1], w_clean[2]])
        batch = attack_mod.init_poison(val, 1, rng.child(f"init-{tag}"),
                                       append=True)
        atk_cfg = cfg.attack
        hyper = models.HyperParams(np.array([lam_scalar]), atk_cfg.lam_box)
        result = attack_mod.run_attack(
            spec, train, val, atk_cfg, FIXED_LAMBDA,
            rng.child(f"attack-{tag}"), poison=batch, hyper=hyper,
        )
        poisoned, _ = attack_mod.apply_poison(train, result.poison)
        _, w_pois = train_error(poisoned, lam_scalar, f"pois-{tag}")
        boundaries.append([f"poisoned_{tag}", w_pois[0], w_pois[1], w_pois[2]])
        x, y = result.poison.X_p[0]
        points.append([x, y, int(result.poison.y_p[0]), f"poison_{tag}"])

    write_csv(Path(out_dir) / "grid_points.csv", "points",
              ["x", "y", "label", "role"], points)
    write_csv(Path(out_dir) / "grid_boundaries.csv", "boundaries",
              ["case", "w1", "w2", "b"], boundaries)
