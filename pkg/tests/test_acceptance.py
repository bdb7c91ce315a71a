"""Acceptance criteria, one test per criterion, each printing a PASS line.

The image-task criteria (A5, A6) run the full experiment matrix at the
shipped profile; poison sets are cached under the profile's cache directory,
so re-runs are cheap. Point POISONFORGE_MNIST_DIR at a directory holding the
four original MNIST IDX files to run them on MNIST itself; otherwise the
bundled handwritten-digit stand-in task is generated and used.
POISONFORGE_LONG_RUNNING=1 enables the hours-long deep-net profile (A8).
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from poisonforge import attack, data, experiments as exp, hypergrad, models
from poisonforge.cli import cli_main
from poisonforge.linalg import BoxDomain, RngStream

from conftest import fd_grad, rel_err

REPO = Path(__file__).resolve().parent.parent
IMG_CONFIG = REPO / "configs" / "imgtask_lr.json"


def report(criterion, ok, detail):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{criterion}: {detail}"


# --------------------------------------------------------------------- A1

def _kink_safe(spec, datasets, w, margin=1e-4):
    if spec.kind == "logreg":
        return True
    for ds in datasets:
        zs, _ = models._forward(spec, ds.X, w)
        if any(np.min(np.abs(z)) < margin for z in zs[:-1]):
            return False
    return True


def _a1_fixture(spec, seed):
    rng = RngStream(seed)
    m = spec.n_features
    n = 10
    X = rng.standard_normal((n, m))
    y = (rng.uniform(n) > 0.5).astype(float)
    ds = models.Dataset(X, y, BoxDomain.cube(-10, 10))
    w = rng.standard_normal(models.param_count(spec)) * 0.6
    v = rng.standard_normal(models.param_count(spec))
    lam = rng.uniform(models.n_lambda_groups(spec), lo=-1.5, hi=1.0)
    return ds, w, v, lam


def test_a1_derivative_correctness():
    worst = 0.0
    for kind in ("logreg", "mlp"):
        done = 0
        seed = 0
        while done < 10:
            seed += 1
            if kind == "logreg":
                m = 3 + (seed % 18)     # m <= 20
                spec = models.ModelSpec.logreg(m)
            else:
                spec = models.ModelSpec.mlp((8, 4, 2, 1))
            ds, w, v, lam = _a1_fixture(spec, 1000 * (kind == "mlp") + seed)
            if not _kink_safe(spec, [ds], w):
                continue
            done += 1
            h = 1e-5

            g = models.grad_w(spec, ds, w, lam)
            g_fd = fd_grad(lambda u: models.train_loss(spec, ds, u, lam), w,
                           h=1e-6)
            worst = max(worst, rel_err(g, g_fd))

            gv = models.grad_w_val(spec, ds, w)
            gv_fd = fd_grad(lambda u: models.val_loss(spec, ds, u), w, h=1e-6)
            worst = max(worst, rel_err(gv, gv_fd))

            hw = models.hvp_ww(spec, ds, w, lam, v)
            hw_fd = (models.grad_w(spec, ds, w + h * v, lam)
                     - models.grad_w(spec, ds, w - h * v, lam)) / (2 * h)
            worst = max(worst, rel_err(hw, hw_fd))

            P = np.array([1, 4])
            hx = models.hvp_xp_w(spec, ds, P, w, lam, v)
            hx_fd = np.zeros_like(hx)
            for r, pi in enumerate(P):
                for j in range(ds.n_features):
                    Xp, Xm = ds.X.copy(), ds.X.copy()
                    Xp[pi, j] += h
                    Xm[pi, j] -= h
                    dp = models.Dataset(Xp, ds.y, ds.domain)
                    dm = models.Dataset(Xm, ds.y, ds.domain)
                    hx_fd[r, j] = (models.grad_w(spec, dp, w, lam)
                                   - models.grad_w(spec, dm, w, lam)) @ v \
                        / (2 * h)
            worst = max(worst, rel_err(hx, hx_fd))

            hl = models.hvp_lambda_w(spec, ds, w, lam, v)
            hl_fd = np.zeros_like(hl)
            for gidx in range(lam.size):
                lp, lm = lam.copy(), lam.copy()
                lp[gidx] += 1e-6
                lm[gidx] -= 1e-6
                hl_fd[gidx] = (models.grad_w(spec, ds, w, lp)
                               - models.grad_w(spec, ds, w, lm)) @ v / 2e-6
            worst = max(worst, rel_err(hl, hl_fd))

            closed = np.array([
                np.exp(lam[g2]) * w[sl] @ v[sl]
                for g2, sl in enumerate(models.lambda_groups(spec))])
            assert np.allclose(hl, closed, atol=1e-12, rtol=0)

    report("A1", worst < 1e-4, f"worst relative error {worst:.2e} < 1e-4")


# --------------------------------------------------------------------- A2

def test_a2_unrolled_oracle():
    from poisonforge.linalg import BoxDomain
    rng = RngStream(11)
    spec = models.ModelSpec.logreg(2)
    dom = BoxDomain.cube(-10, 10)
    X = rng.standard_normal((4, 2))
    y = np.array([0.0, 1.0, 0.0, 1.0])
    ds = models.Dataset(X, y, dom)
    val = models.Dataset(rng.standard_normal((6, 2)),
                         (rng.uniform(6) > 0.5).astype(float), dom)
    w0 = rng.standard_normal(3) * 0.5
    lam = np.array([0.2])
    T, eta = 3, 0.3
    P = np.array([1])
    hg = hypergrad.rmd_hypergrad(spec, ds, P, val, lam, w0, T, eta)

    def composite(xp):
        Xc = X.copy()
        Xc[1] = xp
        traj = hypergrad.inner_train(spec, models.Dataset(Xc, y, dom), lam,
                                     w0, T, eta)
        return models.val_loss(spec, val, traj.final)

    h = 1e-6
    fd = np.zeros(2)
    for j in range(2):
        xp, xm = X[1].copy(), X[1].copy()
        xp[j] += h
        xm[j] -= h
        fd[j] = (composite(xp) - composite(xm)) / (2 * h)
    err = rel_err(hg.d_xp[0], fd)
    report("A2", err < 1e-4, f"relative error {err:.2e} < 1e-4")


# --------------------------------------------------------------------- A3

def test_a3_cross_method_agreement():
    from poisonforge.linalg import BoxDomain
    rng = RngStream(21)
    spec = models.ModelSpec.logreg(2)
    dom = BoxDomain.cube(-10, 10)
    ds = models.Dataset(rng.standard_normal((4, 2)),
                        np.array([0.0, 1.0, 0.0, 1.0]), dom)
    val = models.Dataset(rng.standard_normal((6, 2)),
                         (rng.uniform(6) > 0.5).astype(float), dom)
    lam = np.array([-0.7])
    T, eta = 4000, 0.5
    traj = hypergrad.inner_train(spec, ds, lam, np.zeros(3), T, eta)
    g_norm = float(np.linalg.norm(models.grad_w(spec, ds, traj.final, lam)))
    assert g_norm <= 1e-8, f"inner problem not converged: {g_norm:.2e}"
    P = np.array([1])
    hg_r = hypergrad.rmd_hypergrad(spec, ds, P, val, lam, np.zeros(3), T, eta)
    hg_i = hypergrad.implicit_hypergrad(spec, ds, P, val, lam, traj.final,
                                        stationarity_tol=1e-8)
    a, b = hg_r.d_xp.ravel(), hg_i.d_xp.ravel()
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    gap_x = abs(np.linalg.norm(a) - np.linalg.norm(b)) / np.linalg.norm(b)
    la, lb = hg_r.d_lambda, hg_i.d_lambda
    cos_l = float(la @ lb / (np.linalg.norm(la) * np.linalg.norm(lb)))
    gap_l = abs(np.linalg.norm(la) - np.linalg.norm(lb)) / np.linalg.norm(lb)
    ok = cos >= 0.99 and gap_x <= 0.05 and cos_l >= 0.99 and gap_l <= 0.05
    report("A3", ok,
           f"d_xp cos {cos:.6f} gap {gap_x:.2e}; "
           f"d_lam cos {cos_l:.6f} gap {gap_l:.2e}")


# --------------------------------------------------------------------- A4

def test_a4_synthetic_single_point():
    spec = models.ModelSpec.logreg(2)
    train, val = data.gen_synthetic(16, 32, RngStream(32))
    # coefficient 20 on the summed objective, in mean-objective units
    lam_reg = float(np.log(20.0 / 32.0))
    cfg = attack.AttackConfig(t_dp=50, t_inner=500, eta=0.2, alpha=0.4,
                              lam_lo=-8.0, lam_hi=3.0)

    def val_err(dataset, lam):
        w = exp.sgd_train(spec, dataset, np.array([lam]), 0.2, 64, 100,
                          RngStream(1))
        return models.zero_one_error(spec, val, w)

    deltas = {}
    for tag, lam in (("noreg", -8.0), ("reg", lam_reg)):
        clean = val_err(train, lam)
        rng = RngStream(1000)
        batch = attack.init_poison(val, 1, rng.child("init"), append=True)
        hyper = models.HyperParams(np.array([lam]), cfg.lam_box)
        res = attack.run_attack(spec, train, val, cfg, attack.FIXED_LAMBDA,
                                rng.child("atk"), poison=batch, hyper=hyper)
        poisoned, _ = attack.apply_poison(train, res.poison)
        deltas[tag] = val_err(poisoned, lam) - clean
    ok = deltas["noreg"] >= 0.10 and deltas["reg"] <= 0.03
    report("A4", ok,
           f"unregularized +{deltas['noreg']*100:.1f}pp (>=10), "
           f"regularized +{deltas['reg']*100:.1f}pp (<=3)")


# ---------------------------------------------------------------- A5 / A6

@pytest.fixture(scope="module")
def image_matrix():
    """Aggregate rows of the image-task matrix (MNIST when provided)."""
    cfg_doc = json.loads(IMG_CONFIG.read_text())
    mnist_dir = os.environ.get("POISONFORGE_MNIST_DIR")
    if mnist_dir:
        md = Path(mnist_dir)
        cfg_doc["name"] = "mnist_lr"
        cfg_doc["dataset"]["paths"] = [
            str(md / "train-images-idx3-ubyte"),
            str(md / "train-labels-idx1-ubyte"),
            str(md / "t10k-images-idx3-ubyte"),
            str(md / "t10k-labels-idx1-ubyte"),
        ]
        cfg_doc["dataset"]["class_b"] = 8
        cfg_doc["out_dir"] = str(REPO / "runs" / "mnist_lr")
        source = "MNIST"
    else:
        first = cfg_doc["dataset"]["paths"][0]
        if not (REPO / first).exists():
            rc = cli_main(["synth-data", "--kind", "images", "--seed", "0",
                           "--out", str(REPO / "data" / "idx")])
            assert rc == 0
        cfg_doc["dataset"]["paths"] = [str(REPO / p)
                                       for p in cfg_doc["dataset"]["paths"]]
        cfg_doc["out_dir"] = str(REPO / cfg_doc["out_dir"])
        source = "digit stand-in"
    cfg = exp.config_from_dict(cfg_doc)
    summary = exp.run_matrix(cfg, cfg_doc=cfg_doc, parallel=2)
    assert summary["failures"] == 0
    agg_path = Path(cfg.out_dir) / "aggregate.csv"
    with open(agg_path) as f:
        header = f.readline()
        assert header.startswith("# schema: poisonforge.aggregate v1")
        import csv as _csv
        rows = list(_csv.DictReader(f))
    by_mode = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r)
    for rs in by_mode.values():
        rs.sort(key=lambda r: float(r["fraction"]))
    return by_mode, source


def test_a5_lambda_growth(image_matrix):
    by_mode, source = image_matrix
    rmd = by_mode["rmd"]
    fractions = [float(r["fraction"]) for r in rmd]
    lam = [float(r["lambda_0_mean"]) for r in rmd]
    wn = [float(r["wnorm2_mean"]) for r in rmd]
    assert len(fractions) == 6
    rho_l = float(spearmanr(fractions, lam).statistic)
    rho_w = float(spearmanr(fractions, wn).statistic)
    ok = rho_l >= 0.8 and rho_w <= -0.8
    report("A5", ok,
           f"{source}: lambda Spearman {rho_l:.3f} (>=0.8), "
           f"wnorm2 Spearman {rho_w:.3f} (<=-0.8)")


def test_a6_mitigation_ordering(image_matrix):
    by_mode, source = image_matrix

    def err(mode, fraction):
        for r in by_mode[mode]:
            if abs(float(r["fraction"]) - fraction) < 1e-9:
                return float(r["test_error_mean"])
        raise KeyError((mode, fraction))

    fmax = max(float(r["fraction"]) for r in by_mode["rmd"])
    at_max = err("rmd", fmax) < err("small", fmax) \
        and err("rmd", fmax) < err("clean", fmax)
    at_zero = err("rmd", 0.0) <= err("large", 0.0) - 0.01 \
        and abs(err("rmd", 0.0) - err("clean", 0.0)) <= 0.01
    report("A6", at_max and at_zero,
           f"{source}: @{fmax*100:.1f}% rmd {err('rmd', fmax):.4f} vs "
           f"small {err('small', fmax):.4f} clean {err('clean', fmax):.4f}; "
           f"@0% rmd {err('rmd', 0.0):.4f} clean {err('clean', 0.0):.4f} "
           f"large {err('large', 0.0):.4f}")


# --------------------------------------------------------------------- A7

def test_a7_param_count():
    count = models.param_count(models.ModelSpec.mlp((2048, 128, 32, 1)))
    report("A7", count == 266_433, f"param_count = {count}")


# --------------------------------------------------------------------- A8

@pytest.mark.skipif(os.environ.get("POISONFORGE_LONG_RUNNING") != "1",
                    reason="hours-long deep-net profile; set "
                           "POISONFORGE_LONG_RUNNING=1 to enable")
def test_a8_dnn_profile():
    cfg_path = REPO / "configs" / "feattask_dnn.json"
    cfg_doc = json.loads(cfg_path.read_text())
    feat = REPO / cfg_doc["dataset"]["paths"][0]
    if not feat.exists():
        rc = cli_main(["synth-data", "--kind", "features", "--seed", "0",
                       "--out", str(feat.parent)])
        assert rc == 0
    cfg_doc["dataset"]["paths"] = [str(feat)]
    cfg_doc["out_dir"] = str(REPO / cfg_doc["out_dir"])
    cfg = exp.config_from_dict(cfg_doc)
    summary = exp.run_matrix(cfg, cfg_doc=cfg_doc)
    assert summary["failures"] == 0
    import csv as _csv
    with open(Path(cfg.out_dir) / "aggregate.csv") as f:
        f.readline()
        rows = list(_csv.DictReader(f))
    by = {(r["mode"], round(float(r["fraction"]), 4)): float(r["test_error_mean"])
          for r in rows}
    fmax = max(round(float(r["fraction"]), 4) for r in rows)
    small, rmd = by[("small", fmax)], by[("rmd", fmax)]
    ok = small > rmd and small >= 0.09
    report("A8", ok, f"@{fmax*100:.1f}%: small {small:.4f} rmd {rmd:.4f}")


# --------------------------------------------------------------------- A9

def test_a9_cli_determinism(tmp_path):
    doc = {
        "name": "det",
        "dataset": {"source": "synthetic", "n_train": 16, "n_val": 24,
                    "n_test": 60, "seed": 5},
        "model": {"kind": "logreg"},
        "attack": {"t_dp": 3, "t_lambda": 2, "t_mul": 3, "t_inner": 10,
                   "eta": 0.2, "alpha": 0.4, "beta": 0.5, "batch_size": 1,
                   "max_fraction": 0.15, "lam_lo": -8.0, "lam_hi": 2.0,
                   "lam_init": -1.0, "patience": 20, "restarts": True},
        "eval": {"eta_tr": 0.2, "batch": 32, "epochs": 40},
        "modes": [{"name": "small", "kind": "fixed", "lam": -8.0},
                  {"name": "rmd", "kind": "learn"}],
        "repetitions": 2,
        "seed": 9,
    }
    outputs = []
    for run in ("one", "two"):
        d = dict(doc)
        d["out_dir"] = str(tmp_path / run / "out")
        d["cache_dir"] = str(tmp_path / run / "cache")   # both start cold
        p = tmp_path / f"{run}.json"
        p.write_text(json.dumps(d))
        assert cli_main(["matrix", "--config", str(p)]) == 0
        outputs.append((Path(d["out_dir"]) / "metrics.csv").read_bytes())
    identical = outputs[0] == outputs[1]
    report("A9", identical,
           f"metrics.csv byte-identical across cold runs "
           f"({len(outputs[0])} bytes)")
