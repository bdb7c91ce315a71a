import numpy as np
import pytest

from poisonforge import models
from poisonforge.linalg import BoxDomain, RngStream

from conftest import fd_grad, random_dataset, rel_err, safe_fixture

LR5 = models.ModelSpec.logreg(5)
MLP = models.ModelSpec.mlp((5, 4, 3, 1))


def fixture(seed, spec, n=12):
    rng = RngStream(seed)
    data = random_dataset(rng, n=n, m=spec.n_features)
    d = models.param_count(spec)
    w = rng.standard_normal(d) * 0.7
    v = rng.standard_normal(d)
    lam = rng.uniform(models.n_lambda_groups(spec), lo=-1.5, hi=1.0)
    return data, w, v, lam


class TestStructure:
    def test_param_count_big_mlp(self):
        assert models.param_count(models.ModelSpec.mlp((2048, 128, 32, 1))) \
            == 266_433

    def test_param_count_logreg(self):
        assert models.param_count(models.ModelSpec.logreg(784)) == 785

    def test_param_count_tiny(self):
        assert models.param_count(models.ModelSpec.mlp((2, 1))) == 3

    def test_groups_partition_vector(self):
        for spec in (LR5, MLP):
            groups = models.lambda_groups(spec)
            covered = np.zeros(models.param_count(spec), dtype=int)
            for sl in groups:
                covered[sl] += 1
            assert np.all(covered == 1)

    def test_lambda_group_counts(self):
        assert models.n_lambda_groups(LR5) == 1
        assert models.n_lambda_groups(MLP) == 3

    def test_output_dim_must_be_one(self):
        with pytest.raises(ValueError):
            models.ModelSpec.mlp((4, 3, 2))


class TestInit:
    def test_logreg_zeros(self):
        w = models.init_params(models.ModelSpec.logreg(784), RngStream(0))
        assert w.shape == (785,) and np.all(w == 0.0)

    def test_xavier_bounds(self):
        spec = models.ModelSpec.mlp((2048, 128, 1))
        w = models.init_params(spec, RngStream(5))
        ly = models.layer_slices(spec)[0]
        bound = np.sqrt(6.0 / (2048 + 128))
        weights = w[ly.w]
        assert np.max(np.abs(weights)) <= bound
        assert np.max(np.abs(weights)) > 0.9 * bound  # actually spans range

    def test_mlp_biases(self):
        w = models.init_params(MLP, RngStream(5))
        for ly in models.layer_slices(MLP):
            assert np.all(w[ly.b] == 1e-2)


class TestLosses:
    def test_zero_weights_balanced_ln2(self):
        X = np.ones((4, 5))
        y = np.array([0.0, 1.0, 0.0, 1.0])
        data = models.Dataset(X, y, BoxDomain.cube(-2, 2))
        w = np.zeros(6)
        assert np.isclose(models.train_loss(LR5, data, w, np.array([-50.0])),
                          np.log(2.0))
        assert np.isclose(models.val_loss(LR5, data, w), np.log(2.0))

    def test_lambda_zero_adds_half_norm(self):
        data, w, _, _ = fixture(1, LR5)
        base = models.val_loss(LR5, data, w)
        full = models.train_loss(LR5, data, w, np.array([0.0]))
        assert np.isclose(full - base, 0.5 * w @ w)

    def test_regularizer_ratio_closed_form(self):
        data, w, _, _ = fixture(2, LR5)
        lo = models.train_loss(LR5, data, w, np.array([-8.0]))
        hi = models.train_loss(LR5, data, w, np.array([np.log(20.0)]))
        ce = models.val_loss(LR5, data, w)
        assert np.isclose((hi - ce) / (lo - ce), 20.0 / np.exp(-8.0))

    def test_saturation_limit(self):
        X = np.array([[1.0], [-1.0]])
        y = np.array([1.0, 0.0])
        data = models.Dataset(X, y, BoxDomain.cube(-2, 2))
        spec = models.ModelSpec.logreg(1)
        w = np.array([50.0, 0.0])
        assert models.val_loss(spec, data, w) < 1e-20

    def test_nonfinite_parameters_raise(self):
        data, w, _, lam = fixture(3, LR5)
        w = w.copy()
        w[0] = 1e300
        with np.errstate(over="ignore"), pytest.raises(models.NonFiniteError):
            models.grad_w(LR5, data, w * 1e10, lam)


class TestGradients:
    def test_logreg_grad_at_zero_closed_form(self):
        data, _, _, _ = fixture(4, LR5)
        w = np.zeros(6)
        g = models.grad_w(LR5, data, w, np.array([-40.0]))
        n = len(data)
        expected_w = data.X.T @ (0.5 - data.y) / n
        expected_b = np.mean(0.5 - data.y)
        assert np.allclose(g[:5], expected_w, atol=1e-12)
        assert np.isclose(g[5], expected_b)

    def test_pure_regularizer_component(self):
        empty = models.Dataset(np.zeros((0, 5)), np.zeros(0),
                               BoxDomain.cube(-1, 1))
        _, w, _, _ = fixture(5, LR5)
        lam = np.array([0.7])
        g = models.grad_w(LR5, empty, w, lam)
        assert np.allclose(g, np.exp(0.7) * w)

    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_grad_matches_fd(self, spec):
        for seed in range(3):
            data, w, _, lam = fixture(10 + seed, spec)
            if not safe_fixture(spec, data, w):
                continue
            g = models.grad_w(spec, data, w, lam)
            g_fd = fd_grad(lambda u: models.train_loss(spec, data, u, lam), w)
            assert rel_err(g, g_fd) < 1e-5

    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_val_grad_matches_fd(self, spec):
        data, w, _, _ = fixture(20, spec)
        g = models.grad_w_val(spec, data, w)
        g_fd = fd_grad(lambda u: models.val_loss(spec, data, u), w)
        assert rel_err(g, g_fd) < 1e-5


class TestHvpWw:
    def test_regularizer_only_diagonal(self):
        empty = models.Dataset(np.zeros((0, 5)), np.zeros(0),
                               BoxDomain.cube(-1, 1))
        _, w, v, _ = fixture(6, LR5)
        lam = np.array([0.3])
        out = models.hvp_ww(LR5, empty, w, lam, v)
        assert np.allclose(out, np.exp(0.3) * v, atol=1e-14)

    def test_per_group_diagonal_mlp(self):
        empty = models.Dataset(np.zeros((0, 5)), np.zeros(0),
                               BoxDomain.cube(-1, 1))
        _, w, v, lam = fixture(7, MLP)
        out = models.hvp_ww(MLP, empty, w, lam, v)
        expected = np.zeros_like(v)
        for g, sl in enumerate(models.lambda_groups(MLP)):
            expected[sl] = np.exp(lam[g]) * v[sl]
        assert np.allclose(out, expected, atol=1e-14)

    def test_linearity(self):
        data, w, v, lam = fixture(8, MLP)
        v2 = RngStream(99).standard_normal(v.size)
        lhs = models.hvp_ww(MLP, data, w, lam, 2.5 * v + v2)
        rhs = 2.5 * models.hvp_ww(MLP, data, w, lam, v) \
            + models.hvp_ww(MLP, data, w, lam, v2)
        assert np.allclose(lhs, rhs, atol=1e-10)

    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_matches_fd_of_grad(self, spec):
        data, w, v, lam = fixture(9, spec)
        h = 1e-5
        out = models.hvp_ww(spec, data, w, lam, v)
        fd = (models.grad_w(spec, data, w + h * v, lam)
              - models.grad_w(spec, data, w - h * v, lam)) / (2 * h)
        assert rel_err(out, fd) < 1e-5

    def test_logreg_convexity_lower_bound(self):
        data, w, v, _ = fixture(12, LR5)
        lam = np.array([-0.4])
        out = models.hvp_ww(LR5, data, w, lam, v)
        assert v @ out >= np.exp(-0.4) * (v @ v) - 1e-10


class TestHvpXpW:
    def test_zero_direction(self):
        data, w, _, lam = fixture(13, LR5)
        out = models.hvp_xp_w(LR5, data, np.array([1, 3]), w, lam,
                              np.zeros_like(w))
        assert np.array_equal(out, np.zeros((2, 5)))

    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_matches_fd_over_features(self, spec):
        data, w, v, lam = fixture(14, spec)
        P = np.array([0, 4])
        out = models.hvp_xp_w(spec, data, P, w, lam, v)
        h = 1e-5
        fd = np.zeros_like(out)
        for r, pi in enumerate(P):
            for j in range(data.n_features):
                Xp = data.X.copy()
                Xm = data.X.copy()
                Xp[pi, j] += h
                Xm[pi, j] -= h
                gp = models.grad_w(
                    spec, models.Dataset(Xp, data.y, data.domain), w, lam)
                gm = models.grad_w(
                    spec, models.Dataset(Xm, data.y, data.domain), w, lam)
                fd[r, j] = (gp - gm) @ v / (2 * h)
        assert rel_err(out, fd) < 1e-4

    def test_duplicate_row_doubles_weight(self):
        # per-row contribution scales with its sampling weight: duplicating a
        # point (n -> n+1 rows) splits 2x the single-row mass across two rows
        data, w, v, lam = fixture(15, LR5)
        n = len(data)
        row = models.hvp_xp_w(LR5, data, np.array([2]), w, lam, v)
        X2 = np.vstack([data.X, data.X[2]])
        y2 = np.concatenate([data.y, [data.y[2]]])
        dup = models.Dataset(X2, y2, data.domain)
        rows = models.hvp_xp_w(LR5, dup, np.array([2, n]), w, lam, v)
        assert np.allclose(rows[0], rows[1], atol=1e-14)
        assert np.allclose((n + 1) * (rows[0] + rows[1]), 2 * n * row[0],
                           atol=1e-10)

    def test_index_out_of_range(self):
        data, w, v, lam = fixture(16, LR5)
        with pytest.raises(IndexError):
            models.hvp_xp_w(LR5, data, np.array([99]), w, lam, v)


class TestHvpLambdaW:
    def test_orthogonal_group_zero(self):
        _, w, _, lam = fixture(17, LR5)
        v = np.zeros_like(w)
        v[0], v[1] = w[1], -w[0]   # orthogonal to w in the first two coords
        v[2:] = 0.0
        w2 = w.copy()
        w2[2:] = 0.0
        out = models.hvp_lambda_w(LR5, None, w2, lam, v)
        assert abs(out[0]) < 1e-14

    def test_unit_example(self):
        spec = models.ModelSpec.logreg(1)
        out = models.hvp_lambda_w(spec, None, np.array([1.0, 1.0]),
                                  np.array([0.0]), np.array([1.0, 1.0]))
        assert out[0] == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_closed_form_everywhere(self, spec):
        data, w, v, lam = fixture(18, spec)
        out = models.hvp_lambda_w(spec, data, w, lam, v)
        expected = np.array([
            np.exp(lam[g]) * w[sl] @ v[sl]
            for g, sl in enumerate(models.lambda_groups(spec))
        ])
        assert np.allclose(out, expected, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_matches_fd_over_lambda(self, spec):
        data, w, v, lam = fixture(19, spec)
        out = models.hvp_lambda_w(spec, data, w, lam, v)
        h = 1e-6
        for g in range(lam.size):
            lp, lm = lam.copy(), lam.copy()
            lp[g] += h
            lm[g] -= h
            fd = (models.grad_w(spec, data, w, lp)
                  - models.grad_w(spec, data, w, lm)) @ v / (2 * h)
            assert abs(out[g] - fd) < 1e-6 * max(1.0, abs(fd))


class TestFusedKernel:
    @pytest.mark.parametrize("spec", [LR5, MLP], ids=["logreg", "mlp"])
    def test_matches_individual_ops(self, spec):
        data, w, v, lam = fixture(21, spec)
        P = np.array([1, 6])
        h_ww, h_xp, h_lam = models.rmd_partials(spec, data, P, w, lam, v)
        assert np.allclose(h_ww, models.hvp_ww(spec, data, w, lam, v),
                           atol=1e-13)
        assert np.allclose(h_xp, models.hvp_xp_w(spec, data, P, w, lam, v),
                           atol=1e-13)
        assert np.allclose(h_lam, models.hvp_lambda_w(spec, data, w, lam, v),
                           atol=1e-13)
