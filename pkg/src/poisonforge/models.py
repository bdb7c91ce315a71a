"""Differentiable binary classifiers with L2-regularized training loss.

Two kinds share one set of kernels: logistic regression is the zero-hidden-
layer case of a leaky-ReLU MLP with a sigmoid output. All losses use the
MEAN cross-entropy over the set; the regularizer is sum_g (e^{lam_g}/2)
||w_g||^2 over lambda groups (one group for LR, one per layer for the MLP,
biases included).

Second-order quantities are exact analytic double-backward products, never
materialized Hessians and never numeric differencing:

  hvp_ww        (d2L/dw2) v            forward-over-reverse propagation
  hvp_xp_w      (dXp dw L)^T v         adjoint pass through that propagation
  hvp_lambda_w  (dLam dw L)^T v        closed form e^{lam_g} <w_g, v_g>

Leaky-ReLU second derivative is zero almost everywhere, which makes the
products exact off the kinks; the slope at exactly zero is the negative
slope (any fixed choice is measure-zero).
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .linalg import BoxDomain


class NonFiniteError(FloatingPointError):
    """A loss or gradient came out non-finite (diverged parameters)."""


@dataclass(frozen=True)
class LayerSlice:
    w: slice        # weight block, (fan_in * fan_out,) row-major
    b: slice        # bias block, (fan_out,)
    fan_in: int
    fan_out: int


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: layer_sizes = (features, hidden..., 1).

    kind "logreg" forces layer_sizes (m, 1), zero init and a single lambda
    group; kind "mlp" uses Xavier-uniform init and one lambda group per layer.
    """

    kind: str
    layer_sizes: tuple
    negative_slope: float = 0.1

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        if sizes[-1] != 1:
            raise ValueError("binary classifier: output dimension must be 1")
        if self.kind == "logreg" and len(sizes) != 2:
            raise ValueError("logreg takes layer_sizes (m, 1)")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def logreg(cls, n_features):
        return cls("logreg", (int(n_features), 1))

    @classmethod
    def mlp(cls, layer_sizes, negative_slope=0.1):
        return cls("mlp", tuple(layer_sizes), negative_slope)

    @property
    def n_features(self):
        return self.layer_sizes[0]


@lru_cache(maxsize=None)
def _layout(spec):
    """Per-layer slices into the flat parameter vector: [W1, b1, W2, b2, ...]."""
    out = []
    off = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = slice(off, off + fan_in * fan_out)
        off += fan_in * fan_out
        b = slice(off, off + fan_out)
        off += fan_out
        out.append(LayerSlice(w, b, fan_in, fan_out))
    return tuple(out)


def layer_slices(spec):
    return _layout(spec)


def lambda_groups(spec):
    """Slices of the flat vector sharing one regularization coefficient."""
    layers = _layout(spec)
    if spec.kind == "logreg":
        return (slice(0, layers[-1].b.stop),)
    return tuple(slice(ly.w.start, ly.b.stop) for ly in layers)


def param_count(spec):
    return _layout(spec)[-1].b.stop


def n_lambda_groups(spec):
    return len(lambda_groups(spec))


@dataclass(frozen=True)
class HyperParams:
    """Log-scale regularization coefficients, one per lambda group, with
    their feasible box. Effective strength e^{values[g]} is always > 0."""

    values: np.ndarray
    box: BoxDomain

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64).copy()
        )

    def clipped(self, new_values):
        from .linalg import project_box

        return HyperParams(project_box(new_values, self.box), self.box)


@dataclass
class Dataset:
    """Feature matrix, {0,1} labels, and the feasible feature box.

    The box is what poison projection uses; standardized feature data may
    legitimately live outside it.
    """

    X: np.ndarray
    y: np.ndarray
    domain: BoxDomain

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ValueError(
                f"dataset shapes disagree: X {self.X.shape}, y {self.y.shape}"
            )
        if self.y.size and not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise ValueError("labels must be 0/1")

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def class_counts(self):
        return int(np.sum(self.y == 0.0)), int(np.sum(self.y == 1.0))

    def copy(self):
        return Dataset(self.X.copy(), self.y.copy(), self.domain)


def init_params(spec, rng):
    """Zeros for LR; Xavier-uniform weights and 1e-2 biases for the MLP."""
    w = np.zeros(param_count(spec))
    if spec.kind == "logreg":
        return w
    for ly in _layout(spec):
        bound = np.sqrt(6.0 / (ly.fan_in + ly.fan_out))
        w[ly.w] = rng.uniform(size=ly.fan_in * ly.fan_out, lo=-bound, hi=bound)
        w[ly.b] = 1e-2
    return w


def _unpack(spec, w):
    layers = _layout(spec)
    if w.shape != (layers[-1].b.stop,):
        raise ValueError(
            f"parameter vector has shape {w.shape}, expected ({layers[-1].b.stop},)"
        )
    return [
        (w[ly.w].reshape(ly.fan_in, ly.fan_out), w[ly.b]) for ly in layers
    ]


def _leaky(spec, z):
    return np.where(z > 0, z, spec.negative_slope * z)


def _leaky_slope(spec, z):
    # derivative at exactly zero pinned to the negative slope
    return np.where(z > 0, 1.0, spec.negative_slope)


def _forward(spec, X, w):
    """Returns (zs, acts): pre-activations per layer and the inputs they saw.

    acts[l] is the input of layer l (acts[0] = X); zs[-1][:, 0] is the logit.
    """
    Wb = _unpack(spec, w)
    a = X
    zs, acts = [], [X]
    for i, (W, b) in enumerate(Wb):
        z = a @ W + b
        zs.append(z)
        if i < len(Wb) - 1:
            a = _leaky(spec, z)
            acts.append(a)
    return zs, acts


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _data_loss(logits, y):
    if logits.size == 0:
        return 0.0
    # mean of softplus(z) - y z == mean binary cross-entropy with sigmoid
    return float(np.mean(_softplus(logits) - y * logits))


def _reg_loss(spec, w, lam):
    lam = np.asarray(lam, dtype=np.float64)
    groups = lambda_groups(spec)
    if lam.shape != (len(groups),):
        raise ValueError(
            f"lambda vector has shape {lam.shape}, expected ({len(groups)},)"
        )
    return sum(
        0.5 * np.exp(lam[g]) * float(w[sl] @ w[sl]) for g, sl in enumerate(groups)
    )


def train_loss(spec, data, w, lam):
    """Mean cross-entropy on data plus sum_g (e^{lam_g}/2) ||w_g||^2."""
    zs, _ = _forward(spec, data.X, w)
    val = _data_loss(zs[-1][:, 0], data.y) + _reg_loss(spec, w, lam)
    if not np.isfinite(val):
        raise NonFiniteError("train_loss is non-finite")
    return val


def val_loss(spec, data, w):
    """Unregularized mean cross-entropy (the attacker objective)."""
    zs, _ = _forward(spec, data.X, w)
    val = _data_loss(zs[-1][:, 0], data.y)
    if not np.isfinite(val):
        raise NonFiniteError("val_loss is non-finite")
    return val


def _backward_deltas(spec, Wb, zs, y):
    """deltas[l] = dL_data/dz^l, starting from (sigmoid(logit) - y)/n."""
    n = len(y)
    p = _sigmoid(zs[-1][:, 0])
    deltas = [None] * len(Wb)
    deltas[-1] = ((p - y) / n)[:, None] if n else np.zeros((0, 1))
    for l in range(len(Wb) - 1, 0, -1):
        W, _ = Wb[l]
        deltas[l - 1] = (deltas[l] @ W.T) * _leaky_slope(spec, zs[l - 1])
    return deltas, p


def _accumulate_param_grad(spec, acts, deltas):
    g = np.zeros(param_count(spec))
    for ly, a, d in zip(_layout(spec), acts, deltas):
        g[ly.w] = (a.T @ d).ravel()
        g[ly.b] = d.sum(axis=0)
    return g


def _add_reg_grad(spec, w, lam, g):
    for gi, sl in enumerate(lambda_groups(spec)):
        g[sl] += np.exp(lam[gi]) * w[sl]
    return g


def grad_w(spec, data, w, lam):
    """Exact gradient of train_loss with respect to w."""
    zs, acts = _forward(spec, data.X, w)
    Wb = _unpack(spec, w)
    deltas, _ = _backward_deltas(spec, Wb, zs, data.y)
    g = _accumulate_param_grad(spec, acts, deltas)
    g = _add_reg_grad(spec, w, np.asarray(lam, dtype=np.float64), g)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("grad_w is non-finite")
    return g


def grad_w_val(spec, data, w):
    """Exact gradient of the unregularized validation loss."""
    zs, acts = _forward(spec, data.X, w)
    Wb = _unpack(spec, w)
    deltas, _ = _backward_deltas(spec, Wb, zs, data.y)
    g = _accumulate_param_grad(spec, acts, deltas)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("grad_w_val is non-finite")
    return g


def predict_proba(spec, X, w):
    zs, _ = _forward(spec, X, w)
    return _sigmoid(zs[-1][:, 0])


def zero_one_error(spec, data, w, threshold=0.5):
    if len(data) == 0:
        return 0.0
    pred = predict_proba(spec, data.X, w) >= threshold
    return float(np.mean(pred != (data.y == 1.0)))


def _r_forward(spec, Wb, Vc, zs, acts):
    """Directional derivative of every z^l along the parameter direction."""
    Ra = None  # R of acts[0] = X is zero
    Rzs = []
    for i, ((W, b), (V, c)) in enumerate(zip(Wb, Vc)):
        Rz = acts[i] @ V + c
        if Ra is not None:
            Rz = Rz + Ra @ W
        Rzs.append(Rz)
        if i < len(Wb) - 1:
            Ra = _leaky_slope(spec, zs[i]) * Rz
    return Rzs


def hvp_ww(spec, data, w, lam, v):
    """(d2/dw2 train_loss) v via forward-over-reverse; Hessian never formed."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"direction shape {v.shape} != parameter shape {w.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    Wb = _unpack(spec, w)
    Vc = _unpack(spec, v)
    zs, acts = _forward(spec, data.X, w)
    deltas, p = _backward_deltas(spec, Wb, zs, data.y)
    Rzs = _r_forward(spec, Wb, Vc, zs, acts)

    n = len(data)
    # R of the activations, needed for the (Ra)^T delta terms
    Ras = [None]
    for i in range(len(Wb) - 1):
        Ras.append(_leaky_slope(spec, zs[i]) * Rzs[i])

    Rdeltas = [None] * len(Wb)
    if n:
        Rdeltas[-1] = (p * (1.0 - p) / n)[:, None] * Rzs[-1]
    else:
        Rdeltas[-1] = np.zeros((0, 1))
    for l in range(len(Wb) - 1, 0, -1):
        W, _ = Wb[l]
        V, _ = Vc[l]
        Rdeltas[l - 1] = (Rdeltas[l] @ W.T + deltas[l] @ V.T) * _leaky_slope(
            spec, zs[l - 1]
        )

    out = np.zeros_like(w)
    for i, ly in enumerate(_layout(spec)):
        RgW = acts[i].T @ Rdeltas[i]
        if Ras[i] is not None:
            RgW = RgW + Ras[i].T @ deltas[i]
        out[ly.w] = RgW.ravel()
        out[ly.b] = Rdeltas[i].sum(axis=0)
    for gi, sl in enumerate(lambda_groups(spec)):
        out[sl] += np.exp(lam[gi]) * v[sl]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("hvp_ww is non-finite")
    return out


def hvp_xp_w(spec, data, poison_indices, w, lam, v):
    """Rows P of the mixed second derivative (dXp dw L)^T v, shape (n_p, m).

    Computed as the feature gradient of the scalar v . grad_w(L): adjoint
    pass through the directional-derivative propagation of _r_forward. The
    regularizer does not depend on the features, so lam only matters through
    nothing here; it is accepted for signature symmetry.
    """
    del lam  # regularizer carries no feature coupling
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"direction shape {v.shape} != parameter shape {w.shape}")
    P = np.asarray(poison_indices, dtype=np.intp)
    n = len(data)
    if P.size and (P.min() < 0 or P.max() >= n):
        raise IndexError("poison index out of range")
    Wb = _unpack(spec, w)
    Vc = _unpack(spec, v)
    zs, acts = _forward(spec, data.X, w)
    deltas, p = _backward_deltas(spec, Wb, zs, data.y)
    Rzs = _r_forward(spec, Wb, Vc, zs, acts)

    # adjoints of z^l and Rz^l for the scalar s = sum_i delta_i Rz^L_i
    L = len(Wb)
    dz = [None] * L
    dRz = [None] * L
    dRz[-1] = deltas[-1]
    dz[-1] = (p * (1.0 - p) / n)[:, None] * Rzs[-1] if n else np.zeros((0, 1))
    for l in range(L - 1, 0, -1):
        W, _ = Wb[l]
        V, _ = Vc[l]
        slope = _leaky_slope(spec, zs[l - 1])
        da = dz[l] @ W.T + dRz[l] @ V.T
        dRa = dRz[l] @ W.T
        dz[l - 1] = da * slope
        dRz[l - 1] = dRa * slope  # second derivative of leaky is 0 a.e.
    W1, _ = Wb[0]
    V1, _ = Vc[0]
    dX = dz[0] @ W1.T + dRz[0] @ V1.T
    out = dX[P]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("hvp_xp_w is non-finite")
    return out


def hvp_lambda_w(spec, data, w, lam, v):
    """(dLam dw L)^T v: exact closed form e^{lam_g} <w_g, v_g> per group."""
    del data  # only the regularizer couples lambda and w
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"direction shape {v.shape} != parameter shape {w.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    groups = lambda_groups(spec)
    return np.array(
        [np.exp(lam[g]) * float(w[sl] @ v[sl]) for g, sl in enumerate(groups)]
    )


def rmd_partials(spec, data, poison_indices, w, lam, dw):
    """Fused (hvp_ww, hvp_xp_w, hvp_lambda_w) against one direction dw.

    This is the reverse sweep's hot kernel: one combined forward plus
    directional pass (z and its derivative along dw share each GEMM), and
    an adjoint pass restricted to the poison rows, which is valid because
    the adjoint decomposes over samples.
    """
    w = np.asarray(w, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    P = np.asarray(poison_indices, dtype=np.intp)
    Wb = _unpack(spec, w)
    Vc = _unpack(spec, dw)
    n = len(data)
    L = len(Wb)

    # combined forward: both a@W and a@V come out of one GEMM over a
    zs, acts, Rzs, Ras = [], [data.X], [], [None]
    a, Ra = data.X, None
    for i, ((W, b), (V, c)) in enumerate(zip(Wb, Vc)):
        fan_out = W.shape[1]
        both = a @ np.hstack([W, V])
        z = both[:, :fan_out] + b
        Rz = both[:, fan_out:] + c
        if Ra is not None:
            Rz = Rz + Ra @ W
        zs.append(z)
        Rzs.append(Rz)
        if i < L - 1:
            slope = _leaky_slope(spec, z)
            a = slope * z
            Ra = slope * Rz
            acts.append(a)
            Ras.append(Ra)

    deltas, p = _backward_deltas(spec, Wb, zs, data.y)
    sig2 = (p * (1.0 - p) / n)[:, None] if n else np.zeros((0, 1))

    # --- hvp_ww ---
    Rdeltas = [None] * L
    Rdeltas[-1] = sig2 * Rzs[-1]
    for l in range(L - 1, 0, -1):
        W, _ = Wb[l]
        V, _ = Vc[l]
        Rdeltas[l - 1] = (Rdeltas[l] @ W.T + deltas[l] @ V.T) * _leaky_slope(
            spec, zs[l - 1]
        )
    h_ww = np.zeros_like(w)
    for i, ly in enumerate(_layout(spec)):
        RgW = acts[i].T @ Rdeltas[i]
        if Ras[i] is not None:
            RgW = RgW + Ras[i].T @ deltas[i]
        h_ww[ly.w] = RgW.ravel()
        h_ww[ly.b] = Rdeltas[i].sum(axis=0)
    for gi, sl in enumerate(lambda_groups(spec)):
        h_ww[sl] += np.exp(lam[gi]) * dw[sl]

    # --- hvp_xp_w: adjoint on poison rows only ---
    dz = sig2[P] * Rzs[-1][P]
    dRz = deltas[-1][P]
    for l in range(L - 1, 0, -1):
        W, _ = Wb[l]
        V, _ = Vc[l]
        slope = _leaky_slope(spec, zs[l - 1][P])
        dz, dRz = (dz @ W.T + dRz @ V.T) * slope, (dRz @ W.T) * slope
    W1, _ = Wb[0]
    V1, _ = Vc[0]
    h_xp = dz @ W1.T + dRz @ V1.T

    # --- hvp_lambda_w ---
    h_lam = np.array(
        [np.exp(lam[g]) * float(w[sl] @ dw[sl])
         for g, sl in enumerate(lambda_groups(spec))]
    )

    if not (np.all(np.isfinite(h_ww)) and np.all(np.isfinite(h_xp))):
        raise NonFiniteError("reverse-sweep partials non-finite")
    return h_ww, h_xp, h_lam


def group_norms_sq(spec, w):
    """||w_g||^2 per lambda group."""
    return np.array([float(w[sl] @ w[sl]) for sl in lambda_groups(spec)])


def group_sizes(spec):
    return np.array([sl.stop - sl.start for sl in lambda_groups(spec)])
