"""Dataset construction and ingestion.

Three sources, one contract: balanced binary Datasets with an explicit
feasible feature box.

* synthetic: two bivariate Gaussians (means +-[3,0], diagonal covariance
  [2.5, 1.5]), feature box [-9.5, 9.5]^2.
* idx: big-endian IDX image/label files (magic 0x803 / 0x801), pixels
  rescaled into [0,1]; train/val drawn per seed from the train files, the
  test partition fixed.
* feature-file: CSV with a one-line `n,m,label_col` header (or a raw
  little-endian float64 block with a JSON sidecar); features standardized
  by the train-split mean/std, poison box [-0.5, 0.5].

A deterministic stand-in image task (two ring-like classes, written as real
IDX files) ships for environments without the original corpora.
"""

import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .linalg import BoxDomain, RngStream, draw_gaussian
from .models import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH_MEAN_0 = np.array([-3.0, 0.0])
SYNTH_MEAN_1 = np.array([3.0, 0.0])
SYNTH_COV_DIAG = np.array([2.5, 1.5])
SYNTH_BOX = (-9.5, 9.5)


class IdxFormatError(ValueError):
    """Malformed IDX header or truncated payload."""


def gen_synthetic(n_train_per_class=16, n_val_per_class=32, rng=None):
    """Balanced train/validation sets from the two-Gaussian task."""
    if n_train_per_class < 1 or n_val_per_class < 1:
        raise ValueError("per-class counts must be >= 1")
    rng = rng if rng is not None else RngStream(0)
    dom = BoxDomain.cube(*SYNTH_BOX)

    def make(n_per_class, stream):
        x0 = draw_gaussian(stream, SYNTH_MEAN_0, SYNTH_COV_DIAG, n_per_class)
        x1 = draw_gaussian(stream, SYNTH_MEAN_1, SYNTH_COV_DIAG, n_per_class)
        X = np.vstack([x0, x1])
        y = np.concatenate([np.zeros(n_per_class), np.ones(n_per_class)])
        order = np.arange(len(y))
        stream.shuffle(order)
        return Dataset(X[order], y[order], dom)

    return make(n_train_per_class, rng.child("train")), \
        make(n_val_per_class, rng.child("val"))


# ---------------------------------------------------------------- IDX files

def _read_be32(f, path):
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack(">i", raw)[0]


def read_idx_images(path):
    with open(path, "rb") as f:
        magic = _read_be32(f, path)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{path}: bad image magic {magic:#010x}")
        count = _read_be32(f, path)
        rows = _read_be32(f, path)
        cols = _read_be32(f, path)
        payload = f.read()
    if len(payload) != count * rows * cols:
        raise IdxFormatError(
            f"{path}: expected {count * rows * cols} pixel bytes, "
            f"got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path):
    with open(path, "rb") as f:
        magic = _read_be32(f, path)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{path}: bad label magic {magic:#010x}")
        count = _read_be32(f, path)
        payload = f.read()
    if len(payload) != count:
        raise IdxFormatError(f"{path}: expected {count} labels, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def _balanced_indices(y, size, rng, available=None):
    """`size` indices, classes as equal as possible (label 0 gets the odd
    extra), drawn without replacement from the available mask."""
    if available is None:
        available = np.ones(len(y), dtype=bool)
    n0 = (size + 1) // 2
    n1 = size - n0
    picked = []
    for label, want in ((0.0, n0), (1.0, n1)):
        pool = np.flatnonzero((y == label) & available)
        if pool.size < want:
            raise ValueError(
                f"need {want} points of class {int(label)}, pool has {pool.size}"
            )
        picked.append(pool[rng.choice_no_replace(pool.size, want)])
    idx = np.concatenate(picked)
    rng.shuffle(idx)
    return idx


def load_idx(train_images_path, train_labels_path, test_images_path,
             test_labels_path, class_a, class_b, counts, rng):
    """(train, val, test) Datasets for the binary task class_a-vs-class_b.

    counts = (n_train, n_val, n_test); n_test may be None to keep every
    filtered test point. Pixels are rescaled by 1/255 into [0,1]; class_a
    maps to label 0. Train and validation are balanced draws (per rng) from
    the train files; the test partition is fixed.
    """
    if class_a == class_b:
        raise ValueError("class pair must be distinct")
    n_train, n_val, n_test = counts

    def load_pair(ip, lp):
        images = read_idx_images(ip)
        labels = read_idx_labels(lp)
        if len(images) != len(labels):
            raise IdxFormatError(
                f"count mismatch: {len(images)} images vs {len(labels)} labels"
            )
        keep = (labels == class_a) | (labels == class_b)
        X = images[keep].reshape(keep.sum(), -1).astype(np.float64) / 255.0
        y = (labels[keep] == class_b).astype(np.float64)
        return X, y

    X_pool, y_pool = load_pair(train_images_path, train_labels_path)
    X_test, y_test = load_pair(test_images_path, test_labels_path)
    dom = BoxDomain.cube(0.0, 1.0)

    avail = np.ones(len(y_pool), dtype=bool)
    tr_idx = _balanced_indices(y_pool, n_train, rng, avail)
    avail[tr_idx] = False
    va_idx = _balanced_indices(y_pool, n_val, rng, avail)

    if n_test is not None:
        if len(y_test) < n_test:
            raise ValueError(
                f"test partition holds {len(y_test)} points, need {n_test}"
            )
        X_test, y_test = X_test[:n_test], y_test[:n_test]

    return (
        Dataset(X_pool[tr_idx], y_pool[tr_idx], dom),
        Dataset(X_pool[va_idx], y_pool[va_idx], dom),
        Dataset(X_test, y_test, dom),
    )


# ------------------------------------------------------------ feature files

FEATURE_BOX = (-0.5, 0.5)
STD_FLOOR = 1e-12


def write_feature_file(path, X, y, raw=False):
    """Feature file: header `n,m,label_col` then rows (label in the last
    column). raw=True writes a little-endian float64 block plus a JSON
    sidecar carrying the header fields."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = X.shape
    block = np.column_stack([X, y])
    path = Path(path)
    if raw:
        block.astype("<f8").tofile(path)
        sidecar = {"n": n, "m": m, "label_col": m}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))
        return
    with open(path, "w") as f:
        f.write(f"{n},{m},{m}\n")
        for row in block:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_feature_file(path):
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        n, m, label_col = meta["n"], meta["m"], meta["label_col"]
        block = np.fromfile(path, dtype="<f8")
        if block.size != n * (m + 1):
            raise ValueError(f"{path}: raw block size does not match sidecar")
        block = block.reshape(n, m + 1)
    else:
        with open(path) as f:
            header = f.readline().strip().split(",")
            if len(header) != 3:
                raise ValueError(f"{path}: expected `n,m,label_col` header")
            try:
                n, m, label_col = (int(v) for v in header)
            except ValueError as exc:
                raise ValueError(f"{path}: non-numeric header") from exc
            try:
                block = np.loadtxt(f, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise ValueError(f"{path}: non-numeric row") from exc
        if block.shape != (n, m + 1):
            raise ValueError(
                f"{path}: data shape {block.shape} does not match header"
            )
    y = block[:, label_col]
    X = np.delete(block, label_col, axis=1)
    return X, y


def load_features(path, counts, rng):
    """(train, val, test) from a feature file; standardized, box [-0.5, 0.5].

    The LAST n_test rows of the file form the fixed test partition; train
    and validation are balanced draws from the remaining pool. Per-feature
    mean/std come from the train split alone (std floored at 1e-12, with a
    warning) and are applied to all three splits before the poison box is
    attached.
    """
    n_train, n_val, n_test = counts
    X_all, y_all = read_feature_file(path)
    if n_test is None:
        n_test = 0
    if n_test > len(y_all):
        raise ValueError("n_test exceeds file rows")
    split = len(y_all) - n_test
    X_pool, y_pool = X_all[:split], y_all[:split]
    X_test, y_test = X_all[split:], y_all[split:]

    avail = np.ones(len(y_pool), dtype=bool)
    tr_idx = _balanced_indices(y_pool, n_train, rng, avail)
    avail[tr_idx] = False
    va_idx = _balanced_indices(y_pool, n_val, rng, avail)

    mu = X_pool[tr_idx].mean(axis=0)
    sd = X_pool[tr_idx].std(axis=0)
    floored = sd < STD_FLOOR
    if np.any(floored):
        warnings.warn(
            f"{int(floored.sum())} zero-variance feature(s); std floored",
            RuntimeWarning,
        )
        sd = np.where(floored, STD_FLOOR, sd)

    dom = BoxDomain.cube(*FEATURE_BOX)

    def std(X):
        return (X - mu) / sd

    return (
        Dataset(std(X_pool[tr_idx]), y_pool[tr_idx], dom),
        Dataset(std(X_pool[va_idx]), y_pool[va_idx], dom),
        Dataset(std(X_test), y_test, dom),
    )


# ------------------------------------------------------------ manifest

@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to rebuild the exact same splits."""

    source: str                      # synthetic | idx | feature-file
    n_train: int
    n_val: int
    n_test: int | None
    seed: int
    class_a: int = 0
    class_b: int = 1
    normalization: str = "none"      # none | pixel | standardize
    paths: tuple = ()                # source files, order fixed per source

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "feature-file"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.class_a == self.class_b:
            raise ValueError("classes must be distinct")
        object.__setattr__(self, "paths", tuple(str(p) for p in self.paths))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def build_datasets(manifest, seed=None):
    """(train, val, test) per the manifest; seed overrides manifest.seed
    (how repetitions re-draw splits while the test set stays fixed)."""
    rng = RngStream(manifest.seed if seed is None else seed)
    if manifest.source == "synthetic":
        train, val = gen_synthetic(
            manifest.n_train // 2, manifest.n_val // 2, rng
        )
        test_rng = RngStream(manifest.seed).child("synthetic-test")
        if manifest.n_test:
            _, test = gen_synthetic(1, manifest.n_test // 2, test_rng)
        else:
            test = val
        return train, val, test
    if manifest.source == "idx":
        return load_idx(
            *manifest.paths, manifest.class_a, manifest.class_b,
            (manifest.n_train, manifest.n_val, manifest.n_test), rng,
        )
    return load_features(
        manifest.paths[0],
        (manifest.n_train, manifest.n_val, manifest.n_test), rng,
    )


# -------------------------------------------- deterministic stand-in tasks

def _load_digit_bases():
    """Bundled 8x8 handwritten 0s and 8s (UCI digits), upscaled to 28x28."""
    from importlib import resources

    with resources.files("poisonforge.assets").joinpath("digits08.npz") \
            .open("rb") as f:
        z = np.load(f)
        d0, d8 = z["d0"], z["d8"]

    def upscale(img8):
        big = np.kron(img8 / 16.0, np.ones((3, 3)))
        out = np.zeros((28, 28))
        out[2:26, 2:26] = big
        blur = np.zeros_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                blur += np.roll(np.roll(out, dy, axis=0), dx, axis=1)
        return blur / 9.0

    return ([upscale(x) for x in d0], [upscale(x) for x in d8])


def synth_digit_images(rng, bases, class_id, n,
                       bright=((0.70, 0.18), (0.88, 0.18)),
                       noise=0.08, max_shift=2):
    """28x28 uint8 samples drawn from real digit strokes with augmentation.

    Each sample is a random base digit, shifted, scaled by a class-dependent
    noisy brightness (the weak cue whose overlap keeps the task from being
    trivially separable), plus pixel noise.
    """
    mu, sd = bright[class_id]
    out = np.empty((n, 28, 28), dtype=np.uint8)
    for i in range(n):
        b = bases[int(rng.integers(0, len(bases)))]
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        img = np.roll(np.roll(b, int(dy), axis=0), int(dx), axis=1)
        img = img * float(np.clip(mu + sd * rng.standard_normal(1)[0],
                                  0.35, 1.25))
        img = img + noise * rng.standard_normal((28, 28))
        out[i] = np.clip(img, 0.0, 1.0) * 255.0
    return out


def make_idx_standin(out_dir, seed=0, n_pool_per_class=800,
                     n_test_per_class=977, noise=0.08):
    """Write a 0-vs-8 IDX image task; returns the four file paths.

    Samples are augmented from bundled real handwritten digits. The base
    digits behind the train pool and the test partition are disjoint, and
    the test files come from a fixed stream, so they are identical across
    pool seeds.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(seed)
    base0, base8 = _load_digit_bases()
    pool_bases = (base0[:130], base8[:130])
    test_bases = (base0[130:], base8[130:])

    def build(bases, n_per_class, stream):
        imgs = np.concatenate([
            synth_digit_images(stream.child(0), bases[0], 0, n_per_class,
                               noise=noise),
            synth_digit_images(stream.child(1), bases[1], 1, n_per_class,
                               noise=noise),
        ])
        labels = np.concatenate([
            np.zeros(n_per_class, dtype=np.uint8),
            np.ones(n_per_class, dtype=np.uint8),
        ])
        order = np.arange(len(labels))
        stream.child(2).shuffle(order)
        return imgs[order], labels[order]

    train_imgs, train_labels = build(pool_bases, n_pool_per_class,
                                     rng.child("pool"))
    test_imgs, test_labels = build(test_bases, n_test_per_class,
                                   RngStream(7912).child("test"))

    paths = (
        out_dir / "train-images-idx3-ubyte",
        out_dir / "train-labels-idx1-ubyte",
        out_dir / "t10k-images-idx3-ubyte",
        out_dir / "t10k-labels-idx1-ubyte",
    )
    write_idx_images(paths[0], train_imgs)
    write_idx_labels(paths[1], train_labels)
    write_idx_images(paths[2], test_imgs)
    write_idx_labels(paths[3], test_labels)
    return paths


def _blob_geometry(rng, m, separation):
    u = rng.standard_normal(m)
    u /= np.linalg.norm(u)
    base = rng.standard_normal(m) * 0.5
    sd = np.abs(1.0 + 0.2 * rng.standard_normal(m))
    return base - separation / 2 * u, base + separation / 2 * u, sd


def synth_feature_blobs(rng, n_per_class, geometry):
    """Two Gaussian classes sharing the geometry (mu0, mu1, sd)."""
    mu0, mu1, sd = geometry
    m = mu0.size
    X0 = mu0 + sd * rng.standard_normal((n_per_class, m))
    X1 = mu1 + sd * rng.standard_normal((n_per_class, m))
    X = np.vstack([X0, X1])
    y = np.concatenate([np.zeros(n_per_class), np.ones(n_per_class)])
    order = np.arange(len(y))
    rng.shuffle(order)
    return X[order], y[order]


def make_feature_standin(path, seed=0, n_pool_per_class=400,
                         n_test_per_class=300, m=2048, separation=4.0,
                         raw=True):
    """Write a feature-file task (pool rows first, fixed test rows last)."""
    rng = RngStream(seed)
    geom = _blob_geometry(rng.child("geometry"), m, separation)
    X_pool, y_pool = synth_feature_blobs(rng.child("pool"), n_pool_per_class,
                                         geom)
    X_test, y_test = synth_feature_blobs(rng.child("test"), n_test_per_class,
                                         geom)
    write_feature_file(
        path, np.vstack([X_pool, X_test]),
        np.concatenate([y_pool, y_test]), raw=raw,
    )
    return path
