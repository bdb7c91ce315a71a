"""Figure builders. All functions return a matplotlib Figure; callers save.

Built on matplotlib.figure directly (no pyplot, no global state), so they
work headless and in parallel.
"""

import numpy as np
from matplotlib.figure import Figure

from .schema import SchemaError, read_table

MODE_STYLE = {
    "small": dict(color="tab:red", marker="o"),
    "large": dict(color="tab:purple", marker="s"),
    "clean": dict(color="tab:orange", marker="^"),
    "rmd": dict(color="tab:blue", marker="D"),
}

CURVE_KINDS = {
    "error": ("test_error", "average test error"),
    "fpr": ("fpr", "average false positive rate"),
    "fnr": ("fnr", "average false negative rate"),
}


def _mode_style(mode, i):
    fallback = dict(color=f"C{i}", marker="o")
    return MODE_STYLE.get(mode, fallback)


def _band(ax, x, mean, err, **style):
    line, = ax.plot(x, mean, linewidth=1.6, markersize=4, **style)
    ax.fill_between(x, mean - err, mean + err, alpha=0.2,
                    color=line.get_color(), linewidth=0)
    return line


def plot_curves(aggregate_csv, kind, out_path=None):
    """One line per lambda mode against the poisoning fraction.

    kind `error|fpr|fnr` plots that rate; `lambda` plots the learned or
    fixed regularization value(s); `norm` plots the per-group parameter
    norm divided by group size. Standard-error bands throughout.
    """
    table = read_table(aggregate_csv, "aggregate")
    modes = []
    for m in table.strings("mode"):
        if m not in modes:
            modes.append(m)
    fig = Figure(figsize=(5.2, 3.6))
    ax = fig.subplots()
    mode_col = np.array(table.strings("mode"))
    fraction = table.floats("fraction") * 100.0

    def series(mask, base):
        x = fraction[mask]
        order = np.argsort(x)
        mean = table.floats(f"{base}_mean")[mask][order]
        err = table.floats(f"{base}_stderr")[mask][order]
        return x[order], mean, err

    if kind in CURVE_KINDS:
        base, ylabel = CURVE_KINDS[kind]
        for i, mode in enumerate(modes):
            mask = mode_col == mode
            x, mean, err = series(mask, base)
            _band(ax, x, mean, err, label=mode, **_mode_style(mode, i))
        ax.set_ylabel(ylabel)
    elif kind == "lambda":
        groups = table.group_count("lambda_")
        for i, mode in enumerate(modes):
            mask = mode_col == mode
            for g in range(groups):
                x, mean, err = series(mask, f"lambda_{g}")
                style = dict(_mode_style(mode, i))
                if groups > 1:
                    style["alpha"] = 1.0 - 0.25 * g
                label = mode if groups == 1 else f"{mode} (group {g})"
                _band(ax, x, mean, err, label=label, **style)
        ax.set_ylabel("regularization value (log scale coefficient)")
    elif kind == "norm":
        groups = table.group_count("wnorm2n_")
        for i, mode in enumerate(modes):
            mask = mode_col == mode
            for g in range(groups):
                x, mean, err = series(mask, f"wnorm2n_{g}")
                style = dict(_mode_style(mode, i))
                if groups > 1:
                    style["alpha"] = 1.0 - 0.25 * g
                label = mode if groups == 1 else f"{mode} (group {g})"
                _band(ax, x, mean, err, label=label, **style)
        ax.set_ylabel("parameter norm squared / group size")
    else:
        raise ValueError(f"unknown curve kind {kind!r}")

    ax.set_xlabel("poisoning fraction (%)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    if out_path:
        fig.savefig(out_path, dpi=150)
    return fig


def _lattice(table):
    x = table.floats("x")
    y = table.floats("y")
    v = table.floats("value")
    xs = np.unique(x)
    ys = np.unique(y)
    if xs.size * ys.size != len(v):
        raise SchemaError("grid is not a full rectangular lattice")
    Z = np.full((ys.size, xs.size), np.nan)
    xi = np.searchsorted(xs, x)
    yi = np.searchsorted(ys, y)
    Z[yi, xi] = v
    if np.any(np.isnan(Z)):
        raise SchemaError("grid has duplicate or missing lattice points")
    return xs, ys, Z


ROLE_STYLE = {
    "train": dict(s=22, zorder=3),
    "val": dict(s=8, alpha=0.45, zorder=2),
}


def plot_synthetic_map(grid_csv, out_path=None, points_csv=None,
                       boundaries_csv=None, label="validation error"):
    """Heatmap over poison locations, plus data points and boundaries.

    The value map comes from the grid CSV; optional overlays add the
    train/validation scatter, the optimized poison point(s), and clean vs
    poisoned decision boundaries.
    """
    table = read_table(grid_csv, "grid")
    xs, ys, Z = _lattice(table)
    fig = Figure(figsize=(4.6, 4.0))
    ax = fig.subplots()
    mesh = ax.pcolormesh(xs, ys, Z, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label=label)

    if points_csv:
        pts = read_table(points_csv, "points")
        px = pts.floats("x")
        py = pts.floats("y")
        lbl = pts.floats("label")
        role = np.array(pts.strings("role"))
        for r, style in ROLE_STYLE.items():
            for cls, color in ((0.0, "tab:blue"), (1.0, "tab:green")):
                mask = (role == r) & (lbl == cls)
                if mask.any():
                    ax.scatter(px[mask], py[mask], color=color,
                               edgecolors="white", linewidths=0.3, **style)
        poison = np.char.startswith(role.astype(str), "poison")
        if poison.any():
            ax.scatter(px[poison], py[poison], marker="*", s=160,
                       color="tab:red", edgecolors="white", zorder=5)

    if boundaries_csv:
        bnd = read_table(boundaries_csv, "boundaries")
        gx = np.linspace(xs.min(), xs.max(), 200)
        for row in bnd.rows:
            w1, w2, b = (float(row[k]) for k in ("w1", "w2", "b"))
            style = dict(color="white", linestyle="--", linewidth=1.4) \
                if row["case"].startswith("clean") \
                else dict(color="tab:red", linestyle="-", linewidth=1.4)
            if abs(w2) > 1e-12:
                gy = -(w1 * gx + b) / w2
                ax.plot(gx, gy, **style)
            elif abs(w1) > 1e-12:
                ax.axvline(-b / w1, **style)

    ax.set_xlim(float(xs.min()), float(xs.max()))
    ax.set_ylim(float(ys.min()), float(ys.max()))
    ax.set_xlabel("poison feature 1")
    ax.set_ylabel("poison feature 2")
    fig.tight_layout()
    if out_path:
        fig.savefig(out_path, dpi=150)
    return fig


def plot_histograms(hist_csv, out_path=None):
    """Relative-frequency bars per parameter group."""
    table = read_table(hist_csv, "hist")
    group = table.floats("group").astype(int)
    lo = table.floats("bin_lo")
    hi = table.floats("bin_hi")
    freq = table.floats("freq")
    groups = sorted(set(group.tolist()))
    fig = Figure(figsize=(4.0 * len(groups), 3.2))
    axes = fig.subplots(1, len(groups), squeeze=False)[0]
    for ax, g in zip(axes, groups):
        mask = group == g
        centers = (lo[mask] + hi[mask]) / 2
        widths = hi[mask] - lo[mask]
        ax.bar(centers, freq[mask], width=widths * 0.95,
               color="tab:blue", edgecolor="none")
        ax.set_title(f"group {g}", fontsize=9)
        ax.set_xlabel("parameter value")
        ax.set_ylabel("relative frequency")
    fig.tight_layout()
    if out_path:
        fig.savefig(out_path, dpi=150)
    return fig
