"""Figure renderers: error curves, path overlays, section cuts, snapshots.

Every figure is written as PNG (fixed metadata, so re-rendering is
byte-stable) with a companion CSV echoing exactly the numbers drawn, making
each plot auditable without the renderer.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bundle import BundleError, RunBundle, read_csv, snapshot_field  # noqa: E402

log = logging.getLogger(__name__)

# path colors follow the reference convention: exploit-only red, balanced
# blue, explore-heavy green
THETA_COLORS = {"0": "tab:red", "0.0": "tab:red", "0.2": "tab:blue",
                "0.3": "tab:green"}
_FALLBACK_COLORS = ("tab:orange", "tab:purple", "tab:brown", "tab:cyan")

_PNG_META = {"Software": "plumeplots"}


def _save(fig, out_path: Path):
    fig.savefig(out_path, dpi=150, metadata=_PNG_META)
    plt.close(fig)


def _write_companion(frame, out_path: Path):
    frame.to_csv(out_path, index=False, float_format=None)


def _theta_color(label: str, index: int) -> str:
    return THETA_COLORS.get(label, _FALLBACK_COLORS[index % len(_FALLBACK_COLORS)])


def plot_errors(bundle: RunBundle, out_dir: Path) -> Path:
    """Error time series, one curve per run (baseline and each theta)."""
    if bundle.metrics is None:
        raise BundleError("bundle has no metrics.csv")
    frame = read_csv(bundle.metrics)
    series = [c for c in frame.columns if c != "t"]
    if not series:
        raise BundleError("metrics.csv carries no error series")

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, col in enumerate(series):
        if frame[col].isna().all():
            log.warning("series %s is empty; skipped", col)
            continue
        label = col.replace("err_filter_theta", "filter theta=").replace("err_", "")
        color = None
        if col.startswith("err_filter_theta"):
            color = _theta_color(col.removeprefix("err_filter_theta"), i)
        elif col == "err_baseline":
            color = "0.25"
        ax.plot(frame["t"], frame[col], label=label, color=color)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("relative l2 error [%]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()

    out_png = out_dir / "errors.png"
    _save(fig, out_png)
    _write_companion(frame, out_dir / "errors_data.csv")
    return out_png


def _pick_filter_label(labels):
    """Prefer the balanced run when several are present."""
    for prefer in ("0.2", "0.3", "0"):
        if prefer in labels:
            return prefer
    return sorted(labels)[0]


def plot_path(bundle: RunBundle, out_dir: Path, theta: str | None = None) -> Path:
    """Visited nodes over the final-time concentration contour.

    theta selects a single path log; None overlays every one found.  Start,
    release, and final positions are marked.
    """
    if not bundle.paths:
        raise BundleError("bundle has no path logs")
    labels = sorted(bundle.paths) if theta is None else [theta]
    if theta is not None and theta not in bundle.paths:
        raise BundleError(f"no path log for theta={theta}")

    t_final = bundle.final_time()
    background_model = f"filter_theta{_pick_filter_label(labels)}"
    if (t_final, background_model) not in bundle.snapshots:
        background_model = "truth"
    field, _ = snapshot_field(bundle, t_final, background_model)
    h = bundle.cell_size()
    ny, nx = field.shape

    fig, ax = plt.subplots(figsize=(6.0, 5.5))
    extent = (0.0, nx * h, 0.0, ny * h)
    im = ax.imshow(field, origin="lower", extent=extent, cmap="viridis",
                   interpolation="nearest")
    fig.colorbar(im, ax=ax, label=f"concentration (t={t_final}, {background_model})")

    companion_rows = []
    for i, label in enumerate(labels):
        frame = read_csv(bundle.paths[label])
        color = _theta_color(label, i)
        ax.plot(frame["x"], frame["y"], color=color, lw=1.0,
                label=f"theta={label}")
        ax.scatter(frame["x"], frame["y"], color=color, s=6)
        for _, row in frame.iterrows():
            companion_rows.append({"theta": label, "t": row["t"],
                                   "x": row["x"], "y": row["y"]})
        if len(frame):
            ax.scatter([frame["x"].iloc[-1]], [frame["y"].iloc[-1]], marker="s",
                       color=color, s=60, edgecolor="black", zorder=5)

    drone = bundle.config.get("config", {}).get("drone", {})
    release = bundle.config.get("config", {}).get("release", {})
    if "start" in drone:
        ax.scatter(*drone["start"], marker="^", color="white", edgecolor="black",
                   s=90, zorder=5, label="start (i)")
    if "center" in release:
        ax.scatter(*release["center"], marker="o", color="yellow",
                   edgecolor="black", s=110, zorder=5, label="release (ii)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()

    suffix = "all" if theta is None else f"theta{theta}"
    out_png = out_dir / f"path_{suffix}.png"
    _save(fig, out_png)
    import pandas as pd

    _write_companion(pd.DataFrame(companion_rows, columns=["theta", "t", "x", "y"]),
                     out_dir / f"path_{suffix}_data.csv")
    return out_png


def plot_gamma(bundle: RunBundle, out_dir: Path) -> Path:
    """Section-cut profiles over arc length, one panel per model."""
    order = ["truth", "baseline"]
    filter_models = sorted(m for m in bundle.gammas if m.startswith("filter"))
    if filter_models:
        label = _pick_filter_label([m.removeprefix("filter_theta") for m in filter_models])
        order.append(f"filter_theta{label}")
    models = [m for m in order if m in bundle.gammas]
    if not models:
        raise BundleError("bundle has no section-cut samples")

    frames = {}
    for model in models:
        frame = read_csv(bundle.gammas[model])
        if frame.empty:
            raise BundleError(f"gamma samples for {model} are empty")
        frames[model] = frame

    fig, axes = plt.subplots(1, len(models), figsize=(4.0 * len(models), 3.4),
                             sharey=True, squeeze=False)
    companion = []
    for ax, model in zip(axes[0], models):
        frame = frames[model]
        for t_val, group in frame.groupby("t"):
            ax.plot(group["s"], group["value"], label=f"t={t_val:g}")
            for _, row in group.iterrows():
                companion.append({"model": model, "t": row["t"],
                                  "s": row["s"], "value": row["value"]})
        ax.set_title(model.replace("_", " "))
        ax.set_xlabel("s [m]")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("concentration")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()

    out_png = out_dir / "gamma.png"
    _save(fig, out_png)
    import pandas as pd

    _write_companion(pd.DataFrame(companion, columns=["model", "t", "s", "value"]),
                     out_dir / "gamma_data.csv")
    return out_png


def plot_snapshots(bundle: RunBundle, out_dir: Path) -> Path:
    """Contour panels: release state, truth, baseline, filter at final time."""
    times = bundle.snapshot_times()
    if not times:
        raise BundleError("bundle has no snapshots")
    t0, t_final = times[0], times[-1]
    wanted = [(t0, "truth"), (t_final, "truth"), (t_final, "baseline")]
    filter_models = sorted({m for t, m in bundle.snapshots
                            if m.startswith("filter") and t == t_final})
    if filter_models:
        label = _pick_filter_label([m.removeprefix("filter_theta") for m in filter_models])
        wanted.append((t_final, f"filter_theta{label}"))
    panels = [(t, m) for t, m in wanted if (t, m) in bundle.snapshots]
    if not panels:
        raise BundleError("no matching snapshot panels")

    h = bundle.cell_size()
    ncol = 2
    nrow = math.ceil(len(panels) / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(5.2 * ncol, 4.4 * nrow),
                             squeeze=False)
    companion = []
    vmax = 0.0
    fields = {}
    for key in panels:
        field, frame = snapshot_field(bundle, *key)
        fields[key] = (field, frame)
        vmax = max(vmax, float(np.nanmax(field)))
    for ax, key in zip(axes.ravel(), panels):
        field, frame = fields[key]
        ny, nx = field.shape
        im = ax.imshow(field, origin="lower", extent=(0, nx * h, 0, ny * h),
                       cmap="viridis", vmin=0.0, vmax=vmax, interpolation="nearest")
        ax.set_title(f"{key[1].replace('_', ' ')}, t={key[0]}")
        for _, row in frame.iterrows():
            companion.append({"t": key[0], "model": key[1],
                              "cell_x_index": int(row["cell_x_index"]),
                              "cell_y_index": int(row["cell_y_index"]),
                              "concentration": row["concentration"]})
    for ax in axes.ravel()[len(panels):]:
        ax.axis("off")
    fig.colorbar(im, ax=axes, label="concentration", shrink=0.8)

    out_png = out_dir / "snapshots.png"
    _save(fig, out_png)
    import pandas as pd

    _write_companion(pd.DataFrame(
        companion, columns=["t", "model", "cell_x_index", "cell_y_index", "concentration"]),
        out_dir / "snapshots_data.csv")
    return out_png
