"""Discovery and parsing of a run directory's delimited artifacts.

A bundle indexes metrics.csv, path_*.csv, snapshot_*.csv, gamma_*.csv, and
the config echo.  Parsing is read-only; the CSV stamp line (leading '#') is
skipped everywhere.  Snapshot files must agree on the grid dimensions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd


class BundleError(ValueError):
    """Raised for missing, unparsable, or inconsistent artifacts."""


_SNAPSHOT_RE = re.compile(r"snapshot_t(?P<time>[^_]+)_(?P<model>.+)\.csv$")
_PATH_RE = re.compile(r"path_theta(?P<theta>.+)\.csv$")
_GAMMA_RE = re.compile(r"gamma_(?P<model>.+)\.csv$")


def read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#")
    except Exception as exc:
        raise BundleError(f"cannot parse {path.name}: {exc}") from exc


@dataclass
class RunBundle:
    run_dir: Path
    metrics: Path | None = None
    paths: dict = field(default_factory=dict)      # theta label -> csv path
    snapshots: dict = field(default_factory=dict)  # (time, model) -> csv path
    gammas: dict = field(default_factory=dict)     # model -> csv path
    config: dict = field(default_factory=dict)
    grid_shape: tuple = (0, 0)

    def snapshot_times(self):
        return sorted({t for t, _ in self.snapshots}, key=float)

    def final_time(self) -> str:
        times = self.snapshot_times()
        if not times:
            raise BundleError("no snapshots in bundle")
        return times[-1]

    def cell_size(self) -> float:
        return float(self.config.get("config", {}).get("domain", {}).get("h", 1.0))


def load_bundle(run_dir) -> RunBundle:
    """Index and validate one run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise BundleError(f"{run_dir} is not a directory")
    bundle = RunBundle(run_dir=run_dir)

    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        read_csv(metrics)  # parse check
        bundle.metrics = metrics

    for p in sorted(run_dir.iterdir()):
        m = _PATH_RE.match(p.name)
        if m:
            read_csv(p)
            bundle.paths[m.group("theta")] = p
            continue
        m = _SNAPSHOT_RE.match(p.name)
        if m:
            frame = read_csv(p)
            shape = (int(frame["cell_x_index"].max()) + 1,
                     int(frame["cell_y_index"].max()) + 1)
            if bundle.grid_shape == (0, 0):
                bundle.grid_shape = shape
            elif bundle.grid_shape != shape:
                raise BundleError(
                    f"snapshot {p.name} grid {shape} differs from {bundle.grid_shape}")
            bundle.snapshots[(m.group("time"), m.group("model"))] = p
            continue
        m = _GAMMA_RE.match(p.name)
        if m:
            read_csv(p)
            bundle.gammas[m.group("model")] = p

    echo = run_dir / "config_echo.json"
    if echo.exists():
        try:
            bundle.config = json.loads(echo.read_text())
        except json.JSONDecodeError as exc:
            raise BundleError(f"cannot parse config_echo.json: {exc}") from exc
    return bundle


def snapshot_field(bundle: RunBundle, time: str, model: str):
    """Dense (ny, nx) array of one snapshot; masked cells are NaN."""
    import numpy as np

    path = bundle.snapshots.get((time, model))
    if path is None:
        raise BundleError(f"no snapshot for t={time}, model={model}")
    frame = read_csv(path)
    nx, ny = bundle.grid_shape
    grid = np.full((ny, nx), np.nan)
    grid[frame["cell_y_index"], frame["cell_x_index"]] = frame["concentration"]
    return grid, frame
