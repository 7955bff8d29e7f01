"""Observation map from agent configurations to spatial statistics, pooled
z-scoring, and delay-coordinate embedding."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import _featkernels as fk
from .errors import ConfigurationError, InputDataError
from .sim import CELL_TOKENS, N_CELL_TYPES, AgentConfiguration

FEATURE_NAMES = (
    "prop_tumor",
    "prop_t_naive",
    "prop_t_eff",
    "prop_t_exh",
    "prop_m0",
    "prop_m1",
    "prop_m2",
    "tumor_t_mixing",        # share of tumor-occupied neighbour pairs whose partner is a T cell
    "eff_infiltration",      # share of effectors with >= 1 tumor neighbour
    "exh_contact",           # share of exhausted T cells with >= 1 tumor neighbour
    "tumor_degree",          # mean number of tumor neighbours per tumor cell (0..8)
    "tumor_components",      # 8-connected tumor clusters per tumor cell
    "tumor_t_distance",      # mean Chebyshev distance tumor -> nearest T cell, / grid size
    "density",               # agents / lattice sites
    "empty",                 # 1 for a configuration without agents
)
MACROPHAGE_FEATURES = ("prop_m0", "prop_m1", "prop_m2")
# value used when tumor is present but no T cell exists (largest attainable distance on a torus)
NO_T_CELL_DISTANCE = 0.5


@dataclass(frozen=True)
class FeatureSetSpec:
    exclude_macrophage: bool = False

    @property
    def names(self) -> tuple:
        if self.exclude_macrophage:
            return tuple(n for n in FEATURE_NAMES if n not in MACROPHAGE_FEATURES)
        return FEATURE_NAMES

    @property
    def indices(self) -> np.ndarray:
        """Positions of this set's features inside the full feature vector."""
        return np.array([FEATURE_NAMES.index(n) for n in self.names])

    @property
    def M(self) -> int:
        return len(self.names)


FULL_FEATURES = FeatureSetSpec()


def observe_grid(grid: np.ndarray) -> np.ndarray:
    """Full feature vector for a lattice occupancy grid."""
    G = grid.shape[0]
    out = np.zeros(len(FEATURE_NAMES))
    occ = grid[grid >= 0].astype(np.int64)
    n = occ.size
    if n == 0:
        out[14] = 1.0
        return out
    counts = np.bincount(occ, minlength=N_CELL_TYPES)
    out[:7] = counts / n
    pairs, tpairs, tt, eff_touch, exh_touch = fk.contacts(grid)
    n_tumor, n_eff, n_exh = counts[0], counts[2], counts[3]
    out[7] = tpairs / pairs if pairs else 0.0
    out[8] = eff_touch / n_eff if n_eff else 0.0
    out[9] = exh_touch / n_exh if n_exh else 0.0
    if n_tumor:
        out[10] = tt / n_tumor
        out[11] = fk.components(grid) / n_tumor
        dsum = fk.tumor_t_distance(grid)
        out[12] = NO_T_CELL_DISTANCE if dsum < 0 else dsum / n_tumor / G
    out[13] = n / (G * G)
    return out


def observe(config: AgentConfiguration, feature_set: FeatureSetSpec = FULL_FEATURES) -> np.ndarray:
    return observe_grid(config.to_grid())[feature_set.indices]


@dataclass
class ObservationSeries:
    trajectory_id: int
    matrix: np.ndarray                      # (M, K)
    names: tuple = FEATURE_NAMES
    steps: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.names):
            raise ConfigurationError(f"matrix shape {self.matrix.shape} does not match {len(self.names)} features")
        if self.steps is None:
            self.steps = np.arange(self.matrix.shape[1])

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    @property
    def K(self) -> int:
        return self.matrix.shape[1]


def featurize_trajectory(traj: Sequence[AgentConfiguration], feature_set: FeatureSetSpec = FULL_FEATURES,
                         trajectory_id: int = 0) -> ObservationSeries:
    if len(traj) == 0:
        raise InputDataError("cannot featurize an empty trajectory")
    cols = np.stack([observe(cfg, feature_set) for cfg in traj], axis=1)
    return ObservationSeries(trajectory_id, cols, feature_set.names, np.array([c.step for c in traj]))


@dataclass
class StandardizationTable:
    names: tuple
    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.where(self.zero_variance, 1.0, self.std)

    def apply(self, series: ObservationSeries) -> ObservationSeries:
        if tuple(series.names) != tuple(self.names):
            raise InputDataError("feature names differ from the standardization table")
        z = (series.matrix - self.mean[:, None]) / self.scale[:, None]
        return ObservationSeries(series.trajectory_id, z, series.names, series.steps.copy())

    def apply_vector(self, values: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
        idx = np.arange(len(self.names)) if names is None else np.array([self.names.index(n) for n in names])
        return (np.asarray(values) - self.mean[idx]) / self.scale[idx]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "zero_variance": [bool(v) for v in self.zero_variance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationTable":
        return cls(tuple(d["names"]), np.array(d["mean"], float), np.array(d["std"], float),
                   np.array(d["zero_variance"], bool))


def standardize(ensemble: Sequence[ObservationSeries], tol: float = 1e-12):
    """Pooled z-scoring over every trajectory and step.

    Features whose pooled standard deviation is below ``tol`` are only
    centred and are flagged in the returned table.
    """
    if not ensemble:
        raise InputDataError("empty ensemble")
    names = tuple(ensemble[0].names)
    pooled = np.concatenate([s.matrix for s in ensemble], axis=1)
    if pooled.shape[1] < 2:
        raise InputDataError("standardization needs at least two time points")
    mean = pooled.mean(axis=1)
    std = pooled.std(axis=1)
    table = StandardizationTable(names, mean, std, std < tol)
    return [table.apply(s) for s in ensemble], table


class EmbeddedWindow(NamedTuple):
    trajectory_id: int
    center_step: int
    values: np.ndarray


@dataclass
class EmbeddedWindows:
    """A batch of delay-embedded windows, one row per window."""

    trajectory_id: np.ndarray
    center_step: np.ndarray
    values: np.ndarray            # (n_windows, M * (2w + 1))
    M: int
    w: int

    def __len__(self) -> int:
        return len(self.center_step)

    def __iter__(self) -> Iterator[EmbeddedWindow]:
        for t, k, v in zip(self.trajectory_id, self.center_step, self.values):
            yield EmbeddedWindow(int(t), int(k), v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def center_columns(self) -> np.ndarray:
        """Observation at each window's centre, shape (n_windows, M)."""
        return self.values[:, self.w * self.M:(self.w + 1) * self.M]

    @classmethod
    def concat(cls, parts: Sequence["EmbeddedWindows"]) -> "EmbeddedWindows":
        if not parts:
            raise InputDataError("no windows to pool")
        M, w = parts[0].M, parts[0].w
        if any(p.M != M or p.w != w for p in parts):
            raise ConfigurationError("cannot pool windows with different M or w")
        return cls(np.concatenate([p.trajectory_id for p in parts]),
                   np.concatenate([p.center_step for p in parts]),
                   np.concatenate([p.values for p in parts]), M, w)


class TrajectoryTooShort(InputDataError):
    pass


def delay_embed(series: ObservationSeries, w: int) -> EmbeddedWindows:
    """Stack columns ``k-w .. k+w`` for every centre ``w <= k <= K-1-w``."""
    if w < 0:
        raise ConfigurationError("window radius must be non-negative")
    M, K = series.matrix.shape
    L = 2 * w + 1
    if K < L:
        raise TrajectoryTooShort(f"trajectory {series.trajectory_id} has {K} steps, window needs {L}")
    # (K-L+1, L, M) view -> rows are [u_{k-w}, ..., u_{k+w}] concatenated
    view = np.lib.stride_tricks.sliding_window_view(series.matrix.T, L, axis=0)   # (K-L+1, M, L)
    values = np.ascontiguousarray(view.transpose(0, 2, 1).reshape(K - L + 1, L * M))
    centers = series.steps[w:K - w]
    return EmbeddedWindows(np.full(K - L + 1, series.trajectory_id), np.asarray(centers), values, M, w)


def window_radius(length: int) -> int:
    """Radius for an odd window length ``2w + 1``."""
    if length < 1 or length % 2 == 0:
        raise ConfigurationError(f"window length must be odd and positive, got {length}")
    return (length - 1) // 2


# ---- file interfaces -------------------------------------------------------

def write_series_csv(path, series: ObservationSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"f{i + 1}" for i in range(series.M)])
        for k, col in zip(series.steps, series.matrix.T):
            w.writerow([int(k)] + [repr(float(v)) for v in col])


def read_series_csv(path, trajectory_id: int, names: Sequence[str] = FEATURE_NAMES) -> ObservationSeries:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        expected = ["step"] + [f"f{i + 1}" for i in range(len(names))]
        if header != expected:
            raise InputDataError(f"{path}: expected columns {expected}, got {header}")
        rows = [[float(v) for v in row] for row in r]
    arr = np.array(rows).reshape(-1, len(names) + 1)
    return ObservationSeries(trajectory_id, arr[:, 1:].T.copy(), tuple(names), arr[:, 0].astype(np.int64))


def write_feature_sidecar(path, feature_set: FeatureSetSpec, table: StandardizationTable | None) -> None:
    d = {"features": {f"f{i + 1}": n for i, n in enumerate(feature_set.names)},
         "exclude_macrophage": feature_set.exclude_macrophage,
         "standardization": table.to_dict() if table is not None else None}
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def write_windows(prefix, windows: EmbeddedWindows) -> None:
    """``<prefix>.npy`` holds the values; ``<prefix>.csv`` the index columns."""
    prefix = Path(prefix)
    np.save(prefix.with_suffix(".npy"), windows.values)
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_id", "center_step", "M", "w"])
        for t, k in zip(windows.trajectory_id, windows.center_step):
            w.writerow([int(t), int(k), windows.M, windows.w])


def read_windows(prefix) -> EmbeddedWindows:
    prefix = Path(prefix)
    values = np.load(prefix.with_suffix(".npy"))
    with open(prefix.with_suffix(".csv"), newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["trajectory_id", "center_step", "M", "w"]:
            raise InputDataError(f"{prefix}.csv: bad header {header}")
        rows = np.array([[int(v) for v in row] for row in r], dtype=np.int64).reshape(-1, 4)
    if len(rows) != len(values):
        raise InputDataError(f"{prefix}: index has {len(rows)} rows, values have {len(values)}")
    M = int(rows[0, 2]) if len(rows) else 0
    w = int(rows[0, 3]) if len(rows) else 0
    return EmbeddedWindows(rows[:, 0], rows[:, 1], values, M, w)


def write_windows_csv(path, windows: EmbeddedWindows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["trajectory_id", "center_step"] + [f"v{i + 1}" for i in range(windows.dim)])
        for t, k, v in zip(windows.trajectory_id, windows.center_step, windows.values):
            wr.writerow([int(t), int(k)] + [repr(float(x)) for x in v])


__all__ = [
    "CELL_TOKENS", "FEATURE_NAMES", "FeatureSetSpec", "observe", "observe_grid", "featurize_trajectory",
    "ObservationSeries", "standardize", "StandardizationTable", "delay_embed", "EmbeddedWindows",
    "EmbeddedWindow", "window_radius", "TrajectoryTooShort",
]
