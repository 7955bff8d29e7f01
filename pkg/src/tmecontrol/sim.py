"""Surrogate stochastic agent-based tumor microenvironment simulator.

A 2-D toroidal lattice holds at most one agent per site. Each step visits
the agents present at the start of the step in random order and applies
local rules for proliferation, death, killing, exhaustion, activation,
macrophage polarization and migration (with tumor self-adhesion).
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import _simkernel
from .errors import ConfigurationError, InputDataError
from .rng import stream


class CellType(enum.IntEnum):
    TUMOR = 0
    T_NAIVE = 1
    T_EFF = 2
    T_EXH = 3
    M0 = 4
    M1 = 5
    M2 = 6

    @property
    def token(self) -> str:
        return CELL_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "CellType":
        try:
            return cls(CELL_TOKENS.index(token))
        except ValueError:
            raise ValueError(f"unknown cell_type token {token!r}") from None


CELL_TOKENS = ("tumor", "t_naive", "t_eff", "t_exh", "m0", "m1", "m2")
N_CELL_TYPES = len(CELL_TOKENS)

# name, lower bound, upper bound, description
PARAMETERS = (
    ("p_move_tumor", 0.33, 0.37, "tumor migration probability per step"),
    ("p_move_t", 0.38, 0.42, "T cell migration probability per step"),
    ("p_move_mac", 0.28, 0.32, "macrophage migration probability per step"),
    ("p_prolif_tumor", 0.036, 0.04, "tumor division probability per step"),
    ("p_prolif_teff", 0.048, 0.052, "effector expansion probability per tumor-contact step"),
    ("p_death_tumor", 0.0028, 0.0032, "spontaneous tumor death probability per step"),
    ("p_death_teff", 0.0028, 0.0032, "effector death probability per step"),
    ("p_death_texh", 0.0019, 0.0021, "exhausted T death probability per step, scaled by 1 + (tumor contacts)^3 / 16"),
    ("p_kill", 0.095, 0.105, "effector kill probability per tumor-contact step"),
    ("p_act", 0.09, 0.11, "naive T activation probability per tumor-contact step"),
    ("p_pol", 0.045, 0.055, "M0 polarization probability per step"),
    ("f_m1", 1.45, 1.55, "kill multiplier next to an M1 macrophage"),
    ("f_m2", 1.45, 1.55, "exhaustion multiplier next to an M2 macrophage"),
    ("r_exh", 0.001, 0.1, "T cell exhaustion probability per tumor-contact step"),
    ("r_adh", 0.0, 1.0, "tumor self-adhesion: rejection weight for moves that lose tumor neighbours"),
    ("p_recruit", 0.00028, 0.00032, "chemokine-driven naive T influx probability per empty site per step"),
    ("s_1", 0.0, 1.0, "secretion proxy (inert channel)"),
    ("s_2", 0.0, 1.0, "secretion proxy (inert channel)"),
    ("s_3", 0.0, 1.0, "secretion proxy (inert channel)"),
    ("s_4", 0.0, 1.0, "secretion proxy (inert channel)"),
    ("s_5", 0.0, 1.0, "secretion proxy (inert channel)"),
)
PARAM_NAMES = tuple(p[0] for p in PARAMETERS)
PARAM_INDEX = {name: i for i, name in enumerate(PARAM_NAMES)}
N_PARAMS = len(PARAMETERS)
DEFAULT_BOUNDS = np.array([[p[1], p[2]] for p in PARAMETERS])

# the rates that are probabilities (everything except the two multipliers and the proxies)
_PROBABILITY_SLOTS = [i for i, n in enumerate(PARAM_NAMES) if not n.startswith(("f_", "s_"))]


def nominal_parameters(**overrides: float) -> np.ndarray:
    """Midpoint of the default bounds, with optional named overrides."""
    p = DEFAULT_BOUNDS.mean(axis=1)
    for name, value in overrides.items():
        if name not in PARAM_INDEX:
            raise ConfigurationError(f"unknown parameter {name!r}")
        p[PARAM_INDEX[name]] = value
    return p


def check_parameters(params) -> np.ndarray:
    p = np.asarray(params, dtype=np.float64)
    if p.shape != (N_PARAMS,):
        raise ConfigurationError(f"parameter vector must have length {N_PARAMS}, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ConfigurationError("parameters must be finite and non-negative")
    if np.any(p[_PROBABILITY_SLOTS] > 1):
        bad = [PARAM_NAMES[i] for i in _PROBABILITY_SLOTS if p[i] > 1]
        raise ConfigurationError(f"probabilities above 1: {bad}")
    return p


class Agent(NamedTuple):
    x: int
    y: int
    cell_type: CellType


@dataclass(frozen=True, eq=False)
class AgentConfiguration:
    """All agents at one simulation step, stored column-wise."""

    step: int
    grid_size: int
    x: np.ndarray
    y: np.ndarray
    cell_type: np.ndarray

    @classmethod
    def from_grid(cls, step: int, grid: np.ndarray) -> "AgentConfiguration":
        y, x = np.nonzero(grid >= 0)
        return cls(step, grid.shape[0], x.astype(np.int32), y.astype(np.int32), grid[y, x].astype(np.int8))

    @classmethod
    def from_agents(cls, step: int, grid_size: int, agents: Sequence) -> "AgentConfiguration":
        if len(agents) == 0:
            e = np.zeros(0, dtype=np.int32)
            return cls(step, grid_size, e, e.copy(), np.zeros(0, dtype=np.int8))
        arr = np.array([(a[0], a[1], int(a[2])) for a in agents], dtype=np.int64)
        cfg = cls(step, grid_size, arr[:, 0].astype(np.int32), arr[:, 1].astype(np.int32), arr[:, 2].astype(np.int8))
        cfg.to_grid()  # validates bounds and exclusivity
        return cfg

    def __len__(self) -> int:
        return len(self.x)

    @property
    def agents(self) -> list[Agent]:
        return [Agent(int(a), int(b), CellType(int(c))) for a, b, c in zip(self.x, self.y, self.cell_type)]

    def counts(self) -> np.ndarray:
        return np.bincount(self.cell_type.astype(np.int64), minlength=N_CELL_TYPES)

    def to_grid(self) -> np.ndarray:
        G = self.grid_size
        if len(self) and (self.x.min() < 0 or self.y.min() < 0 or self.x.max() >= G or self.y.max() >= G):
            raise ConfigurationError("agent coordinates outside the grid")
        grid = np.full((G, G), -1, dtype=np.int8)
        grid[self.y, self.x] = self.cell_type
        if np.count_nonzero(grid >= 0) != len(self):
            raise ConfigurationError("two agents share a lattice site")
        return grid

    def same_agents(self, other: "AgentConfiguration") -> bool:
        return self.grid_size == other.grid_size and np.array_equal(self.to_grid(), other.to_grid())


@dataclass
class InitialCondition:
    """Central tumor disk inside an annulus of mixed immune cells."""

    tumor_fraction: float = 0.08
    immune_fraction: float = 0.04
    # naive T, effector T, exhausted T, M0 shares of the immune population
    immune_mix: tuple = (0.35, 0.25, 0.0, 0.40)
    jitter: float = 1.5

    def validate(self):
        if self.tumor_fraction < 0 or self.immune_fraction < 0:
            raise ConfigurationError("initial population fractions must be non-negative")
        if len(self.immune_mix) != 4 or min(self.immune_mix) < 0 or sum(self.immune_mix) <= 0:
            raise ConfigurationError("immune_mix needs four non-negative shares")


def initial_grid(grid_size: int, rng: np.random.Generator, init: InitialCondition | None = None) -> np.ndarray:
    init = init or InitialCondition()
    init.validate()
    G = int(grid_size)
    n_sites = G * G
    n_tumor = int(round(init.tumor_fraction * n_sites))
    n_immune = int(round(init.immune_fraction * n_sites))
    if G < 3 or n_tumor + n_immune > n_sites:
        raise ConfigurationError(f"initial population {n_tumor + n_immune} does not fit a {G}x{G} grid")
    yy, xx = np.mgrid[0:G, 0:G]
    c = (G - 1) / 2.0
    dist = np.hypot(yy - c, xx - c).ravel() + rng.uniform(0.0, init.jitter, n_sites)
    order = np.argsort(dist, kind="stable")
    grid = np.full(n_sites, -1, dtype=np.int8)
    grid[order[:n_tumor]] = CellType.TUMOR
    # immune cells scattered over a ring about three times their number
    ring = order[n_tumor:n_tumor + min(3 * n_immune, n_sites - n_tumor)]
    chosen = rng.choice(ring, size=n_immune, replace=False) if n_immune else ring[:0]
    mix = np.asarray(init.immune_mix, dtype=float)
    counts = np.floor(mix / mix.sum() * n_immune).astype(int)
    counts[np.argmax(mix)] += n_immune - counts.sum()
    types = np.repeat(np.array([CellType.T_NAIVE, CellType.T_EFF, CellType.T_EXH, CellType.M0], dtype=np.int8), counts)
    grid[chosen] = rng.permutation(types)
    return grid.reshape(G, G)


_RECRUIT = PARAM_INDEX["p_recruit"]


def _recruit(grid, rate, rng):
    """Naive T cells enter at uniformly drawn sites that happen to be empty."""
    flat = grid.reshape(-1)
    n = rng.binomial(flat.size, rate) if rate > 0 else 0
    if n:
        sites = rng.integers(0, flat.size, n)
        sites = sites[flat[sites] < 0]
        flat[sites] = CellType.T_NAIVE


def simulate(params, seed: int, n_steps: int, grid_size: int = 100,
             init: InitialCondition | None = None) -> list[AgentConfiguration]:
    """Run one trajectory; returns ``n_steps + 1`` configurations including the initial one."""
    p = check_parameters(params)
    if n_steps < 0:
        raise ConfigurationError("n_steps must be non-negative")
    rng = np.random.default_rng(seed)
    grid = initial_grid(grid_size, rng, init)
    stamp = np.full(grid.shape, -1, dtype=np.int32)
    out = [AgentConfiguration.from_grid(0, grid)]
    for k in range(1, n_steps + 1):
        ys, xs = np.nonzero(grid >= 0)
        perm = rng.permutation(len(ys))
        u = rng.random((len(ys), _simkernel.N_UNIFORMS))
        _simkernel.step(grid, stamp, ys[perm].astype(np.int64), xs[perm].astype(np.int64), u, p, k)
        _recruit(grid, p[_RECRUIT], rng)
        out.append(AgentConfiguration.from_grid(k, grid))
    return out


@dataclass
class EnsembleSpec:
    n_params: int = 50
    n_seeds: int = 3
    n_steps: int = 646
    grid_size: int = 100
    bounds: np.ndarray = field(default_factory=lambda: DEFAULT_BOUNDS.copy())
    rng_seed: int = 0
    init: InitialCondition = field(default_factory=InitialCondition)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.n_params < 1 or self.n_seeds < 1 or self.n_steps < 1:
            raise ConfigurationError("n_params, n_seeds and n_steps must all be >= 1")
        if self.bounds.shape != (N_PARAMS, 2):
            raise ConfigurationError(f"bounds must have shape ({N_PARAMS}, 2)")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            bad = [PARAM_NAMES[i] for i in np.nonzero(self.bounds[:, 0] >= self.bounds[:, 1])[0]]
            raise ConfigurationError(f"invalid bounds (lo >= hi) for {bad}")
        if self.bounds[PARAM_INDEX["r_exh"], 0] <= 0:
            raise ConfigurationError("r_exh lower bound must be positive")

    @property
    def n_trajectories(self) -> int:
        return self.n_params * self.n_seeds


def latin_hypercube_sample(spec: EnsembleSpec) -> np.ndarray:
    """``(n_params, 21)`` Latin hypercube over ``spec.bounds``.

    Each dimension is cut into ``n_params`` equal strata and every stratum
    receives exactly one sample.
    """
    n = spec.n_params
    lo, hi = spec.bounds[:, 0], spec.bounds[:, 1]
    if np.any(lo >= hi):
        raise ConfigurationError("invalid bounds (lo >= hi)")
    rng = np.random.default_rng(stream(spec.rng_seed, "lhs"))
    strata = np.stack([rng.permutation(n) for _ in range(N_PARAMS)], axis=1)
    unit = (strata + rng.random((n, N_PARAMS))) / n
    out = lo + (hi - lo) * unit
    # guard against rounding into the next stratum
    top = lo + (hi - lo) * (strata + 1) / n
    return np.minimum(out, np.nextafter(top, lo))


def trajectory_seed(master_seed: int, index: int, batch: str = "trajectory") -> int:
    return int(stream(master_seed, batch, index).generate_state(1, np.uint32)[0])


@dataclass
class EnsembleDataset:
    params: np.ndarray            # (n_trajectories, 21)
    seeds: np.ndarray             # (n_trajectories,)
    trajectories: list            # list of list[AgentConfiguration]

    @property
    def trajectory_ids(self) -> list[int]:
        return list(range(len(self.trajectories)))

    def __len__(self):
        return len(self.trajectories)


def ensemble_plan(spec: EnsembleSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-trajectory parameter rows and seeds; trajectory ``i*n_seeds + r`` is replicate r of sample i."""
    samples = latin_hypercube_sample(spec)
    params = np.repeat(samples, spec.n_seeds, axis=0)
    seeds = np.array([trajectory_seed(spec.rng_seed, i) for i in range(spec.n_trajectories)], dtype=np.int64)
    return params, seeds


def iter_ensemble(spec: EnsembleSpec, params: np.ndarray | None = None,
                  seeds: np.ndarray | None = None) -> Iterator[tuple[int, np.ndarray, int, list]]:
    if params is None or seeds is None:
        params, seeds = ensemble_plan(spec)
    for i in range(len(params)):
        traj = simulate(params[i], int(seeds[i]), spec.n_steps, spec.grid_size, spec.init)
        yield i, params[i], int(seeds[i]), traj


def generate_ensemble(spec: EnsembleSpec) -> EnsembleDataset:
    params, seeds = ensemble_plan(spec)
    trajs = [t for _, _, _, t in iter_ensemble(spec, params, seeds)]
    return EnsembleDataset(params, seeds, trajs)


# ---- file interfaces -------------------------------------------------------

def write_trajectory_csv(path, trajectory: Sequence[AgentConfiguration]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "x", "y", "cell_type"])
        for cfg in trajectory:
            for x, y, c in zip(cfg.x.tolist(), cfg.y.tolist(), cfg.cell_type.tolist()):
                w.writerow([cfg.step, x, y, CELL_TOKENS[c]])


def read_trajectory_csv(path, grid_size: int) -> list[AgentConfiguration]:
    path = Path(path)
    if not path.exists():
        raise InputDataError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["step", "x", "y", "cell_type"]:
            raise InputDataError(f"{path}: expected header step,x,y,cell_type, got {header}")
        rows = list(r)
    if not rows:
        return []
    steps = np.array([int(row[0]) for row in rows])
    xs = np.array([int(row[1]) for row in rows], dtype=np.int32)
    ys = np.array([int(row[2]) for row in rows], dtype=np.int32)
    cs = np.array([CELL_TOKENS.index(row[3]) if row[3] in CELL_TOKENS else -1 for row in rows], dtype=np.int8)
    if np.any(cs < 0):
        bad = rows[int(np.argmax(cs < 0))][3]
        raise InputDataError(f"{path}: column cell_type has unknown token {bad!r}")
    out = []
    for k in range(int(steps.max()) + 1):
        m = steps == k
        out.append(AgentConfiguration(k, grid_size, xs[m], ys[m], cs[m]))
    return out


def write_parameter_table(path, params: np.ndarray, seeds: np.ndarray, bounds: np.ndarray = DEFAULT_BOUNDS) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_id", "seed"] + [f"p{i + 1}" for i in range(N_PARAMS)])
        for i, (row, s) in enumerate(zip(params, seeds)):
            w.writerow([i, int(s)] + [repr(float(v)) for v in row])
    side = {
        f"p{i + 1}": {"name": name, "description": desc, "bounds": [float(bounds[i, 0]), float(bounds[i, 1])]}
        for i, (name, _, _, desc) in enumerate(PARAMETERS)
    }
    path.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")


def read_parameter_table(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not Path(path).exists():
        raise InputDataError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        expected = ["trajectory_id", "seed"] + [f"p{i + 1}" for i in range(N_PARAMS)]
        if header != expected:
            missing = [c for c in expected if c not in (header or [])]
            raise InputDataError(f"{path}: parameter table missing columns {missing}")
        rows = list(r)
    ids = np.array([int(row[0]) for row in rows], dtype=np.int64)
    seeds = np.array([int(row[1]) for row in rows], dtype=np.int64)
    params = np.array([[float(v) for v in row[2:]] for row in rows]).reshape(len(rows), N_PARAMS)
    return ids, seeds, params
