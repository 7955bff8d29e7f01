"""Command-line orchestration of the simulation-to-control pipeline.

Every stage reads its inputs from and writes its outputs to one output
directory, so stages can be run one at a time or chained with ``pipeline``::

    out/
      config.json
      trajectories/  params.csv, params.json, traj_0000.csv ...
      drug/          params.csv, params.json, traj_0000.csv ...
      features/      features.json, series_0000.csv ..., drug_series_0000.csv ...
      windows/       main.npy, main.csv, drug.npy, drug.csv
      states/        states.csv, drug_states.csv, centroids.npy, clustering.json
      analysis/      kw.csv, basin.json, plot.csv
      msm/           P_<group>.json, P_pooled.json, P_drug.json, groups.json, validation.json
      mdp/           committor.json, policy_<group>.csv, values_<group>.csv, strategies.json, replay.json
      snapshot/      holdout.json, mapping.json

Exit codes: 0 success, 2 configuration error, 3 input-data error,
4 numerical-validation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as ft
from . import landscape as ls
from . import mdp, msm, sim
from .errors import ConfigurationError, InputDataError, ValidationFailure
from .rng import generator

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_VALIDATION = 0, 2, 3, 4


# ---- configuration ------------------------------------------------------------

@dataclass
class EnsembleConfig:
    n_params: int = 50
    n_seeds: int = 3
    n_steps: int = 646
    grid_size: int = 100
    bounds: dict = field(default_factory=lambda: {n: [lo, hi] for n, lo, hi, _ in sim.PARAMETERS})
    init: dict = field(default_factory=lambda: dataclasses.asdict(sim.InitialCondition()))
    save_agents: bool = True


@dataclass
class FeatureConfig:
    exclude_macrophage: bool = False


@dataclass
class EmbeddingConfig:
    window_length: int = 51


@dataclass
class ClusteringConfig:
    S: int = 6
    quantize_above: int = 10000
    n_quantize: int = 2000


@dataclass
class MsmConfig:
    bootstrap_resamples: int = 2000
    ck_lags: list = field(default_factory=lambda: [2, 5])
    ck_threshold: float = 0.01
    synthetic_sequences: int = 50
    synthetic_length: int = 1000


@dataclass
class MdpConfig:
    K: int = 646
    L: int = 50
    pi0: str = "uniform_transient"
    target_state: int = 1
    drug_r_exh: float | None = None     # None: lower end of the r_exh sampling range
    drug_n_trajectories: int = 11
    n_rollouts: int = 100
    near_absorbing_override: bool = True


@dataclass
class SnapshotConfig:
    holdout_fraction: float = 0.15
    n_repeats: int = 50
    exclude_macrophage: bool = True


_SECTIONS = {
    "ensemble": EnsembleConfig, "features": FeatureConfig, "embedding": EmbeddingConfig,
    "clustering": ClusteringConfig, "msm": MsmConfig, "mdp": MdpConfig, "snapshot": SnapshotConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "tmecontrol_out"
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    msm: MsmConfig = field(default_factory=MsmConfig)
    mdp: MdpConfig = field(default_factory=MdpConfig)
    snapshot: SnapshotConfig = field(default_factory=SnapshotConfig)

    def to_dict(self) -> dict:
        # JSON-native values, so to_dict == json.loads(to_json)
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(d) - {"seed", "out"} - set(_SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {sorted(unknown)}")
        kw = {k: d[k] for k in ("seed", "out") if k in d}
        for name, klass in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigurationError(f"config field '{name}' must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigurationError(f"unknown field(s) in '{name}': {sorted(bad)}")
            kw[name] = klass(**sub)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON ({exc})") from None

    def validate(self) -> None:
        self.ensemble_spec()
        if self.embedding.window_length < 1 or self.embedding.window_length % 2 == 0:
            raise ConfigurationError("embedding.window_length must be odd and positive")
        if self.clustering.S < 1:
            raise ConfigurationError("clustering.S must be >= 1")
        if self.mdp.K < 1 or self.mdp.L < 1 or self.mdp.n_rollouts < 1:
            raise ConfigurationError("mdp.K, mdp.L and mdp.n_rollouts must be >= 1")
        if not 1 <= self.mdp.target_state <= self.clustering.S:
            raise ConfigurationError("mdp.target_state must be a state label")
        if self.mdp.drug_n_trajectories < 0:
            raise ConfigurationError("mdp.drug_n_trajectories must be >= 0")
        if self.msm.bootstrap_resamples < 1 or not self.msm.ck_lags:
            raise ConfigurationError("msm.bootstrap_resamples must be >= 1 and msm.ck_lags non-empty")
        if not 0 < self.snapshot.holdout_fraction < 1:
            raise ConfigurationError("snapshot.holdout_fraction must lie in (0, 1)")

    def ensemble_spec(self) -> sim.EnsembleSpec:
        e = self.ensemble
        missing = [n for n in sim.PARAM_NAMES if n not in e.bounds]
        extra = [n for n in e.bounds if n not in sim.PARAM_INDEX]
        if missing or extra:
            raise ConfigurationError(f"ensemble.bounds: missing {missing}, unknown {extra}")
        bounds = np.array([e.bounds[n] for n in sim.PARAM_NAMES], dtype=float)
        try:
            init = sim.InitialCondition(**{**e.init, "immune_mix": tuple(e.init.get("immune_mix", (0.35, 0.25, 0.0, 0.40)))})
        except TypeError as exc:
            raise ConfigurationError(f"ensemble.init: {exc}") from None
        init.validate()
        return sim.EnsembleSpec(e.n_params, e.n_seeds, e.n_steps, e.grid_size, bounds, self.seed, init)

    @property
    def feature_set(self) -> ft.FeatureSetSpec:
        return ft.FeatureSetSpec(self.features.exclude_macrophage)


# ---- workspace ------------------------------------------------------------------

class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise InputDataError(f"missing input file: {p}")
        return p

    def write_json(self, obj, *parts) -> None:
        ls.write_json(self.path(*parts), obj)

    def read_json(self, *parts):
        p = self.need(*parts)
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InputDataError(f"{p}: invalid JSON ({exc})") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---- stages -----------------------------------------------------------------------

BATCHES = {"main": ("trajectories", "trajectory"), "drug": ("drug", "drug")}


def drug_plan(cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Parameter rows and seeds for the reduced-exhaustion batch."""
    spec = cfg.ensemble_spec()
    params, _ = sim.ensemble_plan(spec)
    n = cfg.mdp.drug_n_trajectories
    rows = params[np.arange(n) % len(params)].copy()
    lo = spec.bounds[sim.PARAM_INDEX["r_exh"], 0]
    rows[:, sim.PARAM_INDEX["r_exh"]] = lo if cfg.mdp.drug_r_exh is None else cfg.mdp.drug_r_exh
    seeds = np.array([sim.trajectory_seed(cfg.seed, i, "drug") for i in range(n)], dtype=np.int64)
    return rows, seeds


def stage_simulate(cfg: PipelineConfig, ws: Workspace, batches=("main", "drug")) -> dict:
    spec = cfg.ensemble_spec()
    out = {}
    for batch in batches:
        folder, _ = BATCHES[batch]
        params, seeds = sim.ensemble_plan(spec) if batch == "main" else drug_plan(cfg)
        sim.write_parameter_table(ws.path(folder, "params.csv"), params, seeds, spec.bounds)
        trajs = []
        for i in range(len(params)):
            tr = sim.simulate(params[i], int(seeds[i]), spec.n_steps, spec.grid_size, spec.init)
            if cfg.ensemble.save_agents:
                sim.write_trajectory_csv(ws.path(folder, f"traj_{i:04d}.csv"), tr)
            trajs.append(tr)
        _log(f"simulate: {len(trajs)} {batch} trajectories")
        out[batch] = sim.EnsembleDataset(params, seeds, trajs)
    return out


def _load_batch(cfg, ws, batch) -> sim.EnsembleDataset:
    folder, _ = BATCHES[batch]
    ids, seeds, params = sim.read_parameter_table(ws.need(folder, "params.csv"))
    trajs = [sim.read_trajectory_csv(ws.need(folder, f"traj_{i:04d}.csv"), cfg.ensemble.grid_size) for i in ids]
    return sim.EnsembleDataset(params, seeds, trajs)


def stage_featurize(cfg: PipelineConfig, ws: Workspace, data: dict | None = None) -> dict:
    """Raw feature series per trajectory plus the pooled standardization table of the main batch."""
    fs = cfg.feature_set
    out = {}
    for batch, prefix in (("main", "series"), ("drug", "drug_series")):
        if data is not None and batch in data:
            ds = data[batch]
        elif batch == "drug" and not ws.root.joinpath("drug", "params.csv").exists():
            continue
        else:
            ds = _load_batch(cfg, ws, batch)
        series = [ft.featurize_trajectory(tr, fs, trajectory_id=i) for i, tr in enumerate(ds.trajectories)]
        for s in series:
            ft.write_series_csv(ws.path("features", f"{prefix}_{s.trajectory_id:04d}.csv"), s)
        out[batch] = series
    _, table = ft.standardize(out["main"])
    ft.write_feature_sidecar(ws.path("features", "features.json"), fs, table)
    out["table"] = table
    _log(f"featurize: {len(out['main'])} main, {len(out.get('drug', []))} drug series")
    return out


def _load_series(cfg, ws, prefix) -> list:
    names = cfg.feature_set.names
    files = sorted(ws.root.joinpath("features").glob(f"{prefix}_*.csv"))
    return [ft.read_series_csv(p, int(p.stem.rsplit("_", 1)[1]), names) for p in files]


def _load_table(ws) -> ft.StandardizationTable:
    side = ws.read_json("features", "features.json")
    if not side.get("standardization"):
        raise InputDataError("features/features.json has no standardization table")
    return ft.StandardizationTable.from_dict(side["standardization"])


def stage_embed(cfg: PipelineConfig, ws: Workspace, feats: dict | None = None) -> dict:
    w = ft.window_radius(cfg.embedding.window_length)
    if feats is None:
        feats = {"main": _load_series(cfg, ws, "series"), "drug": _load_series(cfg, ws, "drug_series"),
                 "table": _load_table(ws)}
        if not feats["main"]:
            raise InputDataError(f"no feature series found in {ws.root / 'features'}")
    table = feats["table"]
    out = {}
    for batch in ("main", "drug"):
        series = feats.get(batch) or []
        if not series:
            continue
        win = ft.EmbeddedWindows.concat([ft.delay_embed(table.apply(s), w) for s in series])
        ft.write_windows(ws.path("windows", f"{batch}.npy").with_suffix(""), win)
        out[batch] = win
    out["table"] = table
    _log(f"embed: {len(out['main'])} main windows of dimension {out['main'].dim}")
    return out


def stage_cluster(cfg: PipelineConfig, ws: Workspace, emb: dict | None = None) -> dict:
    if emb is None:
        emb = {"main": ft.read_windows(ws.need("windows", "main.npy").with_suffix("")), "table": _load_table(ws)}
        if ws.root.joinpath("windows", "drug.npy").exists():
            emb["drug"] = ft.read_windows(ws.root / "windows" / "drug")
    win, table = emb["main"], emb["table"]
    c = cfg.clustering
    cl = ls.cluster_states(win, c.S, order_by=ls.effector_score(win, table), quantize_above=c.quantize_above,
                           n_quantize=c.n_quantize, seed=cfg.seed)
    ls.write_states_csv(ws.path("states", "states.csv"), win, cl.labels)
    np.save(ws.path("states", "centroids.npy"), cl.centroids)
    seqs = cl.sequences(win)
    term = ls.terminal_states(seqs)
    out = {"clustering": cl, "sequences": seqs, "terminal": term, "windows": win}
    if "drug" in emb:
        dlab = cl.assign(emb["drug"].values)
        ls.write_states_csv(ws.path("states", "drug_states.csv"), emb["drug"], dlab)
        out["drug_sequences"] = ls.Clustering(dlab, cl.centroids, cl.S).sequences(emb["drug"])
    info = {
        "S": cl.S,
        "quantized": cl.quantized,
        "ordering": "decreasing mean (prop_t_eff - prop_tumor) at the window centre",
        "terminal_state": {str(t): s for t, s in term.items()},
        "state_tags": {str(s): v for s, v in ls.tag_states(term, cl.S).items()},
        "windows_per_state": {str(s): int(np.sum(cl.labels == s)) for s in range(1, cl.S + 1)},
    }
    ws.write_json(info, "states", "clustering.json")
    proj = ls.pca_project(win.values)
    ls.write_plot_csv(ws.path("analysis", "plot.csv"), win, proj.coords, cl.labels)
    _log(f"cluster: S={cl.S}, terminal counts {np.bincount(list(term.values()), minlength=cl.S + 1)[1:].tolist()}")
    return out


def _load_states(ws, name="states.csv") -> dict:
    return ls.read_states_csv(ws.need("states", name))


def _terminal_array(ws, seqs: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Parameter rows and terminal state per main trajectory, aligned by id."""
    ids, _, params = sim.read_parameter_table(ws.need("trajectories", "params.csv"))
    seqs = _load_states(ws) if seqs is None else seqs
    missing = [int(i) for i in ids if int(i) not in seqs]
    if missing:
        raise InputDataError(f"states.csv lacks trajectories {missing[:5]}")
    return params, np.array([int(seqs[int(i)][-1]) for i in ids])


def stage_screen(cfg: PipelineConfig, ws: Workspace, seqs: dict | None = None) -> list:
    params, term = _terminal_array(ws, seqs)
    rows = ls.screen_parameters(params, term, sim.PARAM_NAMES)
    ls.write_kw_csv(ws.path("analysis", "kw.csv"), rows)
    _log("screen-params: top " + ", ".join(f"{r['parameter']} (H={r['H']:.1f})" for r in rows[:2]))
    return rows


def stage_basin(cfg: PipelineConfig, ws: Workspace, seqs: dict | None = None) -> dict:
    params, term = _terminal_array(ws, seqs)
    pts = ls.basin_coordinates(params, sim.PARAM_INDEX["r_exh"], sim.PARAM_INDEX["r_adh"])
    rep = ls.basin_report(ls.fit_basin_model(pts, term))
    rep["coordinates"] = ["log10_r_exh", "r_adh"]
    ws.write_json(rep, "analysis", "basin.json")
    _log(f"basin-map: 2-NN LOO accuracy {rep['accuracy']:.3f}")
    return rep


def stage_estimate_msm(cfg: PipelineConfig, ws: Workspace, seqs: dict | None = None,
                       drug_seqs: dict | None = None) -> dict:
    S = cfg.clustering.S
    seqs = _load_states(ws) if seqs is None else seqs
    if drug_seqs is None and ws.root.joinpath("states", "drug_states.csv").exists():
        drug_seqs = _load_states(ws, "drug_states.csv")
    groups = {t: int(s[-1]) for t, s in seqs.items()}
    mats = msm.estimate_group_matrices(seqs, groups, S)
    for g, P in mats.items():
        msm.write_matrix(ws.path("msm", f"P_{g}.json"), P)
    pooled = msm.estimate_transition_matrix(list(seqs.values()), S)
    msm.write_matrix(ws.path("msm", "P_pooled.json"), pooled)
    out = {"groups": mats, "pooled": pooled}
    if drug_seqs:
        out["drug"] = msm.estimate_transition_matrix(list(drug_seqs.values()), S, group="drug")
        msm.write_matrix(ws.path("msm", "P_drug.json"), out["drug"])
    ws.write_json({"group_of_trajectory": {str(t): str(g) for t, g in groups.items()},
                   "group_sizes": {g: sum(1 for v in groups.values() if str(v) == g) for g in mats}},
                  "msm", "groups.json")
    _log(f"estimate-msm: groups {sorted(mats)}" + (", drug matrix" if "drug" in out else ""))
    return out


def _load_group_matrices(ws) -> tuple[dict, msm.TransitionMatrix]:
    folder = ws.root / "msm"
    files = sorted(p for p in folder.glob("P_*.json") if p.stem not in ("P_pooled", "P_drug"))
    if not files:
        raise InputDataError(f"no group matrices found in {folder}")
    mats = {p.stem[2:]: msm.read_matrix(p) for p in files}
    return mats, msm.read_matrix(ws.need("msm", "P_drug.json"))


def _fixture_matrices() -> tuple[dict, msm.TransitionMatrix]:
    return {"4": msm.load_fixture("P4"), "6": msm.load_fixture("P6")}, msm.load_fixture("P1")


def _synthetic_sequences(cfg, P, index) -> np.ndarray:
    rng = generator(cfg.seed, "synthetic", index)
    return msm.sample_chain(P, cfg.msm.synthetic_sequences, cfg.msm.synthetic_length, rng,
                            start=mdp.default_pi0(P))


def stage_validate_msm(cfg: PipelineConfig, ws: Workspace, synthetic: bool = False, strict: bool = False) -> dict:
    """Bootstrap, CK and KL reports per matrix; ``strict`` turns a CK excess into a failure."""
    m = cfg.msm
    report = {"source": "synthetic sequences from the shipped fixtures" if synthetic else "estimated",
              "ck_threshold": m.ck_threshold, "matrices": {}}
    if synthetic:
        groups, drug = _fixture_matrices()
        items = [(g, P, _synthetic_sequences(cfg, P, i)) for i, (g, P) in enumerate([*groups.items(), ("drug", drug)])]
        items = [(g, msm.estimate_transition_matrix(list(seqs), P.S, group=g), list(seqs)) for g, P, seqs in items]
    else:
        seqs = _load_states(ws)
        mats, _ = _load_group_matrices(ws)
        groups = ws.read_json("msm", "groups.json")["group_of_trajectory"]
        items = [(g, P, [seqs[int(t)] for t, gg in groups.items() if gg == g]) for g, P in mats.items()]
        if ws.root.joinpath("msm", "P_drug.json").exists() and ws.root.joinpath("states", "drug_states.csv").exists():
            items.append(("drug", msm.read_matrix(ws.root / "msm" / "P_drug.json"),
                          list(_load_states(ws, "drug_states.csv").values())))
    worst = 0.0
    for i, (g, P, seqs) in enumerate(items):
        rep = msm.validation_report(seqs, P, m.bootstrap_resamples, m.ck_lags, seed=cfg.seed)
        report["matrices"][g] = rep
        worst = max([worst] + list(rep["ck_discrepancy"].values()))
    report["ck_max"] = worst
    report["passed"] = worst <= m.ck_threshold
    ws.write_json(report, "msm", "validation.json")
    _log(f"validate-msm: max CK discrepancy {worst:.3g} (threshold {m.ck_threshold})")
    if strict and not report["passed"]:
        raise ValidationFailure(f"Chapman-Kolmogorov discrepancy {worst!r} exceeds {m.ck_threshold!r}")
    return report


def _mdp_inputs(cfg, ws, fixtures: bool):
    groups, drug = _fixture_matrices() if fixtures else _load_group_matrices(ws)
    return groups, drug


def _pi0(cfg, P, override: str | None = None) -> np.ndarray:
    return mdp.parse_pi0(override or cfg.mdp.pi0, P)


def stage_committor(cfg: PipelineConfig, ws: Workspace, fixtures: bool = False, pi0: str | None = None) -> dict:
    groups, drug = _mdp_inputs(cfg, ws, fixtures)
    t = cfg.mdp.target_state
    absorbing = t in drug.absorbing_states()
    if not absorbing and not cfg.mdp.near_absorbing_override:
        raise ValidationFailure(f"target state {t} is not absorbing under the drug matrix")
    ab = msm.absorption_probabilities(drug, t, allow_near_absorbing=not absorbing)
    out = {"target_state": t, "q": [float(v) for v in ab.q], "unreachable_states": ab.unreachable,
           "target_absorbing": absorbing, "near_absorbing_override": not absorbing,
           "source": "fixtures" if fixtures else "estimated", "groups": {}}
    for g, P in groups.items():
        p0 = _pi0(cfg, P, pi0)
        curve = msm.committor_curve(p0, P, ab.q, cfg.mdp.K, group=g)
        out["groups"][g] = {"pi0": [float(v) for v in p0], **curve.to_dict()}
    ws.write_json(out, "mdp", "committor.json")
    _log("committor: Q(0) " + ", ".join(f"{g}: {v['values'][0]:.3f}" for g, v in out["groups"].items()))
    return out


def _specs(cfg, groups, drug) -> dict:
    rho = mdp.target_reward(drug.S, cfg.mdp.target_state)
    return {g: mdp.MdpSpec(P, drug, rho, cfg.mdp.K) for g, P in groups.items()}


def stage_solve_mdp(cfg: PipelineConfig, ws: Workspace, fixtures: bool = False, pi0: str | None = None) -> dict:
    groups, drug = _mdp_inputs(cfg, ws, fixtures)
    results, pis = {}, {}
    for g, spec in _specs(cfg, groups, drug).items():
        values, policy = mdp.backward_induction(spec)
        mdp.write_policy_csv(ws.path("mdp", f"policy_{g}.csv"), policy)
        mdp.write_value_csv(ws.path("mdp", f"values_{g}.csv"), values)
        pis[g] = _pi0(cfg, groups[g], pi0)
        results[g] = mdp.compare_strategies(spec, pis[g], cfg.mdp.L)
    rep = mdp.strategy_report(results, pis, cfg.mdp.K, cfg.mdp.L)
    rep["pi0_convention"] = pi0 or cfg.mdp.pi0
    rep["source"] = "fixtures" if fixtures else "estimated"
    ws.write_json(rep, "mdp", "strategies.json")
    _log("solve-mdp: " + "; ".join(f"{g}: optimal {r['optimal']:.3f}" for g, r in results.items()))
    return rep


def _policies(cfg, ws, spec, g) -> dict:
    pols = mdp.make_fixed_policies(spec.S, spec.K, cfg.mdp.L)
    path = ws.root / "mdp" / f"policy_{g}.csv"
    if path.exists():
        pol = mdp.read_policy_csv(path)
        if pol.actions.shape != (spec.S, spec.K):
            raise InputDataError(f"{path}: policy shape {pol.actions.shape} does not match K={spec.K}")
    else:
        _, pol = mdp.backward_induction(spec)
    pols["optimal"] = pol
    return pols


def stage_evaluate(cfg: PipelineConfig, ws: Workspace, fixtures: bool = False, pi0: str | None = None) -> dict:
    """Strategy values using stored optimal policies where present."""
    groups, drug = _mdp_inputs(cfg, ws, fixtures)
    results, pis = {}, {}
    for g, spec in _specs(cfg, groups, drug).items():
        pols = _policies(cfg, ws, spec, g)
        pis[g] = _pi0(cfg, groups[g], pi0)
        results[g] = {name: mdp.evaluate_policy(spec, pols[name], pis[g]) for name in mdp.STRATEGIES}
    rep = mdp.strategy_report(results, pis, cfg.mdp.K, cfg.mdp.L)
    rep["pi0_convention"] = pi0 or cfg.mdp.pi0
    rep["source"] = "fixtures" if fixtures else "estimated"
    ws.write_json(rep, "mdp", "strategies.json")
    return rep


def stage_replay(cfg: PipelineConfig, ws: Workspace, fixtures: bool = False, pi0: str | None = None) -> dict:
    """Closed-loop Monte Carlo replay from each trajectory's initial state.

    With fixtures there are no trajectories, so 100 initial states per group
    are drawn from pi0.
    """
    groups, drug = _mdp_inputs(cfg, ws, fixtures)
    if not fixtures:
        seqs = _load_states(ws)
        member = ws.read_json("msm", "groups.json")["group_of_trajectory"]
    out = {"n_rollouts_per_start": cfg.mdp.n_rollouts, "source": "fixtures" if fixtures else "estimated",
           "groups": {}}
    for gi, (g, spec) in enumerate(_specs(cfg, groups, drug).items()):
        if fixtures:
            p0 = _pi0(cfg, groups[g], pi0)
            starts = generator(cfg.seed, "starts", gi).choice(spec.S, size=100, p=p0) + 1
        else:
            starts = np.array([int(seqs[int(t)][0]) for t, gg in member.items() if gg == g])
        pols = _policies(cfg, ws, spec, g)
        res = {}
        for name in mdp.STRATEGIES:
            r = mdp.replay_trajectories(starts, pols[name], spec, cfg.mdp.n_rollouts, seed=cfg.seed,
                                        target=cfg.mdp.target_state)
            se = r.standard_error
            res[name] = {"fraction": r.fraction, "theoretical": r.theoretical, "standard_error": se,
                         "rollouts": r.n, "reached": r.reached,
                         "within_3se": abs(r.fraction - r.theoretical) <= 3 * se + 1e-12}
        out["groups"][g] = {"n_starts": int(len(starts)), "strategies": res}
    ws.write_json(out, "mdp", "replay.json")
    _log("replay: " + "; ".join(f"{g}: optimal {v['strategies']['optimal']['fraction']:.3f}"
                                for g, v in out["groups"].items()))
    return out


def _snapshot_indices(cfg, names) -> list:
    want = ft.FeatureSetSpec(cfg.snapshot.exclude_macrophage).names
    return [names.index(n) for n in want if n in names]


def stage_map_snapshot(cfg: PipelineConfig, ws: Workspace, snapshot: str | None = None,
                       step: int | None = None) -> dict:
    """Map one agent configuration to a state, or run the hold-out experiment."""
    win = ft.read_windows(ws.need("windows", "main.npy").with_suffix(""))
    labels_by = ls.read_states_csv(ws.need("states", "states.csv"))
    table = _load_table(ws)
    idx = _snapshot_indices(cfg, table.names)
    # labels aligned to window order
    pos = {}
    for t, seq in labels_by.items():
        steps = np.sort(win.center_step[win.trajectory_id == t])
        for k, s in zip(steps, seq):
            pos[(t, int(k))] = int(s)
    labels = np.array([pos[(int(t), int(k))] for t, k in zip(win.trajectory_id, win.center_step)])
    if snapshot is None:
        h = ls.snapshot_holdout(win, labels, idx, cfg.snapshot.holdout_fraction, cfg.snapshot.n_repeats, cfg.seed)
        out = {"per_state_auc": {str(s): v for s, v in h.per_state.items()}, "mean_auc": h.mean_auc,
               "accuracy": h.accuracy, "n_repeats": cfg.snapshot.n_repeats,
               "fraction": cfg.snapshot.holdout_fraction, "features": [table.names[i] for i in idx]}
        ws.write_json(out, "snapshot", "holdout.json")
        _log(f"map-snapshot: hold-out mean AUC {h.mean_auc:.3f}")
        return out
    traj = sim.read_trajectory_csv(snapshot, cfg.ensemble.grid_size)
    if not traj:
        raise InputDataError(f"{snapshot}: no agents")
    cfg_k = traj[-1] if step is None else traj[step]
    obs = ft.observe(cfg_k, cfg.feature_set)
    z = table.apply_vector(obs)[idx]
    ref = win.center_columns()[:, idx]
    state = ls.assign_snapshot(z, ref, labels)
    scores = ls.state_scores(z[None, :], ref, labels, int(labels.max()))[0]
    out = {"snapshot": str(snapshot), "step": int(cfg_k.step), "state": state,
           "scores": {str(s + 1): float(v) for s, v in enumerate(scores)},
           "features": [table.names[i] for i in idx]}
    ws.write_json(out, "snapshot", "mapping.json")
    _log(f"map-snapshot: state {state}")
    return out


def run_pipeline(cfg: PipelineConfig, ws: Workspace) -> dict:
    ws.write_json(cfg.to_dict(), "config.json")
    data = stage_simulate(cfg, ws)
    feats = stage_featurize(cfg, ws, data)
    emb = stage_embed(cfg, ws, feats)
    cl = stage_cluster(cfg, ws, emb)
    stage_screen(cfg, ws, cl["sequences"])
    stage_basin(cfg, ws, cl["sequences"])
    stage_estimate_msm(cfg, ws, cl["sequences"], cl.get("drug_sequences"))
    report = {"validation": stage_validate_msm(cfg, ws)}
    if ws.root.joinpath("msm", "P_drug.json").exists():
        report["committor"] = stage_committor(cfg, ws)
        report["strategies"] = stage_solve_mdp(cfg, ws)
        report["replay"] = stage_replay(cfg, ws)
    report["snapshot"] = stage_map_snapshot(cfg, ws)
    return report


# ---- argument handling ---------------------------------------------------------------

SUBCOMMANDS = ("simulate", "featurize", "embed", "cluster", "screen-params", "basin-map", "estimate-msm",
               "validate-msm", "committor", "solve-mdp", "evaluate-strategies", "replay", "map-snapshot",
               "pipeline", "print-config")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults used for absent fields)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    mdp_opts = argparse.ArgumentParser(add_help=False)
    mdp_opts.add_argument("--fixtures", action="store_true", help="use the shipped reference matrices")
    mdp_opts.add_argument("--pi0", help="uniform_transient, point:<state> or a JSON vector")

    p = argparse.ArgumentParser(prog="tmecontrol", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("simulate", parents=[common], help="run the LHS ensemble and the drug batch")
    sp.add_argument("--batch", choices=("main", "drug", "both"), default="both")
    sub.add_parser("featurize", parents=[common], help="spatial statistics per configuration")
    sub.add_parser("embed", parents=[common], help="standardize and delay-embed feature series")
    sub.add_parser("cluster", parents=[common], help="Ward clustering of embedded windows into S states")
    sub.add_parser("screen-params", parents=[common], help="Kruskal-Wallis screen against terminal state")
    sub.add_parser("basin-map", parents=[common], help="2-NN basin classifier with leave-one-out accuracy")
    sub.add_parser("estimate-msm", parents=[common], help="group-conditioned and drug transition matrices")
    sp = sub.add_parser("validate-msm", parents=[common], help="bootstrap, Chapman-Kolmogorov and KL checks")
    sp.add_argument("--synthetic", action="store_true", help="validate on sequences sampled from the fixtures")
    sp.add_argument("--strict", action="store_true", help="exit 4 when the CK discrepancy exceeds the threshold")
    sub.add_parser("committor", parents=[common, mdp_opts], help="absorption vector and committor curves")
    sub.add_parser("solve-mdp", parents=[common, mdp_opts], help="backward induction and strategy comparison")
    sub.add_parser("evaluate-strategies", parents=[common, mdp_opts], help="expected outcome of each strategy")
    sub.add_parser("replay", parents=[common, mdp_opts], help="closed-loop Monte Carlo replay")
    sp = sub.add_parser("map-snapshot", parents=[common], help="map a static configuration to a state")
    sp.add_argument("--snapshot", help="agent CSV (step,x,y,cell_type); omit to run the hold-out experiment")
    sp.add_argument("--step", type=int, help="step inside the snapshot file (default: last)")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    return p


def load_config(args) -> PipelineConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"missing config file: {path}")
        cfg = PipelineConfig.from_json(path.read_text())
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.out is not None:
        cfg.out = str(args.out)
    cfg.validate()
    return cfg


def dispatch(args) -> None:
    cfg = load_config(args)
    if args.command == "print-config":
        sys.stdout.write(cfg.to_json())
        return
    ws = Workspace(cfg.out)
    cmd = args.command
    fixtures = getattr(args, "fixtures", False)
    pi0 = getattr(args, "pi0", None)
    if cmd == "simulate":
        stage_simulate(cfg, ws, ("main", "drug") if args.batch == "both" else (args.batch,))
    elif cmd == "featurize":
        stage_featurize(cfg, ws)
    elif cmd == "embed":
        stage_embed(cfg, ws)
    elif cmd == "cluster":
        stage_cluster(cfg, ws)
    elif cmd == "screen-params":
        stage_screen(cfg, ws)
    elif cmd == "basin-map":
        stage_basin(cfg, ws)
    elif cmd == "estimate-msm":
        stage_estimate_msm(cfg, ws)
    elif cmd == "validate-msm":
        stage_validate_msm(cfg, ws, synthetic=args.synthetic, strict=args.strict)
    elif cmd == "committor":
        stage_committor(cfg, ws, fixtures, pi0)
    elif cmd == "solve-mdp":
        stage_solve_mdp(cfg, ws, fixtures, pi0)
    elif cmd == "evaluate-strategies":
        stage_evaluate(cfg, ws, fixtures, pi0)
    elif cmd == "replay":
        stage_replay(cfg, ws, fixtures, pi0)
    elif cmd == "map-snapshot":
        stage_map_snapshot(cfg, ws, args.snapshot, args.step)
    elif cmd == "pipeline":
        run_pipeline(cfg, ws)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputDataError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValidationFailure as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
