"""Finite-horizon treatment scheduling over group-conditioned MSMs.

Binary actions (0 = no drug, 1 = drug) switch between the untreated group
matrix and the drug-condition matrix; the reward is paid only at the horizon.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputDataError
from .msm import ABSORBING_TOL, TransitionMatrix
from .rng import generator

TIE_TOL = 1e-12
STRATEGIES = ("none", "alternating", "immediate", "optimal")


def _entries(P) -> np.ndarray:
    return P.entries if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=float)


@dataclass
class MdpSpec:
    P0: np.ndarray
    P1: np.ndarray
    reward: np.ndarray
    K: int

    def __post_init__(self):
        self.P0 = _entries(self.P0)
        self.P1 = _entries(self.P1)
        self.reward = np.asarray(self.reward, dtype=float)
        S = self.P0.shape[0]
        for name, P in (("P0", self.P0), ("P1", self.P1)):
            if P.shape != (S, S):
                raise ConfigurationError(f"{name} has shape {P.shape}, expected {(S, S)}")
            if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1)) > 1e-9:
                raise ConfigurationError(f"{name} is not row-stochastic")
        if self.reward.shape != (S,):
            raise ConfigurationError(f"reward has shape {self.reward.shape}, expected {(S,)}")
        if np.any(self.reward < 0) or np.any(self.reward > 1):
            raise ConfigurationError("reward entries must lie in [0, 1]")
        if int(self.K) < 1:
            raise ConfigurationError("horizon K must be >= 1")
        self.K = int(self.K)

    @property
    def S(self) -> int:
        return self.P0.shape[0]

    @property
    def stack(self) -> np.ndarray:
        return np.stack([self.P0, self.P1])


def target_reward(S: int, target: int = 1) -> np.ndarray:
    rho = np.zeros(S)
    rho[target - 1] = 1.0
    return rho


@dataclass
class ValueTable:
    V: np.ndarray       # (S, K+1)


@dataclass
class PolicySchedule:
    actions: np.ndarray     # (S, K) in {0, 1}
    kind: str
    L: int | None = None

    @property
    def label(self) -> str:
        return f"alternating(L={self.L})" if self.kind == "alternating" else self.kind


def backward_induction(spec: MdpSpec, tie_tol: float = TIE_TOL) -> tuple[ValueTable, PolicySchedule]:
    """V(s,k) = max_a sum_s' P^a_ss' V(s',k+1) from V(.,K) = reward.

    Action 1 is chosen only when it beats action 0 by more than ``tie_tol``,
    so rounding-level ties go to no drug.
    """
    S, K = spec.S, spec.K
    V = np.empty((S, K + 1))
    mu = np.zeros((S, K), dtype=np.int8)
    V[:, K] = spec.reward
    for k in range(K - 1, -1, -1):
        q0 = spec.P0 @ V[:, k + 1]
        q1 = spec.P1 @ V[:, k + 1]
        drug = q1 > q0 + tie_tol
        mu[:, k] = drug
        V[:, k] = np.where(drug, q1, q0)
    return ValueTable(V), PolicySchedule(mu, "optimal")


def make_fixed_policies(S: int, K: int, L: int = 50) -> dict:
    """The three reference schedules: none, alternating(L) starting with drug, immediate."""
    if K < 1 or L < 1:
        raise ConfigurationError("K and L must be >= 1")
    k = np.arange(K)
    alt = ((k % (2 * L)) < L).astype(np.int8)
    return {
        "none": PolicySchedule(np.zeros((S, K), dtype=np.int8), "none"),
        "alternating": PolicySchedule(np.tile(alt, (S, 1)), "alternating", L),
        "immediate": PolicySchedule(np.ones((S, K), dtype=np.int8), "immediate"),
    }


def evaluate_policy(spec: MdpSpec, policy: PolicySchedule, pi0) -> float:
    """Expected terminal reward pi(K) . rho when following ``policy`` from ``pi0``."""
    a = np.asarray(policy.actions)
    if a.shape != (spec.S, spec.K):
        raise ConfigurationError(f"policy covers {a.shape}, spec needs {(spec.S, spec.K)}")
    P = spec.stack
    rows = np.arange(spec.S)
    pi = np.asarray(pi0, dtype=float)
    for k in range(spec.K):
        pi = pi @ P[a[:, k], rows]
    return float(pi @ spec.reward)


def default_pi0(P0) -> np.ndarray:
    """Uniform over the transient (non-absorbing) states of the untreated matrix."""
    P = _entries(P0)
    transient = np.diag(P) < 1.0 - ABSORBING_TOL
    if not transient.any():
        transient[:] = True
    return transient / transient.sum()


def parse_pi0(text: str, P0) -> np.ndarray:
    """``uniform_transient``, ``point:<state>`` or a JSON vector."""
    S = _entries(P0).shape[0]
    text = text.strip()
    if text == "uniform_transient":
        return default_pi0(P0)
    if text.startswith("point:"):
        try:
            s = int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad pi0 point spec {text!r}") from None
        if not 1 <= s <= S:
            raise ConfigurationError(f"pi0 point state {s} outside 1..{S}")
        return np.eye(S)[s - 1]
    try:
        v = np.asarray(json.loads(text), dtype=float)
    except (json.JSONDecodeError, TypeError, ValueError):
        raise ConfigurationError(f"pi0 must be uniform_transient, point:<state> or a JSON vector, got {text!r}") from None
    if v.shape != (S,) or np.any(v < 0) or abs(v.sum() - 1) > 1e-9:
        raise ConfigurationError("pi0 vector must be a distribution over all states")
    return v


def compare_strategies(spec: MdpSpec, pi0, L: int = 50) -> dict:
    """Expected P(reach target) for none, alternating(L), immediate and optimal."""
    _, opt = backward_induction(spec)
    pols = make_fixed_policies(spec.S, spec.K, L)
    pols["optimal"] = opt
    return {name: evaluate_policy(spec, pols[name], pi0) for name in STRATEGIES}


@dataclass
class ReplayResult:
    fraction: float
    theoretical: float
    n: int
    reached: int
    per_start: dict         # start state -> (rollouts, reached)

    @property
    def standard_error(self) -> float:
        v = self.theoretical
        return float(np.sqrt(max(v * (1 - v), 0.0) / self.n))


def replay_trajectories(initial_states: Sequence[int], policy: PolicySchedule, spec: MdpSpec,
                        n_rollouts: int = 100, seed: int = 0, target: int | None = None) -> ReplayResult:
    """Monte Carlo closed-loop rollouts from each initial state.

    Rollouts of initial state number i draw from stream ("rollout", i), so a
    single trajectory's replay can be regenerated on its own.
    """
    starts = np.asarray(initial_states, dtype=np.int64).ravel()
    if starts.size == 0 or n_rollouts < 1:
        raise ConfigurationError("need at least one initial state and one rollout")
    if starts.min() < 1 or starts.max() > spec.S:
        raise InputDataError(f"initial states must lie in 1..{spec.S}")
    cum = np.cumsum(spec.stack, axis=2)
    cum[:, :, -1] = 1.0
    a = np.asarray(policy.actions)
    u = np.stack([generator(seed, "rollout", i).random((spec.K, n_rollouts))
                  for i in range(starts.size)], axis=1).reshape(spec.K, -1)
    x = np.repeat(starts - 1, n_rollouts)
    for k in range(spec.K):
        c = cum[a[x, k], x]
        x = (u[k][:, None] >= c).sum(axis=1)
    reward = spec.reward[x]
    if target is not None:
        reward = (x == target - 1).astype(float)
    hits = reward.reshape(starts.size, n_rollouts).sum(axis=1)
    per_start: dict = {}
    for s, h in zip(starts, hits):
        n0, h0 = per_start.get(int(s), (0, 0.0))
        per_start[int(s)] = (n0 + n_rollouts, h0 + float(h))
    pi0 = np.bincount(starts - 1, minlength=spec.S) / starts.size
    total = float(hits.sum())
    n = starts.size * n_rollouts
    return ReplayResult(total / n, evaluate_policy(spec, policy, pi0), n, int(round(total)), per_start)


# ---- IO ---------------------------------------------------------------------

def write_policy_csv(path, policy: PolicySchedule) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "k", "action"])
        S, K = policy.actions.shape
        for s in range(S):
            for k in range(K):
                w.writerow([s + 1, k, int(policy.actions[s, k])])


def read_policy_csv(path, kind: str = "optimal") -> PolicySchedule:
    path = Path(path)
    if not path.exists():
        raise InputDataError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        missing = {"state", "k", "action"} - set(r.fieldnames or ())
        if missing:
            raise InputDataError(f"{path}: missing column(s) {sorted(missing)}")
        rows = [(int(d["state"]), int(d["k"]), int(d["action"])) for d in r]
    S = max(t[0] for t in rows)
    K = max(t[1] for t in rows) + 1
    a = np.zeros((S, K), dtype=np.int8)
    for s, k, v in rows:
        a[s - 1, k] = v
    return PolicySchedule(a, kind)


def write_value_csv(path, values: ValueTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "k", "value"])
        S, K1 = values.V.shape
        for s in range(S):
            for k in range(K1):
                w.writerow([s + 1, k, repr(float(values.V[s, k]))])


def strategy_report(results: Mapping, pi0s: Mapping, K: int, L: int) -> dict:
    """Per group, per strategy expected P(reach S1), with the pi0 used."""
    return {
        "K": int(K),
        "L": int(L),
        "pi0_convention": "as given per group",
        "groups": {
            str(g): {"pi0": [float(v) for v in pi0s[g]],
                     "strategies": {name: float(v) for name, v in res.items()}}
            for g, res in results.items()
        },
    }
