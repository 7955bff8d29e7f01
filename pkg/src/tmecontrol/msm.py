"""Markov state models over metastable-state sequences.

Estimation by transition counting, the shipped reference matrices,
absorption probabilities and committor curves, plus the three validation
checks: bootstrap confidence intervals, Chapman-Kolmogorov consistency and
KL divergence between empirical and predicted occupancies.

State labels are 1-based everywhere outside array indexing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InputDataError
from .rng import generator

ABSORBING_TOL = 1e-9
KL_FLOOR = 1e-12
FIXTURES = ("P1", "P4", "P6")


@dataclass
class TransitionMatrix:
    """Row-stochastic S x S matrix with provenance.

    ``unvisited`` lists 1-based states whose rows had no outgoing counts and
    were replaced by self-loops. ``renormalization`` holds the per-row factor
    applied to a fixture (1.0 when the row already summed to one).
    """

    entries: np.ndarray
    group: str = "pooled"
    counts: np.ndarray | None = None
    provenance: str = "estimated"
    unvisited: tuple = ()
    renormalization: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.entries, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise InputDataError(f"transition matrix must be square, got shape {P.shape}")
        if np.any(P < 0) or np.any(P > 1 + 1e-12):
            raise InputDataError("transition matrix entries must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise InputDataError("transition matrix rows must sum to 1")
        self.entries = P
        self.group = str(self.group)

    @property
    def S(self) -> int:
        return self.entries.shape[0]

    def absorbing_states(self, tol: float = ABSORBING_TOL) -> list[int]:
        return [i + 1 for i in range(self.S) if self.entries[i, i] >= 1.0 - tol]

    def transient_states(self, tol: float = ABSORBING_TOL) -> list[int]:
        return [i + 1 for i in range(self.S) if self.entries[i, i] < 1.0 - tol]

    def to_dict(self) -> dict:
        d = {
            "states": list(range(1, self.S + 1)),
            "entries": [float(v) for v in self.entries.ravel()],
            "group": self.group,
            "provenance": self.provenance,
        }
        if self.counts is not None:
            d["counts"] = [int(v) for v in np.asarray(self.counts).ravel()]
        if self.unvisited:
            d["unvisited"] = list(self.unvisited)
        if self.renormalization is not None:
            d["renormalization"] = [float(v) for v in self.renormalization]
        return d

    @classmethod
    def from_dict(cls, d: Mapping, renormalize: bool = False) -> "TransitionMatrix":
        for key in ("states", "entries"):
            if key not in d:
                raise InputDataError(f"matrix file is missing field '{key}'")
        S = len(d["states"])
        raw = np.asarray(d["entries"], dtype=float)
        if raw.size != S * S:
            raise InputDataError(f"field 'entries' has {raw.size} values, expected {S * S}")
        raw = raw.reshape(S, S)
        counts = d.get("counts")
        if counts is not None:
            counts = np.asarray(counts, dtype=np.int64).reshape(S, S)
        factors = d.get("renormalization")
        if renormalize:
            raw, factors = renormalize_rows(raw)
        return cls(raw, group=d.get("group", "pooled"), counts=counts,
                   provenance=d.get("provenance", "estimated"),
                   unvisited=tuple(d.get("unvisited", ())),
                   renormalization=None if factors is None else np.asarray(factors, dtype=float))


def renormalize_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each row by its sum; returns (matrix, factors) with factor = 1/sum."""
    raw = np.asarray(raw, dtype=float)
    sums = raw.sum(axis=1)
    if np.any(sums <= 0):
        raise InputDataError("matrix has an all-zero row")
    return raw / sums[:, None], 1.0 / sums


def write_matrix(path, P: TransitionMatrix) -> None:
    Path(path).write_text(json.dumps(P.to_dict(), indent=1) + "\n")


def read_matrix(path, renormalize: bool = False) -> TransitionMatrix:
    path = Path(path)
    if not path.exists():
        raise InputDataError(f"missing input file: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputDataError(f"{path}: invalid JSON ({exc})") from None
    return TransitionMatrix.from_dict(d, renormalize=renormalize)


def load_fixture(name: str) -> TransitionMatrix:
    """Reference matrix ``P1``, ``P4`` or ``P6`` as published (3 decimals), row-renormalised."""
    if name not in FIXTURES:
        raise ConfigurationError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    text = resources.files("tmecontrol").joinpath("data", "fixtures", f"{name}.json").read_text()
    return TransitionMatrix.from_dict(json.loads(text), renormalize=True)


# ---- estimation -------------------------------------------------------------

def _as_sequences(sequences) -> list[np.ndarray]:
    if isinstance(sequences, Mapping):
        sequences = list(sequences.values())
    out = [np.asarray(s, dtype=np.int64).ravel() for s in sequences]
    if not out:
        raise InputDataError("no state sequences given")
    return out


def count_matrix(sequences, S: int, lag: int = 1) -> np.ndarray:
    """Pooled counts N_ij of pairs (x_t, x_{t+lag}) over all sequences."""
    N = np.zeros((S, S), dtype=np.int64)
    for s in _as_sequences(sequences):
        if s.size and (s.min() < 1 or s.max() > S):
            raise InputDataError(f"state labels must lie in 1..{S}")
        if s.size > lag:
            np.add.at(N, (s[:-lag] - 1, s[lag:] - 1), 1)
    return N


def _normalize_counts(N: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = N.sum(axis=-1, keepdims=True)
    empty = rows[..., 0] == 0
    P = np.divide(N, rows, out=np.zeros(N.shape, dtype=float), where=rows > 0)
    idx = np.nonzero(empty)
    P[idx + (idx[-1],)] = 1.0
    return P, empty


def estimate_transition_matrix(sequences, S: int, group: str = "pooled") -> TransitionMatrix:
    """Maximum-likelihood P_ij = N_ij / sum_l N_il; empty rows become self-loops."""
    N = count_matrix(sequences, S)
    P, empty = _normalize_counts(N)
    unvisited = tuple(int(i) + 1 for i in np.nonzero(empty)[0])
    return TransitionMatrix(P, group=group, counts=N, unvisited=unvisited)


def estimate_group_matrices(sequences: Mapping, groups: Mapping, S: int) -> dict:
    """One matrix per group label; groups without sequences are simply absent."""
    buckets: dict = {}
    for tid, seq in sequences.items():
        if tid in groups:
            buckets.setdefault(str(groups[tid]), []).append(seq)
    return {g: estimate_transition_matrix(seqs, S, group=g) for g, seqs in sorted(buckets.items())}


def _matrix(P) -> np.ndarray:
    return P.entries if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=float)


def propagate(pi0, P, k: int) -> np.ndarray:
    """Occupancy after ``k`` steps, pi0 P^k."""
    if k < 0:
        raise ConfigurationError("k must be >= 0")
    return np.asarray(pi0, dtype=float) @ np.linalg.matrix_power(_matrix(P), int(k))


def sample_chain(P, n_sequences: int, length: int, rng: np.random.Generator,
                 start=None) -> np.ndarray:
    """Draw (n_sequences, length) 1-based state paths from ``P``.

    ``start`` is a state label, an initial distribution, or None for uniform.
    """
    P = _matrix(P)
    S = P.shape[0]
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    if start is None:
        x = rng.integers(0, S, size=n_sequences)
    elif np.ndim(start) == 0:
        x = np.full(n_sequences, int(start) - 1)
    else:
        x = rng.choice(S, size=n_sequences, p=np.asarray(start, dtype=float))
    out = np.empty((n_sequences, length), dtype=np.int64)
    out[:, 0] = x
    u = rng.random((length - 1, n_sequences))
    for t in range(1, length):
        x = (u[t - 1][:, None] >= cum[x]).sum(axis=1)
        out[:, t] = x
    return out + 1


# ---- absorption and committor ----------------------------------------------

@dataclass
class Absorption:
    q: np.ndarray
    target: int
    unreachable: list       # 1-based states that can never reach the target (q = 0)


def _reaches(P: np.ndarray, target: int) -> np.ndarray:
    """Boolean mask of states with a positive-probability path to ``target``."""
    S = P.shape[0]
    ok = np.zeros(S, dtype=bool)
    ok[target] = True
    while True:
        new = ok | (P[:, ok] > 0).any(axis=1)
        if (new == ok).all():
            return ok
        ok = new


def absorption_probabilities(P, target: int, tol: float = ABSORBING_TOL,
                             allow_near_absorbing: bool = False) -> Absorption:
    """Probability of eventual absorption in ``target`` from every state.

    Solves q_T = P_TT q_T + P_T,target over the states T that can reach the
    target. States with no path to it get q = 0 and are reported.
    """
    P = _matrix(P)
    S = P.shape[0]
    t = int(target) - 1
    if not 0 <= t < S:
        raise ConfigurationError(f"target state {target} outside 1..{S}")
    if P[t, t] < 1.0 - tol and not allow_near_absorbing:
        raise ConfigurationError(f"state {target} is not absorbing (self-probability {P[t, t]!r})")
    reach = _reaches(P, t)
    T = np.nonzero(reach)[0]
    T = T[T != t]
    q = np.zeros(S)
    q[t] = 1.0
    if T.size:
        A = np.eye(T.size) - P[np.ix_(T, T)]
        q[T] = np.linalg.solve(A, P[T, t])
    q = np.clip(q, 0.0, 1.0)
    return Absorption(q, int(target), [int(i) + 1 for i in np.nonzero(~reach)[0]])


@dataclass
class CommittorCurve:
    group: str
    values: np.ndarray                  # Q(k), k = 0..K
    threshold_25: int | None
    threshold_10: int | None

    @property
    def derivative(self) -> np.ndarray:
        return np.diff(self.values)

    def to_dict(self) -> dict:
        return {"group": self.group, "values": [float(v) for v in self.values],
                "threshold_25": self.threshold_25, "threshold_10": self.threshold_10,
                "derivative": [float(v) for v in self.derivative]}


def _first_below(values, level):
    hit = np.nonzero(values < level)[0]
    return int(hit[0]) if hit.size else None


def committor_curve(pi0, P, q, K: int, group: str = "") -> CommittorCurve:
    """Q(k) = pi0 P^k q for k = 0..K with first crossings of 0.25 and 0.10."""
    M = _matrix(P)
    pi = np.asarray(pi0, dtype=float).copy()
    q = np.asarray(q, dtype=float)
    vals = np.empty(K + 1)
    for k in range(K + 1):
        vals[k] = pi @ q
        pi = pi @ M
    vals = np.clip(vals, 0.0, 1.0)
    return CommittorCurve(str(group), vals, _first_below(vals, 0.25), _first_below(vals, 0.10))


# ---- validation -------------------------------------------------------------

@dataclass
class BootstrapResult:
    lower: np.ndarray
    upper: np.ndarray
    n_resamples: int
    level: float

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def max_width(self) -> float:
        return float(self.widths.max())


def bootstrap_ci(sequences, S: int, n_resamples: int = 2000, level: float = 0.95,
                 seed: int = 0) -> BootstrapResult:
    """Percentile CIs per entry from resampling whole sequences with replacement.

    Resample r draws its indices from its own stream, so any subset of
    resamples can be regenerated independently.
    """
    seqs = _as_sequences(sequences)
    n = len(seqs)
    if n < 2:
        raise InputDataError("bootstrap needs at least 2 sequences")
    C = np.stack([count_matrix([s], S).ravel() for s in seqs]).astype(float)
    W = np.zeros((n_resamples, n))
    for r in range(n_resamples):
        W[r] = np.bincount(generator(seed, "bootstrap", r).integers(0, n, size=n), minlength=n)
    P, _ = _normalize_counts((W @ C).reshape(n_resamples, S, S))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(P, [alpha, 1.0 - alpha], axis=0)
    return BootstrapResult(lo, hi, n_resamples, level)


@dataclass
class CKResult:
    n: int
    discrepancy: float
    excluded: list          # 1-based rows without n-step counts


def chapman_kolmogorov_test(sequences, P, n_steps: Iterable[int] = (2, 5)) -> dict:
    """max_ij |[P^n]_ij - P(n)_ij| with P(n) counted directly from n-step pairs."""
    M = _matrix(P)
    S = M.shape[0]
    skip = set(P.unvisited) if isinstance(P, TransitionMatrix) else set()
    out = {}
    for n in n_steps:
        N = count_matrix(sequences, S, lag=int(n))
        direct, empty = _normalize_counts(N)
        excluded = sorted(set(int(i) + 1 for i in np.nonzero(empty)[0]) | skip)
        keep = np.array([i + 1 not in excluded for i in range(S)])
        diff = np.abs(np.linalg.matrix_power(M, int(n)) - direct)[keep]
        out[int(n)] = CKResult(int(n), float(diff.max()) if diff.size else 0.0, excluded)
    return out


def empirical_occupancies(sequences, S: int) -> np.ndarray:
    """(T, S) state fractions per step over the sequences still running at that step."""
    seqs = _as_sequences(sequences)
    T = max(len(s) for s in seqs)
    occ = np.zeros((T, S))
    for s in seqs:
        occ[np.arange(len(s)), s - 1] += 1
    return occ / occ.sum(axis=1, keepdims=True)


@dataclass
class KLResult:
    per_step: np.ndarray
    floor: float = KL_FLOOR

    @property
    def max(self) -> float:
        return float(self.per_step.max())


def kl_divergence(p, q, floor: float = KL_FLOOR) -> np.ndarray:
    """D(p || q) along the last axis; 0 log 0 = 0, q floored at ``floor``."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), floor)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / q), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def kl_occupancy(empirical, P, pi0=None, floor: float = KL_FLOOR) -> KLResult:
    """KL divergence per step between empirical occupancies and pi0 P^k.

    ``pi0`` defaults to the empirical occupancy at step 0.
    """
    emp = np.asarray(empirical, dtype=float)
    M = _matrix(P)
    pi = emp[0].copy() if pi0 is None else np.asarray(pi0, dtype=float).copy()
    pred = np.empty_like(emp)
    for k in range(len(emp)):
        pred[k] = pi
        pi = pi @ M
    return KLResult(kl_divergence(emp, pred, floor), floor)


def validation_report(sequences, P: TransitionMatrix, n_resamples: int = 2000,
                      ck_lags: Sequence[int] = (2, 5), seed: int = 0) -> dict:
    """Bootstrap, CK and KL summary for one group's sequences and matrix."""
    S = P.S
    seqs = _as_sequences(sequences)
    boot = bootstrap_ci(seqs, S, n_resamples, seed=seed) if len(seqs) >= 2 else None
    ck = chapman_kolmogorov_test(seqs, P, ck_lags)
    kl = kl_occupancy(empirical_occupancies(seqs, S), P)
    return {
        "group": P.group,
        "bootstrap_max_ci_width": None if boot is None else boot.max_width,
        "ck_discrepancy": {str(n): r.discrepancy for n, r in ck.items()},
        "ck_excluded_rows": {str(n): r.excluded for n, r in ck.items()},
        "kl_max": kl.max,
        "kl_floor": kl.floor,
    }
