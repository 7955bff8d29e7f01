"""State discretisation of embedded windows and the statistics built on it:
snapshot mapping with ROC evaluation, Kruskal-Wallis parameter screening,
the k-NN attractor-basin classifier and a PCA projection for plotting."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.cluster.hierarchy import fcluster, ward

from .errors import ConfigurationError, InputDataError
from .features import EmbeddedWindows
from .rng import generator


# ---- clustering -------------------------------------------------------------

@dataclass
class Clustering:
    labels: np.ndarray            # (n_windows,) in 1..S
    centroids: np.ndarray         # (S, D) mean window per state
    S: int
    quantized: bool = False

    def sequences(self, windows: EmbeddedWindows) -> dict:
        """State sequence per trajectory id, ordered by centre step."""
        out = {}
        for t in np.unique(windows.trajectory_id):
            m = np.nonzero(windows.trajectory_id == t)[0]
            m = m[np.argsort(windows.center_step[m], kind="stable")]
            out[int(t)] = self.labels[m].copy()
        return out

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Nearest-centroid labels for new windows (Euclidean)."""
        d = ((values[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1) + 1


def _ward_labels(x: np.ndarray, S: int) -> np.ndarray:
    if S == 1 or len(x) == 1:
        return np.zeros(len(x), dtype=np.int64)
    return fcluster(ward(x), S, criterion="maxclust").astype(np.int64) - 1


def _quantize(x, n_centroids, seed):
    from sklearn.cluster import MiniBatchKMeans

    km = MiniBatchKMeans(n_clusters=n_centroids, random_state=int(seed), n_init=1,
                         batch_size=4096, max_iter=50)
    inherit = km.fit_predict(x)
    return km.cluster_centers_, inherit


def cluster_states(windows: EmbeddedWindows | np.ndarray, S: int = 6, *, order_by: np.ndarray | None = None,
                   quantize_above: int = 10000, n_quantize: int = 2000, seed: int = 0) -> Clustering:
    """Ward clustering of pooled windows into ``S`` states labelled 1..S.

    Labels are numbered by first appearance in input order, or, when
    ``order_by`` (one score per window) is given, by decreasing mean score.
    Above ``quantize_above`` windows the data are first reduced to
    ``n_quantize`` k-means centroids and windows inherit their centroid's state.
    """
    x = windows.values if isinstance(windows, EmbeddedWindows) else np.asarray(windows, dtype=float)
    n = len(x)
    if S < 1:
        raise ConfigurationError("S must be >= 1")
    if n < S:
        raise ConfigurationError(f"{n} windows cannot form {S} clusters")
    quantized = n > quantize_above and n_quantize < n
    if quantized:
        centers, inherit = _quantize(x, n_quantize, generator(seed, "quantize").integers(2**31))
        raw = _ward_labels(centers, S)[inherit]
    else:
        raw = _ward_labels(x, S)
    found = np.unique(raw)
    if order_by is None:
        _, first = np.unique(raw, return_index=True)
        order = found[np.argsort(first)]
    else:
        score = np.array([np.mean(np.asarray(order_by)[raw == c]) for c in found])
        order = found[np.argsort(-score, kind="stable")]
    remap = np.empty(raw.max() + 1, dtype=np.int64)
    remap[order] = np.arange(1, len(order) + 1)
    labels = remap[raw]
    centroids = np.stack([x[labels == s].mean(axis=0) for s in range(1, len(order) + 1)])
    return Clustering(labels, centroids, len(order), quantized)


def effector_score(windows: EmbeddedWindows, table) -> np.ndarray:
    """Raw effector share minus tumor share at each window centre.

    ``table`` is the standardization table the windows were built with; it is
    used to undo the z-scoring. Passing this as ``order_by`` numbers the
    effector-dominant state 1.
    """
    c = windows.center_columns() * table.scale + table.mean
    return c[:, table.names.index("prop_t_eff")] - c[:, table.names.index("prop_tumor")]


def terminal_states(sequences: dict) -> dict:
    """Final-window state of every trajectory."""
    return {t: int(seq[-1]) for t, seq in sequences.items()}


def tag_states(terminal: dict, S: int, absorbing: Sequence[int] = (), share: float = 0.25) -> dict:
    """``attractor`` if at least ``share`` of trajectories end there or the state
    is self-absorbing in a group matrix, else ``transient``."""
    ends = np.bincount(list(terminal.values()), minlength=S + 1)[1:]
    frac = ends / max(1, len(terminal))
    return {s: ("attractor" if frac[s - 1] >= share or s in set(absorbing) else "transient") for s in range(1, S + 1)}


# ---- snapshot mapping ---------------------------------------------------------

class UndefinedSimilarity(ValueError):
    pass


def _unit_rows(a):
    norms = np.linalg.norm(a, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = a / norms[:, None]
    u[norms == 0] = np.nan
    return u


def cosine_similarities(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Cosine similarity of each query row with each reference row; zero-norm
    references get -inf so they are never the nearest item."""
    q = np.atleast_2d(np.asarray(query, dtype=float))
    qn = np.linalg.norm(q, axis=1)
    if np.any(qn == 0):
        raise UndefinedSimilarity("cosine similarity is undefined for a zero-norm snapshot")
    sims = (q / qn[:, None]) @ _unit_rows(np.asarray(reference, dtype=float)).T
    return np.where(np.isnan(sims), -np.inf, sims)


def assign_snapshot(obs, reference: np.ndarray, labels: np.ndarray) -> int:
    """1-NN state label under cosine similarity; ties go to the lowest reference index."""
    if len(reference) == 0:
        raise InputDataError("empty reference set")
    sims = cosine_similarities(obs, reference)[0]
    return int(np.asarray(labels)[int(np.argmax(sims))])


def state_scores(query: np.ndarray, reference: np.ndarray, labels: np.ndarray, S: int) -> np.ndarray:
    """Best cosine similarity to each state's references, shape (n_query, S)."""
    sims = cosine_similarities(query, reference)
    out = np.full((len(sims), S), -np.inf)
    labels = np.asarray(labels)
    for s in range(1, S + 1):
        m = labels == s
        if m.any():
            out[:, s - 1] = sims[:, m].max(axis=1)
    return out


def roc_auc(scores, positive) -> float | None:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_one_vs_rest(scores: np.ndarray, truth, states: Sequence[int] | None = None):
    """Per-state AUC (``None`` when undefined) and the mean over defined states.

    ``scores[:, j]`` is the score for ``states[j]`` (default 1..S).
    """
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth)
    if states is None:
        states = range(1, scores.shape[1] + 1)
    per_state = {int(s): roc_auc(scores[:, j], truth == s) for j, s in enumerate(states)}
    defined = [v for v in per_state.values() if v is not None]
    return per_state, (float(np.mean(defined)) if defined else None)


@dataclass
class HoldoutResult:
    per_state: dict               # state -> mean AUC over repeats (None if never defined)
    mean_auc: float
    repeat_means: np.ndarray
    accuracy: float


def snapshot_holdout(windows: EmbeddedWindows, labels: np.ndarray, feature_indices: Sequence[int],
                     fraction: float = 0.15, n_repeats: int = 50, seed: int = 0) -> HoldoutResult:
    """Hold out a fraction of time points per trajectory, map each held-out
    observation to its nearest reference centre column (cosine, restricted to
    ``feature_indices``) and score the mapping with one-vs-rest ROC."""
    labels = np.asarray(labels)
    S = int(labels.max())
    obs = windows.center_columns()[:, np.asarray(feature_indices)]
    rng = generator(seed, "holdout")
    groups = [np.nonzero(windows.trajectory_id == t)[0] for t in np.unique(windows.trajectory_id)]
    per_state = {s: [] for s in range(1, S + 1)}
    means, hits, total = [], 0, 0
    for _ in range(n_repeats):
        test = np.zeros(len(labels), dtype=bool)
        for g in groups:
            n_test = max(1, int(round(fraction * len(g))))
            test[rng.choice(g, size=n_test, replace=False)] = True
        sc = state_scores(obs[test], obs[~test], labels[~test], S)
        aucs, mean = roc_auc_one_vs_rest(sc, labels[test])
        for s, v in aucs.items():
            if v is not None:
                per_state[s].append(v)
        means.append(mean)
        hits += int(np.sum(np.argmax(sc, axis=1) + 1 == labels[test]))
        total += int(test.sum())
    summary = {s: (float(np.mean(v)) if v else None) for s, v in per_state.items()}
    return HoldoutResult(summary, float(np.mean(means)), np.array(means), hits / total)


# ---- Kruskal-Wallis -------------------------------------------------------------

def kruskal_wallis(values, groups) -> tuple[float, float]:
    """H statistic (average ranks, tie-corrected) and chi-squared p value."""
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < 2:
        raise InputDataError("Kruskal-Wallis needs at least two groups")
    N = len(values)
    ranks = stats.rankdata(values)
    h = 12.0 / (N * (N + 1)) * sum(ranks[groups == g].sum() ** 2 / np.count_nonzero(groups == g) for g in labels)
    h -= 3.0 * (N + 1)
    _, t = np.unique(values, return_counts=True)
    correction = 1.0 - np.sum(t ** 3 - t) / (N ** 3 - N) if N > 1 else 0.0
    if correction <= 0:
        return 0.0, 1.0
    h = max(h / correction, 0.0)
    return float(h), float(stats.chi2.sf(h, len(labels) - 1))


def screen_parameters(params: np.ndarray, terminal: Sequence[int], names: Sequence[str]) -> list[dict]:
    """Kruskal-Wallis per parameter column, sorted by H (descending) and ranked from 1."""
    rows = []
    for j, name in enumerate(names):
        h, p = kruskal_wallis(params[:, j], terminal)
        rows.append({"parameter": name, "H": h, "p": p})
    rows.sort(key=lambda r: -r["H"])
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    return rows


# ---- attractor basins ------------------------------------------------------------

def basin_coordinates(params: np.ndarray, r_exh_index: int, r_adh_index: int) -> np.ndarray:
    return np.column_stack([np.log10(params[:, r_exh_index]), params[:, r_adh_index]])


@dataclass
class BasinModel:
    points: np.ndarray
    labels: np.ndarray
    k: int = 2
    conflicts: list = field(default_factory=list)   # index pairs at distance 0 with different labels


def fit_basin_model(points, labels, k: int = 2) -> BasinModel:
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    if len(points) < k:
        raise ConfigurationError(f"need at least k={k} training points")
    conflicts = []
    for i in range(len(points)):
        same = np.nonzero(np.all(points[i + 1:] == points[i], axis=1))[0] + i + 1
        conflicts += [(i, int(j)) for j in same if labels[j] != labels[i]]
    return BasinModel(points, labels, k, conflicts)


def _vote(dist, labels, k):
    nearest = np.argsort(dist, kind="stable")[:k]
    cand = labels[nearest]
    values, counts = np.unique(cand, return_counts=True)
    winners = set(values[counts == counts.max()].tolist())
    for lab in cand:  # nearest first
        if lab in winners:
            return lab


def classify_basin(model: BasinModel, point, exclude: int | None = None):
    d = np.sqrt(((model.points - np.asarray(point, dtype=float)) ** 2).sum(axis=1))
    labels = model.labels
    if exclude is not None:
        keep = np.arange(len(d)) != exclude
        d, labels = d[keep], labels[keep]
    return _vote(d, labels, model.k)


def loo_predictions(model: BasinModel) -> np.ndarray:
    if len(model.points) < model.k + 1:
        raise ConfigurationError("leave-one-out needs at least k+1 points")
    return np.array([classify_basin(model, model.points[i], exclude=i) for i in range(len(model.points))])


def loo_cv_accuracy(model: BasinModel) -> float:
    return float(np.mean(loo_predictions(model) == model.labels))


def basin_report(model: BasinModel) -> dict:
    pred = loo_predictions(model)
    return {
        "k": model.k,
        "points": [[float(a), float(b)] for a, b in model.points],
        "labels": [int(v) for v in model.labels],
        "loo_prediction": [int(v) for v in pred],
        "accuracy": float(np.mean(pred == model.labels)),
        "conflicting_duplicates": [list(c) for c in model.conflicts],
    }


# ---- PCA ------------------------------------------------------------------------

@dataclass
class Projection:
    coords: np.ndarray            # (n, 2)
    components: np.ndarray        # (2, D)
    explained_variance: np.ndarray
    total_variance: float


def pca_project(values: np.ndarray, n_components: int = 2) -> Projection:
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        raise ConfigurationError("PCA needs at least two windows")
    xc = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:n_components].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    var = sv ** 2 / (len(x) - 1)
    if len(comps) < n_components:
        comps = np.vstack([comps, np.zeros((n_components - len(comps), x.shape[1]))])
        var = np.concatenate([var, np.zeros(n_components)])
    return Projection(xc @ comps.T, comps, var[:n_components], float(var.sum()))


# ---- file interfaces ----------------------------------------------------------------

def write_states_csv(path, windows: EmbeddedWindows, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_id", "center_step", "state"])
        for t, k, s in zip(windows.trajectory_id, windows.center_step, labels):
            w.writerow([int(t), int(k), int(s)])


def read_states_csv(path) -> dict:
    """trajectory id -> state sequence ordered by centre step."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["trajectory_id", "center_step", "state"]:
            raise InputDataError(f"{path}: expected columns trajectory_id,center_step,state, got {header}")
        rows = sorted((int(a), int(b), int(c)) for a, b, c in r)
    out: dict = {}
    for t, _, s in rows:
        out.setdefault(t, []).append(s)
    return {t: np.array(v) for t, v in out.items()}


def write_kw_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "H", "p", "rank"])
        for r in rows:
            w.writerow([r["parameter"], repr(r["H"]), repr(r["p"]), r["rank"]])


def write_plot_csv(path, windows: EmbeddedWindows, coords: np.ndarray, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_id", "center_step", "pc1", "pc2", "state"])
        for t, k, (a, b), s in zip(windows.trajectory_id, windows.center_step, coords, labels):
            w.writerow([int(t), int(k), repr(float(a)), repr(float(b)), int(s)])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
