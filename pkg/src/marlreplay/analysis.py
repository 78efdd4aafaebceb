"""Post-hoc analyses: value-vs-fingerprint sweeps, hidden-state probes, seed aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, stats

from . import nn
from .nn import ConfigError, ParamSet

EPS_GRID = (0.02, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
RIDGE = 1e-8


# value sweep -----------------------------------------------------------------

def value_sweep(params: ParamSet, z0: np.ndarray, eps_grid: Sequence[float] = EPS_GRID,
                e_frac: float = 1.0) -> list[tuple[float, float]]:
    """max_u Q of one fixed input with the fingerprint set to (eps, e_frac).

    `z0` is the network input without its two fingerprint slots. Recurrent
    models are evaluated as the first step of an episode.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if params.input_dim != len(z0) + 2:
        raise ConfigError("value sweep needs a model trained with a fingerprint "
                          f"(input width {params.input_dim}, observation {len(z0)})")
    xs = np.empty((len(eps_grid), len(z0) + 2))
    xs[:, :-2] = z0
    xs[:, -2] = eps_grid
    xs[:, -1] = e_frac
    if params.kind == "mlp":
        q = nn.mlp_forward(params, xs)
    else:
        q, _ = nn.gru_step(params, np.zeros((len(xs), params.hidden_dim)), xs)
    return [(float(e), float(v)) for e, v in zip(eps_grid, q.max(axis=1))]


def spearman(pairs: Sequence[tuple[float, float]]) -> float:
    x, y = zip(*pairs)
    if np.ptp(y) == 0:
        return 0.0
    return float(stats.spearmanr(x, y).statistic)


# linear probe ----------------------------------------------------------------

@dataclass
class ProbeFit:
    weights: np.ndarray  # intercept first
    r2: float
    degenerate: bool = False

    def predict(self, hidden: np.ndarray) -> np.ndarray:
        return self.weights[0] + hidden @ self.weights[1:]


def fit_probe(hidden: np.ndarray, labels: np.ndarray, ridge: float = RIDGE) -> ProbeFit:
    """In-sample least squares of labels on hidden units plus an intercept."""
    hidden = np.asarray(hidden, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if hidden.ndim != 2 or len(hidden) != len(y):
        raise ValueError("need one label per hidden row")
    X = np.hstack([np.ones((len(y), 1)), hidden])
    if len(np.unique(y)) < 2:
        w = np.zeros(X.shape[1])
        w[0] = y.mean() if len(y) else 0.0
        return ProbeFit(w, 0.0, degenerate=True)
    A = X.T @ X + ridge * np.eye(X.shape[1])
    w = linalg.solve(A, X.T @ y, assume_a="pos")
    resid = y - X @ w
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return ProbeFit(w, 1.0 - float(resid @ resid) / ss_tot)


@dataclass
class ProbeDataset:
    hidden: np.ndarray   # (N, H)
    labels: np.ndarray   # (N,) collection epsilon
    agent: np.ndarray    # (N,)
    episode: np.ndarray  # (N,) collection episode


def probe_dataset(params_all: list[ParamSet], episodes: Iterable) -> ProbeDataset:
    """Hidden state of each agent halfway through each stored episode.

    Halfway is step floor(T/2). Recurrent models are re-unrolled from zeros;
    feed-forward models contribute their last hidden layer.
    """
    rows, labels, agents, eps_idx = [], [], [], []
    for ep in episodes:
        mid = len(ep) // 2
        for a, params in enumerate(params_all):
            if params.kind == "gru":
                _, hs, _ = nn.gru_unroll(params, ep.obs[: mid + 1, a][:, None], keep_tape=False)
                h = hs[mid, 0]
            else:
                h = nn.mlp_hidden(params, ep.obs[mid, a])
            rows.append(h)
            labels.append(ep.collection_epsilon)
            agents.append(a)
            eps_idx.append(ep.collection_episode)
    return ProbeDataset(np.array(rows), np.array(labels), np.array(agents), np.array(eps_idx))


def probe_r2(data: ProbeDataset) -> float:
    """Mean in-sample r^2 over agents, one probe per agent network."""
    scores = [fit_probe(data.hidden[data.agent == a], data.labels[data.agent == a]).r2
              for a in np.unique(data.agent)]
    return float(np.mean(scores))


# metrics ---------------------------------------------------------------------

METRIC_FIELDS = ("win_rate", "mean_return", "mean_td_loss", "mean_is_weight")


@dataclass
class MetricSeries:
    episode: np.ndarray
    win_rate: np.ndarray
    mean_return: np.ndarray
    mean_td_loss: np.ndarray
    mean_is_weight: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        if np.any(np.diff(self.episode) <= 0):
            raise ValueError("evaluation points must be strictly increasing")

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricSeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(**{f.name: [float(r[f.name]) for r in rows] for f in fields(cls)})

    def final_fraction(self, e_max: int, frac: float = 0.25) -> "MetricSeries":
        """Evaluation points strictly inside the last `frac` of training."""
        keep = self.episode > (1.0 - frac) * e_max
        return MetricSeries(**{f.name: getattr(self, f.name)[keep] for f in fields(self)})


@dataclass
class Aggregate:
    episode: np.ndarray
    mean: dict[str, np.ndarray]
    sem: dict[str, np.ndarray]
    k: int


def aggregate(runs: Sequence[MetricSeries]) -> Aggregate:
    """Pointwise mean and sample standard deviation over sqrt(k)."""
    if len(runs) < 2:
        raise ValueError("aggregation needs at least two runs")
    ep = runs[0].episode
    for r in runs[1:]:
        if r.episode.shape != ep.shape or np.any(r.episode != ep):
            raise ValueError("runs have misaligned evaluation points")
    k = len(runs)
    mean, sem = {}, {}
    for name in METRIC_FIELDS:
        block = np.stack([getattr(r, name) for r in runs])
        # centre on the first run so identical runs give exactly zero spread
        d = block - block[0]
        mean[name] = block[0] + d.mean(axis=0)
        sem[name] = d.std(axis=0, ddof=1) / np.sqrt(k)
    return Aggregate(ep.copy(), mean, sem, k)


def write_pairs_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def write_aggregate_csv(path: str | Path, agg: Aggregate) -> None:
    header = ["episode"] + [f"{n}_{s}" for n in METRIC_FIELDS for s in ("mean", "sem")]
    rows = []
    for i, e in enumerate(agg.episode):
        rows.append([e] + [v for n in METRIC_FIELDS for v in (agg.mean[n][i], agg.sem[n][i])])
    write_pairs_csv(path, header, rows)


def write_probe_csv(path: str | Path, data: ProbeDataset) -> None:
    H = data.hidden.shape[1] if data.hidden.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "episode", "epsilon"] + [f"h{i}" for i in range(H)])
        for a, e, y, h in zip(data.agent, data.episode, data.labels, data.hidden):
            w.writerow([int(a), int(e), repr(float(y))] + [repr(float(v)) for v in h])


def read_probe_csv(path: str | Path) -> ProbeDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    arr = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), -1)
    return ProbeDataset(arr[:, 3:], arr[:, 2], arr[:, 0].astype(int), arr[:, 1].astype(int))
