"""Friedman ranking and the Nemenyi critical distance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import friedmanchisquare, rankdata

# Studentized range statistic divided by sqrt(2), infinite degrees of freedom.
# k = 2..10 are the usual published Nemenyi constants; k = 11..20 extend them
# from the studentized range distribution at three decimals.
Q_ALPHA = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
           3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
           2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319),
}
K_MAX = 20


def q_alpha(k: int, alpha: float = 0.05) -> float:
    if alpha not in Q_ALPHA:
        raise ValueError(f"alpha must be one of {sorted(Q_ALPHA)}")
    if not 2 <= k <= K_MAX:
        raise ValueError(f"k={k} outside the tabulated range 2..{K_MAX}")
    return Q_ALPHA[alpha][k - 2]


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    """Critical difference of average ranks for k models over n paired folds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return q_alpha(k, alpha) * math.sqrt(k * (k + 1) / (6.0 * n))


@dataclass
class RankMatrix:
    models: list[str]
    accuracies: np.ndarray  # folds x models
    ranks: np.ndarray  # folds x models, 1 = best, midranks on ties

    @property
    def average_ranks(self) -> np.ndarray:
        return self.ranks.mean(axis=0)

    def friedman(self) -> tuple[float, float]:
        """Friedman chi-square statistic and p-value (needs >= 3 models)."""
        if len(self.models) < 3:
            raise ValueError("the Friedman test needs at least three models")
        res = friedmanchisquare(*self.accuracies.T)
        return float(res.statistic), float(res.pvalue)

    def to_dict(self) -> dict:
        return {"models": self.models, "accuracies": self.accuracies.tolist(),
                "ranks": self.ranks.tolist(), "average_ranks": self.average_ranks.tolist()}


def friedman_ranks(matrix, models: Sequence[str] | None = None) -> RankMatrix:
    acc = np.asarray(matrix, dtype=float)
    if acc.ndim != 2 or acc.shape[0] < 2 or acc.shape[1] < 2:
        raise ValueError(f"need a folds x models matrix with >= 2 of each, got shape {acc.shape}")
    if np.isnan(acc).any():
        raise ValueError("accuracy matrix contains NaN")
    if models is None:
        models = [f"model{j}" for j in range(acc.shape[1])]
    if len(models) != acc.shape[1]:
        raise ValueError("one name per model column required")
    ranks = rankdata(-acc, axis=1, method="average")
    return RankMatrix(list(models), acc, ranks)


def cd_groups(average_ranks: Sequence[float], cd: float) -> list[list[int]]:
    """Groups of models joined by a connector bar.

    Models are sorted by average rank and neighbours whose rank difference is
    within ``cd`` are linked; groups are the connected runs of that chain.
    Singleton runs get no bar and are omitted. Returns model indices in rank
    order.
    """
    order = list(np.argsort(np.asarray(average_ranks, dtype=float), kind="stable"))
    groups, run = [], order[:1]
    for prev, cur in zip(order, order[1:]):
        if average_ranks[cur] - average_ranks[prev] <= cd:
            run.append(cur)
        else:
            if len(run) > 1:
                groups.append(run)
            run = [cur]
    if len(run) > 1:
        groups.append(run)
    return [[int(i) for i in g] for g in groups]


def significant_pairs(average_ranks: Sequence[float], cd: float) -> list[tuple[int, int]]:
    r = list(average_ranks)
    return [(i, j) for i in range(len(r)) for j in range(i + 1, len(r)) if abs(r[i] - r[j]) > cd]
