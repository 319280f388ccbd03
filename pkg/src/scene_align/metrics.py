"""Benchmark metrics for K-sample multi-agent predictions.

Per-scene functions take ``gt`` as ``(N, T, 2)`` and ``preds`` as
``(K, N, T, 2)``. Displacements are Euclidean distances in meters. Scene
results are combined by summing numerators and denominators, weighting
every agent equally, so the report does not depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .environment import NavigabilityMap, violations

COLLISION_THRESHOLD = 0.2
BANDWIDTH_FLOOR = 1e-3


def _check(gt: np.ndarray, preds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if gt.ndim != 3 or preds.ndim != 4 or preds.shape[1:] != gt.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs preds {preds.shape}")
    return gt, preds


def displacement(gt: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """``(K, N, T)`` Euclidean errors."""
    gt, preds = _check(gt, preds)
    d = preds - gt[None]
    return np.sqrt(np.sum(d * d, axis=-1))


def _per_sample_agent(gt, preds) -> tuple[np.ndarray, np.ndarray]:
    """``(K, N)`` average and final displacement per sample and agent."""
    err = displacement(gt, preds)
    return err.mean(axis=2), err[:, :, -1]


def _reduce(table: np.ndarray) -> tuple[float, float, float]:
    """Per-scene (min, joint, avg) sums over agents for a ``(K, N)`` error table.

    All three sum agents in the same order, so elementwise domination carries
    over to the rounded sums; the ``max`` guards only cover exact ties.
    """
    marginal = float(np.sum(table.min(axis=0)))
    per_sample = np.sum(table, axis=1)
    joint = max(float(per_sample.min()), marginal)
    average = max(float(per_sample.mean()), joint)
    return marginal, joint, average


def min_ade_fde(gt, preds) -> tuple[float, float]:
    ade, fde = _per_sample_agent(gt, preds)
    n = ade.shape[1]
    return _reduce(ade)[0] / n, _reduce(fde)[0] / n


def jade_jfde(gt, preds) -> tuple[float, float]:
    ade, fde = _per_sample_agent(gt, preds)
    n = ade.shape[1]
    return _reduce(ade)[1] / n, _reduce(fde)[1] / n


def avg_ade_fde(gt, preds) -> tuple[float, float]:
    ade, fde = _per_sample_agent(gt, preds)
    n = ade.shape[1]
    return _reduce(ade)[2] / n, _reduce(fde)[2] / n


def a2a_collision_flags(preds: np.ndarray, threshold: float = COLLISION_THRESHOLD) -> np.ndarray:
    """``(K, N)``: agent collides with at least one other agent in the same sample."""
    p = np.asarray(preds, dtype=np.float64)
    k, n = p.shape[:2]
    if n < 2:
        return np.zeros((k, n), dtype=bool)
    d = p[:, :, None, :, :] - p[:, None, :, :, :]
    closest = np.sqrt(np.min(np.sum(d * d, axis=-1), axis=-1))  # (K, N, N)
    hit = closest < threshold
    hit[:, np.arange(n), np.arange(n)] = False
    return hit.any(axis=2)


def a2a_collision_rate(preds, threshold: float = COLLISION_THRESHOLD) -> float:
    p = np.asarray(preds)
    if p.shape[1] < 1:
        raise ValueError("need at least one agent")
    return float(a2a_collision_flags(p, threshold).mean())


def env_collision_rate(preds, nav_map: NavigabilityMap) -> float:
    return float(violations(nav_map, np.asarray(preds, dtype=np.float64)).mean())


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-dimension bandwidth ``(4/(d+2))^(1/(d+4)) n^(-1/(d+4)) sigma``, floored."""
    s = np.asarray(samples, dtype=np.float64)
    n, d = s.shape
    sigma = s.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    h = (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sigma
    return np.maximum(h, BANDWIDTH_FLOOR)


def _kde_logpdf(samples: np.ndarray, point: np.ndarray) -> float:
    h = silverman_bandwidth(samples)
    z = (point[None, :] - samples) / h[None, :]
    log_k = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(h)) - samples.shape[1] * 0.5 * math.log(2 * math.pi)
    m = log_k.max()
    return float(m + math.log(np.sum(np.exp(log_k - m))) - math.log(samples.shape[0]))


def kde_nll_per_agent(gt, preds) -> np.ndarray:
    gt, preds = _check(gt, preds)
    if preds.shape[0] < 1:
        raise ValueError("need at least one sample")
    n, t = gt.shape[:2]
    out = np.empty(n)
    for i in range(n):
        out[i] = -np.mean([_kde_logpdf(preds[:, i, s, :], gt[i, s]) for s in range(t)])
    return out


def kde_nll(gt, preds) -> float:
    """Mean over agents and timesteps of ``-log p(gt)`` under a product-Gaussian KDE."""
    return float(kde_nll_per_agent(gt, preds).mean())


@dataclass
class MetricsReport:
    min_ade: float
    min_fde: float
    jade: float
    jfde: float
    avg_ade: float
    avg_fde: float
    a2a_collision_rate: float
    env_collision_rate: float | None
    kde_nll: float
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class MetricsAccumulator:
    """Sums per-scene numerators so scenes can be evaluated in any order."""

    _keys = ("min_ade", "min_fde", "jade", "jfde", "avg_ade", "avg_fde", "kde_nll")

    def __init__(self, threshold: float = COLLISION_THRESHOLD):
        self.threshold = threshold
        self.sums = dict.fromkeys(self._keys, 0.0)
        self.agents = 0
        self.scenes = 0
        self.samples = 0
        self.a2a_hits = 0
        self.a2a_total = 0
        self.env_hits = 0
        self.env_total = 0

    def add(self, gt, preds, nav_map: NavigabilityMap | None = None) -> None:
        gt, preds = _check(gt, preds)
        k, n = preds.shape[:2]
        ade, fde = _per_sample_agent(gt, preds)
        for name, table in (("ade", ade), ("fde", fde)):
            marginal, joint, average = _reduce(table)
            self.sums[f"min_{name}"] += marginal
            self.sums[f"j{name}"] += joint
            self.sums[f"avg_{name}"] += average
        self.sums["kde_nll"] += float(kde_nll_per_agent(gt, preds).sum())
        self.a2a_hits += int(a2a_collision_flags(preds, self.threshold).sum())
        self.a2a_total += k * n
        if nav_map is not None:
            self.env_hits += int(violations(nav_map, preds).sum())
            self.env_total += k * n
        self.agents += n
        self.scenes += 1
        self.samples += k

    def report(self, config: dict | None = None) -> MetricsReport:
        if self.agents == 0:
            raise ValueError("no scenes evaluated")
        m = {key: self.sums[key] / self.agents for key in self._keys}
        return MetricsReport(
            a2a_collision_rate=self.a2a_hits / self.a2a_total,
            env_collision_rate=(self.env_hits / self.env_total) if self.env_total else None,
            counts={"scenes": self.scenes, "agents": self.agents, "samples": self.samples},
            config={"collision_threshold": self.threshold,
                    "bandwidth_rule": "silverman_per_dimension", "bandwidth_floor": BANDWIDTH_FLOOR,
                    **(config or {})},
            **m,
        )


def evaluate(items: Iterable, threshold: float = COLLISION_THRESHOLD, config: dict | None = None) -> MetricsReport:
    """``items`` yields ``(gt, preds)`` or ``(gt, preds, nav_map)``."""
    acc = MetricsAccumulator(threshold)
    for item in items:
        acc.add(*item)
    return acc.report(config)
