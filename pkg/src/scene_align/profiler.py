"""Agent-centric profiler.

Scores every anchor for one agent, zeroes out anchors that would leave the
navigable area, and keeps the top-K as world-frame prototypes. Scoring is
either a cosine baseline (extrapolated-motion latent vs anchor latent) or a
linear scorer trained with the focal loss.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import AnchorDatabase, SvdBasis, compress
from .environment import DistanceArray, N_BEARINGS
from .trajectory import (
    AgentPose,
    Trajectory,
    constant_velocity_extrapolate,
    from_agent_frame_points,
    pose_from_history,
    to_agent_frame_points,
)

log = logging.getLogger(__name__)

N_SECTORS = 36
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_FLOOR = 1e-12
BASELINE_TEMPERATURE = 0.1


class NoValidAnchorsError(ValueError):
    """Every anchor is masked out for this agent."""


@dataclass(frozen=True, eq=False)
class ScoreVector:
    logits: np.ndarray
    probs: np.ndarray | None = None
    env_mask: np.ndarray | None = None
    fallback: bool = False


@dataclass(frozen=True, eq=False)
class PrototypeSkeleton:
    anchor_indices: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    agent_id: object
    pose: AgentPose
    anchor_indices: np.ndarray
    trajectories: np.ndarray  # (K, t_f, 2) world frame
    logits: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return self.anchor_indices.shape[0]


def feature_spec(d_s: int) -> dict:
    return {
        "extrapolation_latent": [0, d_s],
        "speed_stats": [d_s, d_s + 3],
        "sector_min_distance": [d_s + 3, d_s + 3 + N_SECTORS],
    }


@dataclass(eq=False)
class ScorerParams:
    weights: np.ndarray  # (d_feat, n_anchors)
    bias: np.ndarray  # (n_anchors,)
    temperature: float = 1.0
    feature_spec: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not (self.temperature > 0):
            raise ValueError("temperature must be positive")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("weights must be (d_feat, n_anchors) with matching bias")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("scorer parameters must be finite")

    @classmethod
    def initial(cls, d_feat: int, n_anchors: int, seed: int = 0, scale: float = 0.01,
                temperature: float = 1.0, spec: dict | None = None) -> "ScorerParams":
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((d_feat, n_anchors)), np.zeros(n_anchors),
                   temperature, dict(spec or {}), seed)

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.weights.copy(), self.bias.copy(), self.temperature,
                            dict(self.feature_spec), self.seed)

    def to_json(self) -> str:
        return json.dumps({
            "weights": self.weights.reshape(-1).tolist(),
            "shape": list(self.weights.shape),
            "bias": self.bias.tolist(),
            "temperature": self.temperature,
            "feature_spec": self.feature_spec,
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "ScorerParams":
        doc = json.loads(text)
        bias = np.asarray(doc["bias"], dtype=np.float64)
        shape = doc.get("shape") or [len(doc["weights"]) // len(bias), len(bias)]
        return cls(np.asarray(doc["weights"], dtype=np.float64).reshape(shape), bias,
                   float(doc["temperature"]), doc.get("feature_spec", {}), int(doc.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ScorerParams":
        return cls.from_json(Path(path).read_text())


def agent_features(history: Trajectory, dist: DistanceArray, basis: SvdBasis) -> tuple[np.ndarray, bool]:
    """Feature vector laid out as in :func:`feature_spec`, plus a stationary flag.

    (a) latent of the agent-frame constant-velocity extrapolation,
    (b) mean / last / std of observed step speeds,
    (c) per-10-degree minima of the distance array.
    """
    pose, degenerate = pose_from_history(history)
    extrap = constant_velocity_extrapolate(history, basis.t_f)
    latent = compress(to_agent_frame_points(extrap.points, pose).reshape(-1), basis)
    speeds = np.linalg.norm(np.diff(history.points, axis=0), axis=1) / history.dt
    stats = np.array([speeds.mean(), speeds[-1], speeds.std()])
    if degenerate:
        latent = np.zeros_like(latent)
    sectors = np.asarray(dist.distances, dtype=np.float64).reshape(N_SECTORS, N_BEARINGS // N_SECTORS).min(axis=1)
    return np.concatenate([latent, stats, sectors]), degenerate


def score_anchors(features: np.ndarray, db: AnchorDatabase, params: ScorerParams | None = None,
                  temperature: float = BASELINE_TEMPERATURE) -> ScoreVector:
    """Per-anchor logits. ``params=None`` selects the cosine baseline."""
    f = np.asarray(features, dtype=np.float64)
    if params is None:
        if not (temperature > 0):
            raise ValueError("temperature must be positive")
        q = f[: db.d_s]
        if q.shape[0] != db.d_s:
            raise ValueError("feature vector shorter than the latent dimension")
        qn = np.linalg.norm(q)
        an = np.linalg.norm(db.compressed, axis=1)
        denom = qn * an
        cos = np.divide(db.compressed @ q, denom, out=np.zeros(len(db)), where=denom > 0)
        return ScoreVector(np.clip(cos, -1.0, 1.0) / temperature)
    if params.weights.shape != (f.shape[0], len(db)):
        raise ValueError(f"scorer weights {params.weights.shape} do not fit "
                         f"{f.shape[0]} features x {len(db)} anchors")
    return ScoreVector((f @ params.weights + params.bias) / params.temperature)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


def env_masked_softmax(logits: np.ndarray, env_mask: np.ndarray | None = None) -> ScoreVector:
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.ones(logits.shape, dtype=bool) if env_mask is None else np.asarray(env_mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ValueError("mask and logits differ in shape")
    if not mask.any():
        raise NoValidAnchorsError("no valid anchors: every entry is masked")
    return ScoreVector(logits, _masked_softmax(logits, mask), mask)


def masked_softmax_or_fallback(logits: np.ndarray, env_mask: np.ndarray) -> ScoreVector:
    """Masked softmax; when nothing survives the mask, unmasked with ``fallback=True``."""
    try:
        return env_masked_softmax(logits, env_mask)
    except NoValidAnchorsError:
        log.warning("all anchors masked; falling back to unmasked softmax")
        sv = env_masked_softmax(logits, None)
        return ScoreVector(sv.logits, sv.probs, sv.env_mask, fallback=True)


def select_top_k(scores: ScoreVector, k: int) -> PrototypeSkeleton:
    """Highest-probability unmasked anchors; ties go to the lower index."""
    if scores.probs is None:
        raise ValueError("scores need probabilities; run env_masked_softmax first")
    mask = scores.env_mask if scores.env_mask is not None else np.ones(scores.probs.shape, dtype=bool)
    n_valid = int(mask.sum())
    if k < 1 or k > n_valid:
        raise ValueError(f"K={k} exceeds the {n_valid} unmasked anchors")
    key = np.where(mask, scores.probs, -np.inf)
    order = np.argsort(-key, kind="stable")[:k]
    p = scores.probs[order]
    total = p.sum()
    probs = p / total if total > 0 else np.full(k, 1.0 / k)
    return PrototypeSkeleton(order, scores.logits[order].copy(), probs)


def materialize_prototypes(skeleton: PrototypeSkeleton, db: AnchorDatabase, pose: AgentPose,
                           agent_id=None) -> PrototypeSet:
    world = from_agent_frame_points(db.anchors[skeleton.anchor_indices], pose)
    return PrototypeSet(agent_id, pose, skeleton.anchor_indices, world, skeleton.logits, skeleton.probs)


def focal_loss(prob: float, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """``-alpha (1 - p)^gamma log p`` with ``p`` clamped to 1e-12 from below."""
    if prob <= 0:
        warnings.warn(f"focal loss probability {prob} clamped to {PROB_FLOOR}", RuntimeWarning, stacklevel=2)
    p = min(max(float(prob), PROB_FLOOR), 1.0)
    return -alpha * (1.0 - p) ** gamma * math.log(p)


def focal_loss_grad(prob: float, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """d focal / d p."""
    p = min(max(float(prob), PROB_FLOOR), 1.0)
    q = 1.0 - p
    lead = alpha * gamma * q ** (gamma - 1.0) * math.log(p) if q > 0 else 0.0
    return lead - alpha * q ** gamma / p


def wta_regression_loss(prototypes: PrototypeSet | np.ndarray, gt: Trajectory | np.ndarray) -> tuple[float, int]:
    """Best-of-K flattened L2 error and the index of the winner."""
    protos = prototypes.trajectories if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    target = gt.points if isinstance(gt, Trajectory) else np.asarray(gt)
    if protos.shape[1:] != target.shape:
        raise ValueError(f"prototype shape {protos.shape[1:]} != ground truth {target.shape}")
    errs = np.sqrt(np.sum((protos - target[None]) ** 2, axis=(1, 2)))
    k = int(np.argmin(errs))
    return float(errs[k]), k


@dataclass(frozen=True, eq=False)
class ScorerExample:
    features: np.ndarray
    gt_index: int
    env_mask: np.ndarray


@dataclass(eq=False)
class TrainingResult:
    params: ScorerParams
    loss_curve: list[float]


class TrainingDivergedError(FloatingPointError):
    pass


def _as_example(ex) -> ScorerExample:
    if isinstance(ex, ScorerExample):
        return ex
    f, m, mask = ex
    return ScorerExample(np.asarray(f, dtype=np.float64), int(m), np.asarray(mask, dtype=bool))


def scorer_loss_and_grad(params: ScorerParams, dataset: Sequence,
                         alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Mean focal loss of the GT anchor's masked-softmax probability and its gradient.

    Returns ``(loss, grad_weights, grad_bias)``.
    """
    examples = [_as_example(e) for e in dataset]
    if not examples:
        raise ValueError("empty dataset")
    gw = np.zeros_like(params.weights)
    gb = np.zeros_like(params.bias)
    total = 0.0
    t = params.temperature
    for ex in examples:
        if not ex.env_mask[ex.gt_index]:
            raise ValueError(f"ground-truth anchor {ex.gt_index} is masked out")
        z = (ex.features @ params.weights + params.bias) / t
        p = _masked_softmax(z, ex.env_mask)
        pm = p[ex.gt_index]
        total += focal_loss(pm, alpha, gamma)
        dz = -pm * p
        dz[ex.gt_index] += pm
        dz *= focal_loss_grad(pm, alpha, gamma) / t
        gw += np.outer(ex.features, dz)
        gb += dz
    n = len(examples)
    return total / n, gw / n, gb / n


def train_scorer(dataset: Sequence, params: ScorerParams | None = None, epochs: int = 100,
                 lr: float = 0.1, seed: int = 0, n_anchors: int | None = None) -> TrainingResult:
    """Full-batch gradient descent on the mean focal loss.

    When ``params`` is None they are initialised from ``seed``; this needs
    ``n_anchors`` (or infers it from the first mask).
    """
    examples = [_as_example(e) for e in dataset]
    if not examples:
        raise ValueError("empty dataset")
    if params is None:
        k = n_anchors or examples[0].env_mask.shape[0]
        params = ScorerParams.initial(examples[0].features.shape[0], k, seed=seed)
    params = params.copy()
    curve = []
    for epoch in range(epochs):
        loss, gw, gb = scorer_loss_and_grad(params, examples)
        if not math.isfinite(loss) or not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise TrainingDivergedError(
                f"loss diverged at epoch {epoch} (loss={loss}, |gW|max={np.nanmax(np.abs(gw))}, lr={lr})")
        curve.append(loss)
        if lr != 0.0:
            params.weights = params.weights - lr * gw
            params.bias = params.bias - lr * gb
    if epochs > 0:
        curve.append(scorer_loss_and_grad(params, examples)[0])
    return TrainingResult(params, curve)


def profile_agent(history: Trajectory, db: AnchorDatabase, k: int, dist: DistanceArray,
                  env_mask: np.ndarray | None = None, params: ScorerParams | None = None,
                  temperature: float = BASELINE_TEMPERATURE, agent_id=None) -> tuple[PrototypeSet, ScoreVector]:
    """Score, mask, pick top-K and place the prototypes in the world frame.

    K is clipped to the number of unmasked anchors so a tight map still
    yields a (smaller) compliant set.
    """
    pose, _ = pose_from_history(history)
    feats, _ = agent_features(history, dist, db.basis)
    logits = score_anchors(feats, db, params, temperature).logits
    mask = np.ones(len(db), dtype=bool) if env_mask is None else env_mask
    scores = masked_softmax_or_fallback(logits, mask)
    k_eff = min(k, int(scores.env_mask.sum()))
    skeleton = select_top_k(scores, k_eff)
    return materialize_prototypes(skeleton, db, pose, agent_id), scores
