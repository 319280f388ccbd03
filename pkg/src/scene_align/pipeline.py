"""End-to-end scene prediction: profile every agent, build the scene MRF, sample."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorDatabase
from .environment import DEFAULT_MAX_RANGE, DistanceArray, NavigabilityMap, N_BEARINGS, distance_array, \
    prelabel_anchor_validity
from .mrf import (COLLISION_THRESHOLD, DEFAULT_EDGE_RADIUS, MASK_VALUE, BilinearPairwise, ScenePredictionSet,
                  SceneMRF, build_scene_mrf, gibbs_sample, rank_aligned_predictions)
from .profiler import BASELINE_TEMPERATURE, PrototypeSet, ScorerParams, profile_agent
from .trajectory import Scene, pose_from_history

CHAIN_MODES = ("parallel_chains", "sequential")


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 20
    burn_in: int = 100
    seed: int = 0
    env_filter: bool = True
    a2a_filter: bool = True
    gibbs: bool = True
    chain_mode: str = "parallel_chains"
    edge_radius: float = DEFAULT_EDGE_RADIUS
    threshold: float = COLLISION_THRESHOLD
    mask_value: float = MASK_VALUE
    temperature: float = BASELINE_TEMPERATURE
    max_range: float = DEFAULT_MAX_RANGE
    bp_iterations: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.chain_mode == "parallel":
            object.__setattr__(self, "chain_mode", "parallel_chains")
        if self.chain_mode not in CHAIN_MODES:
            raise ValueError(f"chain_mode must be one of {CHAIN_MODES}")
        if not (self.threshold > 0 and self.edge_radius >= self.threshold):
            raise ValueError("need 0 < threshold <= edge_radius")
        if not (self.mask_value < 0):
            raise ValueError("mask_value must be negative")
        if not (self.temperature > 0):
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown pipeline settings: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scene_seed(seed: int, scene_id: str) -> tuple[int, int]:
    """Per-scene stream key; independent of the order scenes are processed in."""
    return (int(seed), zlib.crc32(scene_id.encode()))


def profile_scene(scene: Scene, db: AnchorDatabase, cfg: PipelineConfig, nav_map: NavigabilityMap | None = None,
                  scorer: ScorerParams | None = None) -> list[PrototypeSet]:
    sets = []
    for aid, hist in zip(scene.agent_ids, scene.histories):
        pose, _ = pose_from_history(hist)
        if nav_map is not None:
            dist = distance_array(nav_map, pose, cfg.max_range)
        else:
            dist = DistanceArray(np.full(N_BEARINGS, cfg.max_range), cfg.max_range)
        mask = prelabel_anchor_validity(nav_map, pose, db) if (cfg.env_filter and nav_map is not None) else None
        ps, _ = profile_agent(hist, db, cfg.k, dist, mask, scorer, cfg.temperature, aid)
        sets.append(ps)
    return sets


def scene_mrf(prototype_sets: list[PrototypeSet], cfg: PipelineConfig,
              pairwise: BilinearPairwise | None = None, basis=None) -> SceneMRF:
    return build_scene_mrf(prototype_sets, pairwise_model="analytic" if pairwise is None else pairwise,
                           basis=basis, a2a_filter=cfg.a2a_filter, threshold=cfg.threshold,
                           mask_value=cfg.mask_value, edge_radius=cfg.edge_radius)


def predict_scene(scene: Scene, db: AnchorDatabase, cfg: PipelineConfig = PipelineConfig(),
                  nav_map: NavigabilityMap | None = None, scorer: ScorerParams | None = None,
                  pairwise: BilinearPairwise | None = None, workers: int = 1) -> ScenePredictionSet:
    """K joint samples for one scene; deterministic in ``(cfg.seed, scene.scene_id)``."""
    sets = profile_scene(scene, db, cfg, nav_map, scorer)
    mrf = scene_mrf(sets, cfg, pairwise, db.basis)
    if cfg.gibbs:
        pred = gibbs_sample(mrf, cfg.burn_in, cfg.k, scene_seed(cfg.seed, scene.scene_id), cfg.chain_mode, workers)
    else:
        pred = rank_aligned_predictions(mrf, cfg.k, iterations=cfg.bp_iterations)
    pred.scene_id = scene.scene_id
    pred.sampler_config.update(env_filter=cfg.env_filter, a2a_filter=cfg.a2a_filter, gibbs=cfg.gibbs)
    return pred
