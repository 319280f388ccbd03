"""Synthetic interaction suite for collision and ablation measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorDatabase, build_anchor_db
from .data import SyntheticScenario, generate_synthetic_scene, synthetic_corridor_map
from .environment import NavigabilityMap
from .metrics import a2a_collision_rate, env_collision_rate
from .mrf import has_feasible_assignment
from .pipeline import PipelineConfig, predict_scene, profile_scene, scene_mrf
from .trajectory import DEFAULT_DT, Scene, Trajectory

SUITE_KINDS = ("crossing", "head_on")
# slow crowd walking; at higher speeds pairs step past each other between frames
SUITE_SPEED = (0.4, 0.8)


def curved_walker(rng: np.random.Generator, obs_len: int = 8, pred_len: int = 12, dt: float = DEFAULT_DT,
                  noise_std: float = 0.02) -> Scene:
    """One pedestrian with random speed, heading and constant turn rate."""
    speed = rng.uniform(0.3, 2.0)
    heading = rng.uniform(-math.pi, math.pi)
    turn = rng.uniform(-0.6, 0.6)
    t = np.arange(obs_len + pred_len)
    ang = heading + turn * dt * t
    steps = speed * dt * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = np.cumsum(steps, axis=0) + rng.normal(0.0, noise_std, size=steps.shape)
    return Scene([0], [Trajectory(pts[:obs_len], dt)], [Trajectory(pts[obs_len:], dt)],
                 scene_id=f"walker-{int(rng.integers(1 << 30))}")


def training_corpus(n: int = 600, seed: int = 0) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [curved_walker(rng) for _ in range(n)]


def suite_anchor_db(seed: int = 0, k_anchors: int = 64) -> AnchorDatabase:
    return build_anchor_db(training_corpus(seed=seed), k_anchors=k_anchors, seed=seed)


def suite_scene(seed: int) -> tuple[Scene, NavigabilityMap]:
    """Crossing (even seeds) or head-on (odd seeds) pair with a corridor map."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    kind = SUITE_KINDS[seed % 2]
    sc = SyntheticScenario(kind, n_agents=2, speed=float(rng.uniform(*SUITE_SPEED)), noise_std=0.02,
                           seed=seed, rotation=float(rng.uniform(0.0, 2.0 * math.pi)))
    scene = generate_synthetic_scene(sc)
    return scene, synthetic_corridor_map(scene)


def is_feasible(scene: Scene, db: AnchorDatabase, nav_map: NavigabilityMap, cfg: PipelineConfig) -> bool:
    """Whether some joint prototype choice avoids every masked pair."""
    return has_feasible_assignment(scene_mrf(profile_scene(scene, db, cfg, nav_map), cfg))


@dataclass(frozen=True)
class ArmRates:
    a2a: float
    env: float


@dataclass(frozen=True)
class SuiteRecord:
    seed: int
    kind: str
    full: ArmRates
    env_off: ArmRates
    gibbs_off: ArmRates


ARMS = {
    "full": {},
    "env_off": {"env_filter": False},
    "gibbs_off": {"gibbs": False},
}


def run_arm(scene: Scene, nav_map: NavigabilityMap, db: AnchorDatabase, cfg: PipelineConfig) -> ArmRates:
    pred = predict_scene(scene, db, cfg, nav_map)
    return ArmRates(a2a_collision_rate(pred.trajectories, cfg.threshold),
                    env_collision_rate(pred.trajectories, nav_map))


def run_suite(n_scenes: int = 50, db: AnchorDatabase | None = None, cfg: PipelineConfig = PipelineConfig(),
              max_tries: int = 500) -> list[SuiteRecord]:
    """First ``n_scenes`` feasible suite scenes, each run under every arm."""
    db = suite_anchor_db() if db is None else db
    records = []
    seed = 0
    while len(records) < n_scenes:
        if seed >= max_tries:
            raise RuntimeError(f"only {len(records)} feasible scenes in {max_tries} tries")
        scene, nav_map = suite_scene(seed)
        if is_feasible(scene, db, nav_map, cfg):
            rates = {name: run_arm(scene, nav_map, db, PipelineConfig(**{**cfg.to_dict(), **over, "seed": seed}))
                     for name, over in ARMS.items()}
            records.append(SuiteRecord(seed, scene.meta["kind"], **rates))
        seed += 1
    return records
