"""Dataset ingestion, windowing, synthetic scenes, map files and prediction files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .environment import NavigabilityMap
from .trajectory import DEFAULT_DT, Point2, Scene, Trajectory


class RawAnnotation(NamedTuple):
    frame_id: int
    agent_id: int
    x: float
    y: float


class DataFormatError(ValueError):
    pass


def _as_int(token: str, what: str, lineno: int) -> int:
    value = float(token)
    if not value.is_integer():
        raise DataFormatError(f"line {lineno}: {what} {token!r} is not an integer")
    return int(value)


def parse_ethucy(path: str | Path) -> list[RawAnnotation]:
    """Rows of ``frame id x y`` (whitespace or tab separated), sorted by (frame, id)."""
    rows = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                frame = _as_int(parts[0], "frame", lineno)
                agent = _as_int(parts[1], "agent id", lineno)
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
            if (frame, agent) in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate (frame, agent) = ({frame}, {agent})")
            seen.add((frame, agent))
            rows.append(RawAnnotation(frame, agent, x, y))
    rows.sort(key=lambda r: (r.frame_id, r.agent_id))
    return rows


def write_ethucy(path: str | Path, annotations: Iterable[RawAnnotation]) -> None:
    with open(path, "w") as fh:
        for a in sorted(annotations, key=lambda r: (r.frame_id, r.agent_id)):
            fh.write(f"{a.frame_id}\t{a.agent_id}\t{a.x!r}\t{a.y!r}\n")


@dataclass(frozen=True)
class WindowConfig:
    obs_len: int = 8
    pred_len: int = 12
    stride: int = 10
    frame_step: int = 10
    dt: float = DEFAULT_DT

    def __post_init__(self):
        for name in ("obs_len", "pred_len", "stride", "frame_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.obs_len < 2:
            raise ValueError("obs_len must be >= 2 to define a heading")


def make_windows(annotations: Sequence[RawAnnotation], cfg: WindowConfig = WindowConfig(),
                 source: str = "", map_id: str | None = None) -> list[Scene]:
    """Sliding windows of ``obs_len + pred_len`` timesteps.

    Only agents present at every timestep of a window join that scene, and
    windows with no such agent are dropped. Scene ids are ``source:start_frame``.
    """
    if not annotations:
        return []
    pos: dict[tuple[int, int], tuple[float, float]] = {}
    by_frame: dict[int, set[int]] = {}
    for a in annotations:
        pos[(a.frame_id, a.agent_id)] = (a.x, a.y)
        by_frame.setdefault(a.frame_id, set()).add(a.agent_id)
    first, last = min(by_frame), max(by_frame)
    total = cfg.obs_len + cfg.pred_len
    span = (total - 1) * cfg.frame_step
    scenes = []
    start = first
    while start + span <= last:
        frames = [start + t * cfg.frame_step for t in range(total)]
        present = set(by_frame.get(frames[0], ()))
        for f in frames[1:]:
            present &= by_frame.get(f, set())
            if not present:
                break
        if present:
            ids = sorted(present)
            hist, fut = [], []
            for aid in ids:
                pts = np.array([pos[(f, aid)] for f in frames])
                hist.append(Trajectory(pts[: cfg.obs_len], cfg.dt))
                fut.append(Trajectory(pts[cfg.obs_len:], cfg.dt))
            scenes.append(Scene(ids, hist, fut, map_id=map_id, scene_id=f"{source}:{start}"))
        start += cfg.stride
    return scenes


def scene_to_annotations(scene: Scene, start_frame: int = 0, frame_step: int = 10) -> list[RawAnnotation]:
    """Inverse of windowing for one scene (histories followed by futures)."""
    rows = []
    for aid, hist, fut in zip(scene.agent_ids, scene.histories, scene.futures or [None] * scene.n_agents):
        pts = hist.points if fut is None else np.vstack([hist.points, fut.points])
        for t, (x, y) in enumerate(pts):
            rows.append(RawAnnotation(start_frame + t * frame_step, int(aid), float(x), float(y)))
    return rows


# --- synthetic scenes -------------------------------------------------------

SYNTHETIC_KINDS = ("crossing", "parallel", "circle", "head_on")


@dataclass(frozen=True)
class SyntheticScenario:
    kind: str
    n_agents: int = 2
    speed: float = 1.2
    noise_std: float = 0.0
    seed: int = 0
    gap: float = 1.0
    radius: float = 4.0
    rotation: float = 0.0
    obs_len: int = 8
    pred_len: int = 12
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.kind in ("crossing", "head_on") and self.n_agents != 2:
            raise ValueError(f"{self.kind} scenarios have exactly 2 agents")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def generate_synthetic_scene(sc: SyntheticScenario) -> Scene:
    """Straight-line walkers at constant ``speed``.

    crossing: one walker along +x and one along +y, both at the origin at
    mid-future. head_on: two walkers on the x axis meeting at the origin at
    mid-future. parallel: walkers side by side along +x, ``gap`` apart.
    circle: walkers start evenly spaced on a circle of ``radius`` and head
    for their antipodes, so they all pass the center together. The layout
    is rotated by ``rotation``; noise is added independently to every point.
    """
    total = sc.obs_len + sc.pred_len
    t = np.arange(total, dtype=np.float64)
    step = sc.speed * sc.dt
    if sc.kind == "circle":
        ang = 2.0 * np.pi * np.arange(sc.n_agents) / sc.n_agents
        rim = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        starts, dirs, arc = sc.radius * rim, -rim, t * step
    else:
        arc = (t - (sc.obs_len + sc.pred_len // 2 - 1)) * step
        if sc.kind == "crossing":
            dirs = np.array([[1.0, 0.0], [0.0, 1.0]])
            starts = np.zeros((2, 2))
        elif sc.kind == "head_on":
            dirs = np.array([[1.0, 0.0], [-1.0, 0.0]])
            starts = np.zeros((2, 2))
        else:
            dirs = np.tile([1.0, 0.0], (sc.n_agents, 1))
            offsets = (np.arange(sc.n_agents) - (sc.n_agents - 1) / 2.0) * sc.gap
            starts = np.stack([np.zeros(sc.n_agents), offsets], axis=1)
    pts = starts[:, None, :] + arc[None, :, None] * dirs[:, None, :]
    c, sn = math.cos(sc.rotation), math.sin(sc.rotation)
    pts = pts @ np.array([[c, -sn], [sn, c]]).T
    if sc.noise_std > 0:
        rng = np.random.default_rng(sc.seed)
        pts = pts + rng.normal(0.0, sc.noise_std, size=pts.shape)
    hist = [Trajectory(p[: sc.obs_len], sc.dt) for p in pts]
    fut = [Trajectory(p[sc.obs_len:], sc.dt) for p in pts]
    return Scene(list(range(pts.shape[0])), hist, fut, map_id=None,
                 scene_id=f"synthetic-{sc.kind}-{sc.seed}", meta={"kind": sc.kind, "speed": sc.speed})


def synthetic_corridor_map(scenes: Scene | Sequence[Scene], half_width: float = 1.0,
                           resolution: float = 0.1, margin: float = 3.0) -> NavigabilityMap:
    """Navigable corridors of ``half_width`` around every agent's full path.

    Histories and futures are both covered, so GT never violates the map,
    while anchors that turn away from the walking direction leave it.
    """
    scenes = [scenes] if isinstance(scenes, Scene) else list(scenes)
    paths = []
    for s in scenes:
        for i in range(s.n_agents):
            pts = s.histories[i].points
            if s.futures is not None:
                pts = np.vstack([pts, s.futures[i].points])
            paths.append(pts)
    allpts = np.vstack(paths)
    lo = allpts.min(axis=0) - margin
    hi = allpts.max(axis=0) + margin
    w = int(math.ceil((hi[0] - lo[0]) / resolution))
    h = int(math.ceil((hi[1] - lo[1]) / resolution))
    xs = lo[0] + (np.arange(w) + 0.5) * resolution
    ys = lo[1] + (np.arange(h) + 0.5) * resolution
    cx, cy = np.meshgrid(xs, ys)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    grid = np.zeros(centers.shape[0], dtype=bool)
    for pts in paths:
        for a, b in zip(pts[:-1], pts[1:]):
            seg = b - a
            L2 = float(seg @ seg)
            t = np.zeros(len(centers)) if L2 == 0 else np.clip((centers - a) @ seg / L2, 0.0, 1.0)
            proj = a + t[:, None] * seg
            grid |= np.sum((centers - proj) ** 2, axis=1) <= half_width ** 2
    return NavigabilityMap(grid.reshape(h, w), Point2(lo[0], lo[1]), resolution, y_up=True,
                           scene_id=scenes[0].scene_id if scenes else None)


# --- map files --------------------------------------------------------------

NAVIGABLE_PIXEL = 128


class MapFormatError(DataFormatError):
    pass


def load_navigability_map(png_path: str | Path, json_path: str | Path | None = None) -> NavigabilityMap:
    """PNG (8-bit grayscale, value >= 128 is navigable) plus JSON sidecar.

    Pixel (row r, col c) is the cell with row 0 at the top; with
    ``"y_up": true`` in the sidecar row 0 is the bottom instead.
    """
    from PIL import Image

    png_path = Path(png_path)
    json_path = Path(json_path) if json_path is not None else png_path.with_suffix(".json")
    if not json_path.exists():
        raise MapFormatError(f"missing map sidecar {json_path}")
    meta = json.loads(json_path.read_text())
    try:
        origin = Point2(float(meta["origin_x"]), float(meta["origin_y"]))
        res = float(meta["resolution_m_per_px"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MapFormatError(f"{json_path}: bad sidecar field {exc}") from None
    with Image.open(png_path) as img:
        pixels = np.asarray(img.convert("L"), dtype=np.uint8)
    for key, axis in (("height", 0), ("width", 1)):
        if key in meta and int(meta[key]) != pixels.shape[axis]:
            raise MapFormatError(f"{json_path}: {key} {meta[key]} does not match image {pixels.shape[axis]}")
    return NavigabilityMap(pixels >= NAVIGABLE_PIXEL, origin, res, y_up=bool(meta.get("y_up", False)),
                           scene_id=meta.get("scene_id"))


def save_navigability_map(nav_map: NavigabilityMap, png_path: str | Path, json_path: str | Path | None = None) -> None:
    from PIL import Image

    png_path = Path(png_path)
    json_path = Path(json_path) if json_path is not None else png_path.with_suffix(".json")
    Image.fromarray(np.where(nav_map.grid, 255, 0).astype(np.uint8), mode="L").save(png_path)
    h, w = nav_map.shape
    meta = {"origin_x": nav_map.origin.x, "origin_y": nav_map.origin.y,
            "resolution_m_per_px": nav_map.resolution, "scene_id": nav_map.scene_id,
            "y_up": nav_map.y_up, "height": h, "width": w}
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# --- split configs ----------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    train: tuple[Path, ...]
    test: tuple[Path, ...]
    window: WindowConfig
    maps: dict


def load_split_config(path: str | Path) -> SplitConfig:
    """``{"train": [...], "test": [...], "frame_step", "stride", "maps": {source: png}}``.

    Relative paths resolve against the config file's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent

    def resolve(p):
        q = Path(p)
        return q if q.is_absolute() else base / q

    if "test" not in doc:
        raise DataFormatError(f"{path}: split config needs a 'test' list")
    window = WindowConfig(obs_len=int(doc.get("obs_len", 8)), pred_len=int(doc.get("pred_len", 12)),
                          stride=int(doc.get("stride", 10)), frame_step=int(doc.get("frame_step", 10)))
    return SplitConfig(tuple(resolve(p) for p in doc.get("train", [])),
                       tuple(resolve(p) for p in doc["test"]), window,
                       {k: resolve(v) for k, v in doc.get("maps", {}).items()})


def load_scenes(paths: Iterable[str | Path], cfg: WindowConfig = WindowConfig()) -> list[Scene]:
    scenes = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"no such data file: {p}")
        scenes.extend(make_windows(parse_ethucy(p), cfg, source=p.stem, map_id=p.stem))
    return scenes


# --- scene and prediction files --------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    doc = {"scene": scene.scene_id, "map_id": scene.map_id, "dt": scene.histories[0].dt,
           "agents": [int(a) for a in scene.agent_ids],
           "history": [h.points.tolist() for h in scene.histories]}
    if scene.futures is not None:
        doc["future"] = [f.points.tolist() for f in scene.futures]
    return doc


def scene_from_dict(doc: dict) -> Scene:
    dt = float(doc.get("dt", DEFAULT_DT))
    hist = [Trajectory(np.asarray(h, dtype=np.float64), dt) for h in doc["history"]]
    fut = [Trajectory(np.asarray(f, dtype=np.float64), dt) for f in doc["future"]] if "future" in doc else None
    return Scene(list(doc["agents"]), hist, fut, map_id=doc.get("map_id"), scene_id=doc["scene"])


def write_scenes_jsonl(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s), sort_keys=True) + "\n")


def read_scenes_jsonl(path: str | Path) -> list[Scene]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(scene_from_dict(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def prediction_lines(pred, seed=None) -> list[str]:
    """One JSON line per sample of a ``ScenePredictionSet`` with trajectories."""
    if pred.trajectories is None:
        raise ValueError("prediction set has no trajectories")
    lines = []
    for s in range(len(pred)):
        doc = {"scene": pred.scene_id, "sample": s, "energy": float(pred.energies[s]),
               "agents": {str(a): pred.trajectories[s, i].tolist() for i, a in enumerate(pred.agent_ids)}}
        if seed is not None:
            doc["seed"] = seed
        lines.append(json.dumps(doc, sort_keys=True))
    return lines


@dataclass
class ScenePredictions:
    scene_id: str
    agent_ids: list[str]
    energies: np.ndarray  # (K,)
    trajectories: np.ndarray  # (K, N, T, 2)


def read_predictions(path: str | Path) -> dict[str, ScenePredictions]:
    """Group prediction lines by scene, samples ordered by index."""
    rows: dict[str, list[dict]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                rows.setdefault(str(doc["scene"]), []).append(doc)
            except (KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    out = {}
    for sid, docs in rows.items():
        docs.sort(key=lambda d: d["sample"])
        ids = list(docs[0]["agents"])
        for d in docs:
            if list(d["agents"]) != ids:
                raise DataFormatError(f"scene {sid}: agent ids differ between samples")
        trajs = np.array([[d["agents"][a] for a in ids] for d in docs], dtype=np.float64)
        out[sid] = ScenePredictions(sid, ids, np.array([d["energy"] for d in docs]), trajs)
    return out
