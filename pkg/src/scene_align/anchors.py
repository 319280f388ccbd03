"""Anchor trajectory database.

Ground-truth futures are normalized into each agent's own frame, flattened
into a motion matrix, compressed with a truncated SVD basis and clustered
with k-means; the decompressed cluster centers are the anchors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trajectory import Scene, pose_from_history, to_agent_frame_points

log = logging.getLogger(__name__)

DEFAULT_LATENT_DIM = 4
DEFAULT_NUM_ANCHORS = 64


@dataclass(frozen=True)
class MotionMatrix:
    data: np.ndarray  # (N_train, 2 * t_f)
    t_f: int

    @property
    def rows(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class SvdBasis:
    v_rows: np.ndarray  # (d_s, 2 * t_f), orthonormal rows
    singular_values: np.ndarray  # (d_s,), non-increasing

    @property
    def d_s(self) -> int:
        return self.v_rows.shape[0]

    @property
    def t_f(self) -> int:
        return self.v_rows.shape[1] // 2


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    iterations: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0


@dataclass(frozen=True, eq=False)
class AnchorDatabase:
    anchors: np.ndarray  # (n_anchors, t_f, 2) in the canonical agent frame
    compressed: np.ndarray  # (n_anchors, d_s)
    basis: SvdBasis
    seed: int = 0
    kmeans_iterations: int = 0
    inertia: float = 0.0

    def __post_init__(self):
        if self.anchors.ndim != 3 or self.anchors.shape[2] != 2:
            raise ValueError(f"anchors must be (n, t_f, 2), got {self.anchors.shape}")
        if self.compressed.shape != (self.anchors.shape[0], self.basis.d_s):
            raise ValueError("compressed latents do not match anchors/basis")

    def __len__(self) -> int:
        return self.anchors.shape[0]

    @property
    def t_f(self) -> int:
        return self.anchors.shape[1]

    @property
    def d_s(self) -> int:
        return self.basis.d_s

    def __eq__(self, other):
        if not isinstance(other, AnchorDatabase):
            return NotImplemented
        return (
            np.array_equal(self.anchors, other.anchors)
            and np.array_equal(self.compressed, other.compressed)
            and np.array_equal(self.basis.v_rows, other.basis.v_rows)
            and np.array_equal(self.basis.singular_values, other.basis.singular_values)
            and self.seed == other.seed
            and self.kmeans_iterations == other.kmeans_iterations
            and self.inertia == other.inertia
        )

    def to_json(self) -> str:
        doc = {
            "d_s": self.d_s,
            "t_f": self.t_f,
            "basis": self.basis.v_rows.reshape(-1).tolist(),
            "singular_values": self.basis.singular_values.tolist(),
            "anchors": self.anchors.tolist(),
            "compressed": self.compressed.reshape(-1).tolist(),
            "seed": self.seed,
            "kmeans_iterations": self.kmeans_iterations,
            "inertia": self.inertia,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "AnchorDatabase":
        doc = json.loads(text)
        d_s, t_f = int(doc["d_s"]), int(doc["t_f"])
        basis = SvdBasis(
            np.asarray(doc["basis"], dtype=np.float64).reshape(d_s, 2 * t_f),
            np.asarray(doc["singular_values"], dtype=np.float64),
        )
        anchors = np.asarray(doc["anchors"], dtype=np.float64).reshape(-1, t_f, 2)
        if "compressed" in doc:
            compressed = np.asarray(doc["compressed"], dtype=np.float64).reshape(-1, d_s)
        else:
            compressed = compress(anchors.reshape(anchors.shape[0], -1), basis)
        return cls(
            anchors=anchors,
            compressed=compressed,
            basis=basis,
            seed=int(doc.get("seed", 0)),
            kmeans_iterations=int(doc.get("kmeans_iterations", 0)),
            inertia=float(doc.get("inertia", 0.0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "AnchorDatabase":
        return cls.from_json(Path(path).read_text())


def build_motion_matrix(scenes: Sequence[Scene]) -> MotionMatrix:
    """One agent-frame, flattened future per (scene, agent), in input order."""
    if not scenes:
        raise ValueError("empty training set")
    rows = []
    t_f = None
    for scene in scenes:
        if scene.futures is None:
            raise ValueError(f"scene {scene.scene_id!r} has no futures")
        for hist, fut in zip(scene.histories, scene.futures):
            if t_f is None:
                t_f = len(fut)
            elif len(fut) != t_f:
                raise ValueError("futures of different lengths in training set")
            pose, _ = pose_from_history(hist)
            rows.append(to_agent_frame_points(fut.points, pose).reshape(-1))
    if not rows:
        raise ValueError("training set contains no agents")
    return MotionMatrix(np.stack(rows), t_f)


def fit_svd_basis(matrix: MotionMatrix | np.ndarray, d_s: int = DEFAULT_LATENT_DIM) -> SvdBasis:
    """Top ``d_s`` right singular vectors of the (uncentered) motion matrix.

    Each basis row's sign is fixed so its largest-magnitude entry is positive,
    which makes the basis reproducible across LAPACK builds.
    """
    a = matrix.data if isinstance(matrix, MotionMatrix) else np.asarray(matrix, dtype=np.float64)
    if d_s < 1:
        raise ValueError("d_s must be >= 1")
    if d_s > min(a.shape):
        raise ValueError(f"d_s={d_s} exceeds min(rows, cols)={min(a.shape)}")
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    v = vt[:d_s].copy()
    pivots = np.argmax(np.abs(v), axis=1)
    signs = np.sign(v[np.arange(d_s), pivots])
    signs[signs == 0] = 1.0
    v *= signs[:, None]
    sv = s[:d_s].copy()
    # directions beyond the numerical rank are kept (still orthonormal) but carry zero weight
    tol = (s[0] if s.size else 0.0) * max(a.shape) * np.finfo(np.float64).eps
    sv[sv <= tol] = 0.0
    if np.any(sv == 0.0):
        log.info("motion matrix is rank deficient; %d of %d singular values are zero",
                 int(np.sum(sv == 0.0)), d_s)
    return SvdBasis(v, sv)


def compress(rows: np.ndarray, basis: SvdBasis) -> np.ndarray:
    r = np.asarray(rows, dtype=np.float64)
    if r.shape[-1] != basis.v_rows.shape[1]:
        raise ValueError(f"row length {r.shape[-1]} != {basis.v_rows.shape[1]}")
    return r @ basis.v_rows.T


def decompress(latents: np.ndarray, basis: SvdBasis) -> np.ndarray:
    v = np.asarray(latents, dtype=np.float64)
    if v.shape[-1] != basis.d_s:
        raise ValueError(f"latent length {v.shape[-1]} != {basis.d_s}")
    return v @ basis.v_rows


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    chosen = [int(rng.integers(m))]
    closest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0.0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        else:
            # fewer distinct points than clusters
            idx = next(i for i in range(m) if i not in chosen)
        chosen.append(idx)
        closest = np.minimum(closest, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def kmeans_cluster(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops when no assignment changes or after ``max_iter`` iterations. An
    emptied cluster is moved onto the point farthest from its current center.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2D array")
    m = x.shape[0]
    if k < 1 or m < k:
        raise ValueError(f"need at least k={k} points, got {m}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    assign = None
    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(m), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        point_d2 = d2[np.arange(m), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d2))
                centers[c] = x[far]
                point_d2[far] = 0.0
                assign[far] = c
    return KMeansResult(centers, assign, iterations, history)


def build_anchor_db(
    scenes: Sequence[Scene],
    d_s: int = DEFAULT_LATENT_DIM,
    k_anchors: int = DEFAULT_NUM_ANCHORS,
    seed: int = 0,
) -> AnchorDatabase:
    motion = build_motion_matrix(scenes)
    basis = fit_svd_basis(motion, d_s)
    latents = compress(motion.data, basis)
    km = kmeans_cluster(latents, k_anchors, seed=seed)
    anchors = decompress(km.centers, basis).reshape(k_anchors, motion.t_f, 2)
    return AnchorDatabase(
        anchors=anchors,
        compressed=km.centers.copy(),
        basis=basis,
        seed=seed,
        kmeans_iterations=km.iterations,
        inertia=km.inertia,
    )


def reconstruction_residual(matrix: np.ndarray, basis: SvdBasis) -> float:
    """Frobenius norm of ``A - A V^T V``."""
    a = np.asarray(matrix, dtype=np.float64)
    return float(np.linalg.norm(a - decompress(compress(a, basis), basis)))
