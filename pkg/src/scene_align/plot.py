"""Static SVG rendering of one scene: histories, ground truth, predicted samples."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .metrics import COLLISION_THRESHOLD
from .trajectory import Scene

CANVAS = 600
PAD = 30
HISTORY_COLOR = "#1f4fd8"
GT_COLOR = "#1a9a3a"
PRED_COLOR = "#d62728"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _polyline(pts: np.ndarray, color: str, extra: str = "") -> str:
    coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
    return f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>'


def collision_points(preds: np.ndarray, threshold: float = COLLISION_THRESHOLD) -> np.ndarray:
    """Midpoints of every (sample, pair, timestep) closer than ``threshold``."""
    p = np.asarray(preds, dtype=np.float64)
    n = p.shape[1]
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            d = np.linalg.norm(p[:, i] - p[:, j], axis=-1)
            ks, ts = np.nonzero(d < threshold)
            out.extend(0.5 * (p[k, i, t] + p[k, j, t]) for k, t in zip(ks, ts))
    return np.array(out).reshape(-1, 2)


def scene_svg(scene: Scene, preds: np.ndarray, threshold: float = COLLISION_THRESHOLD, seed: int | None = None) -> str:
    """Deterministic SVG text; ``preds`` is ``(K, N, T, 2)`` in scene agent order."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 4 or preds.shape[0] == 0:
        raise ValueError("need a non-empty (K, N, T, 2) prediction array")
    hist = scene.history_array()
    layers = [hist.reshape(-1, 2), preds.reshape(-1, 2)]
    gt = scene.future_array() if scene.futures is not None else None
    if gt is not None:
        layers.append(gt.reshape(-1, 2))
    allpts = np.vstack(layers)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    scale = (CANVAS - 2 * PAD) / max(float(np.max(hi - lo)), 1e-6)

    def to_px(pts):
        q = (np.asarray(pts) - lo) * scale + PAD
        return np.stack([q[..., 0], CANVAS - q[..., 1]], axis=-1)

    title = f"scene {scene.scene_id}" + ("" if seed is None else f" seed {seed}")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{CANVAS}" height="{CANVAS}" fill="white"/>',
        '<g class="predictions">',
    ]
    for k in range(preds.shape[0]):
        for i in range(preds.shape[1]):
            parts.append(_polyline(to_px(preds[k, i]), PRED_COLOR, ' stroke-dasharray="4 3" stroke-opacity="0.5"'))
    parts.append("</g>")
    if gt is not None:
        parts.append('<g class="ground-truth">')
        parts.extend(_polyline(to_px(g), GT_COLOR) for g in gt)
        parts.append("</g>")
    parts.append('<g class="history">')
    parts.extend(_polyline(to_px(h), HISTORY_COLOR) for h in hist)
    parts.append("</g>")
    parts.append('<g class="collisions">')
    for x, y in to_px(collision_points(preds, threshold)).reshape(-1, 2):
        parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="4" fill="none" stroke="black"/>')
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
