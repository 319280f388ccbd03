"""Scene-level MRF over per-agent prototype choices.

The energy of a joint choice is the sum of each agent's selection logit and,
for every edge of the interaction graph, a pairwise term; the joint
probability is ``exp(energy) / Z``. Colliding prototype pairs get a large
negative pairwise value so their joint mass underflows to zero.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import multiprocessing as mp
import numpy as np

from .anchors import SvdBasis, compress
from .profiler import FOCAL_ALPHA, FOCAL_GAMMA, PrototypeSet, focal_loss, focal_loss_grad
from .trajectory import cross_min_distances, to_agent_frame_points

log = logging.getLogger(__name__)

DEFAULT_EDGE_RADIUS = 5.0
COLLISION_THRESHOLD = 0.2
MASK_VALUE = -1e4
CLEARANCE_SCALE = 0.5
CHAIN_BLOCK = 256


@dataclass(frozen=True)
class InteractionGraph:
    nodes: list
    edges: dict  # (i, j) with i < j (node positions) -> min cross-prototype distance

    def neighbors(self, i: int) -> list[int]:
        return sorted([b for a, b in self.edges if a == i] + [a for a, b in self.edges if b == i])


def build_interaction_graph(prototype_sets: Sequence[PrototypeSet], radius: float = DEFAULT_EDGE_RADIUS) -> InteractionGraph:
    """Connect two agents when any pair of their prototypes comes within ``radius``."""
    if not prototype_sets:
        raise ValueError("need at least one agent")
    edges = {}
    n = len(prototype_sets)
    for i in range(n):
        for j in range(i + 1, n):
            d = float(cross_min_distances(prototype_sets[i].trajectories, prototype_sets[j].trajectories).min())
            if d < radius:
                edges[(i, j)] = d
    return InteractionGraph([ps.agent_id for ps in prototype_sets], edges)


def analytic_pairwise(protos_i: np.ndarray, protos_j: np.ndarray, r: float = COLLISION_THRESHOLD,
                      sigma: float = CLEARANCE_SCALE) -> np.ndarray:
    """``log sigmoid((d - r) / sigma)`` of the closest approach ``d`` of each pair."""
    d = cross_min_distances(protos_i, protos_j)
    return -np.logaddexp(0.0, -(d - r) / sigma)


@dataclass(eq=False)
class BilinearPairwise:
    """``E[m, n] = [a_m, 1] W [b_n, 1]^T`` over prototype latents in agent i's frame."""

    weights: np.ndarray

    @classmethod
    def zeros(cls, d_s: int) -> "BilinearPairwise":
        return cls(np.zeros((d_s + 1, d_s + 1)))

    @classmethod
    def initial(cls, d_s: int, seed: int = 0, scale: float = 0.01) -> "BilinearPairwise":
        return cls(scale * np.random.default_rng(seed).standard_normal((d_s + 1, d_s + 1)))

    def potential(self, lat_i: np.ndarray, lat_j: np.ndarray) -> np.ndarray:
        return lat_i @ self.weights @ lat_j.T

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "BilinearPairwise":
        return cls(np.asarray(doc["weights"], dtype=np.float64))


def pairwise_latents(ps_i: PrototypeSet, ps_j: PrototypeSet, basis: SvdBasis) -> tuple[np.ndarray, np.ndarray]:
    """Augmented latents of both agents' prototypes, each expressed in agent i's frame."""
    k_i, k_j = len(ps_i), len(ps_j)
    a = compress(to_agent_frame_points(ps_i.trajectories, ps_i.pose).reshape(k_i, -1), basis)
    b = compress(to_agent_frame_points(ps_j.trajectories, ps_i.pose).reshape(k_j, -1), basis)
    return np.hstack([a, np.ones((k_i, 1))]), np.hstack([b, np.ones((k_j, 1))])


def pairwise_potential(ps_i: PrototypeSet, ps_j: PrototypeSet, model: str | BilinearPairwise = "analytic",
                       basis: SvdBasis | None = None, r: float = COLLISION_THRESHOLD,
                       sigma: float = CLEARANCE_SCALE) -> np.ndarray:
    if isinstance(model, BilinearPairwise):
        if basis is None:
            raise ValueError("the learned pairwise model needs the SVD basis")
        return model.potential(*pairwise_latents(ps_i, ps_j, basis))
    if model != "analytic":
        raise ValueError(f"unknown pairwise model {model!r}")
    return analytic_pairwise(ps_i.trajectories, ps_j.trajectories, r, sigma)


def collision_matrix(protos_i: np.ndarray, protos_j: np.ndarray, threshold: float = COLLISION_THRESHOLD) -> np.ndarray:
    return cross_min_distances(protos_i, protos_j) < threshold


def mask_colliding_pairs(matrix: np.ndarray, protos_i: np.ndarray, protos_j: np.ndarray,
                         threshold: float = COLLISION_THRESHOLD, mask_value: float = MASK_VALUE) -> np.ndarray:
    out = np.array(matrix, dtype=np.float64, copy=True)
    out[collision_matrix(protos_i, protos_j, threshold)] = mask_value
    return out


@dataclass(eq=False)
class SceneMRF:
    agent_ids: list
    unary: list[np.ndarray]
    pairwise: dict  # (i, j), i < j -> (K_i, K_j)
    mask_value: float = MASK_VALUE
    prototype_refs: list[PrototypeSet] | None = None
    collisions: dict = field(default_factory=dict)  # (i, j) -> bool (K_i, K_j), masked entries

    def __post_init__(self):
        self.unary = [np.asarray(u, dtype=np.float64) for u in self.unary]
        canon = {}
        for (i, j), m in self.pairwise.items():
            m = np.asarray(m, dtype=np.float64)
            if i == j:
                raise ValueError("self-edges are not allowed")
            if i > j:
                i, j, m = j, i, m.T
            if m.shape != (self.unary[i].shape[0], self.unary[j].shape[0]):
                raise ValueError(f"pairwise ({i},{j}) has shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError("pairwise potentials must be finite")
            canon[(i, j)] = m
        self.pairwise = dict(sorted(canon.items()))
        self.collisions = {((i, j) if i < j else (j, i)): (c if i < j else c.T)
                           for (i, j), c in self.collisions.items()}

    @property
    def n_agents(self) -> int:
        return len(self.unary)

    @property
    def cardinalities(self) -> list[int]:
        return [u.shape[0] for u in self.unary]

    def neighbor_tables(self) -> list[list[tuple[int, np.ndarray]]]:
        """For each agent i: ``(j, T)`` with ``T[s_j]`` the row of pairwise values over i's states."""
        tables: list[list] = [[] for _ in range(self.n_agents)]
        for (i, j), m in self.pairwise.items():
            tables[i].append((j, np.ascontiguousarray(m.T)))
            tables[j].append((i, np.ascontiguousarray(m)))
        return tables


def batch_energy(mrf: SceneMRF, assignments: np.ndarray) -> np.ndarray:
    a = np.asarray(assignments, dtype=np.intp).reshape(-1, mrf.n_agents)
    for i, k in enumerate(mrf.cardinalities):
        if np.any((a[:, i] < 0) | (a[:, i] >= k)):
            raise IndexError(f"assignment index out of range for agent {i} (K={k})")
    e = np.zeros(a.shape[0])
    for i, u in enumerate(mrf.unary):
        e = e + u[a[:, i]]
    for (i, j), m in mrf.pairwise.items():
        e = e + m[a[:, i], a[:, j]]
    return e


def scene_energy(mrf: SceneMRF, assignment: Sequence[int]) -> float:
    return float(batch_energy(mrf, np.asarray(assignment)[None, :])[0])


def has_feasible_assignment(mrf: SceneMRF) -> bool:
    """Whether some joint choice avoids every masked pair (backtracking search)."""
    n = mrf.n_agents
    if not mrf.collisions:
        return True
    ok = {key: ~c for key, c in mrf.collisions.items()}
    domains = [np.ones(k, dtype=bool) for k in mrf.cardinalities]

    def search(i: int, doms: list[np.ndarray]) -> bool:
        if i == n:
            return True
        for s in np.flatnonzero(doms[i]):
            nxt = list(doms)
            dead = False
            for j in range(i + 1, n):
                if (i, j) in ok:
                    nxt[j] = doms[j] & ok[(i, j)][s]
                    if not nxt[j].any():
                        dead = True
                        break
            if not dead and search(i + 1, nxt):
                return True
        return False

    return search(0, domains)


@dataclass(frozen=True)
class JointSample:
    assignment: tuple
    energy: float


@dataclass(eq=False)
class ScenePredictionSet:
    agent_ids: list
    assignments: np.ndarray  # (K_out, N)
    energies: np.ndarray  # (K_out,)
    trajectories: np.ndarray | None = None  # (K_out, N, T, 2)
    sampler_config: dict = field(default_factory=dict)
    scene_id: str = ""

    @property
    def samples(self) -> list[JointSample]:
        return [JointSample(tuple(int(x) for x in a), float(e)) for a, e in zip(self.assignments, self.energies)]

    def __len__(self) -> int:
        return self.assignments.shape[0]


def _draw(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    c = np.cumsum(np.exp(z), axis=1)
    idx = np.sum(c <= (u * c[:, -1])[:, None], axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


def _run_chains(unary, tables, uniforms: np.ndarray, keep_after: int) -> np.ndarray:
    """Systematic-scan Gibbs for a block of chains.

    ``uniforms`` is ``(C, sweeps + 1, N)``; row 0 draws the initial state from
    the unary marginals. Returns states after every sweep ``> keep_after``
    as ``(C, kept, N)``.
    """
    c_chains, n_rows, n = uniforms.shape
    state = np.empty((c_chains, n), dtype=np.intp)
    for i in range(n):
        state[:, i] = _draw(np.broadcast_to(unary[i], (c_chains, unary[i].shape[0])), uniforms[:, 0, i])
    kept = []
    for tau in range(1, n_rows):
        for i in range(n):
            logits = np.broadcast_to(unary[i], (c_chains, unary[i].shape[0]))
            for j, table in tables[i]:
                logits = logits + table[state[:, j]]
            state[:, i] = _draw(logits, uniforms[:, tau, i])
        if tau > keep_after:
            kept.append(state.copy())
    if not kept:
        return np.empty((c_chains, 0, n), dtype=np.intp)
    return np.stack(kept, axis=1)


def _seed_entropy(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _chain_uniforms(seed, chain: int, rows: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(_seed_entropy(seed) + [chain]))
    return rng.random((rows, n))


def _parallel_block(args) -> np.ndarray:
    unary, tables, seed, start, stop, burn_in = args
    n = len(unary)
    u = np.stack([_chain_uniforms(seed, c, burn_in + 2, n) for c in range(start, stop)])
    return _run_chains(unary, tables, u, keep_after=burn_in)[:, -1, :]


def gibbs_sample(mrf: SceneMRF, burn_in: int, k_out: int, seed=0, mode: str = "parallel_chains",
                 workers: int = 1) -> ScenePredictionSet:
    """Draw ``k_out`` joint samples.

    ``sequential``: one chain, ``burn_in + k_out`` sweeps, the last ``k_out``
    sweeps are kept. ``parallel_chains``: ``k_out`` independent chains, each
    run ``burn_in + 1`` sweeps, keeping its final state. Chain ``c`` draws
    from its own stream seeded by ``(seed, c)``, so results do not depend on
    ``workers``.
    """
    if burn_in < 0 or k_out < 1:
        raise ValueError("need burn_in >= 0 and k_out >= 1")
    n = mrf.n_agents
    unary, tables = mrf.unary, mrf.neighbor_tables()
    if mode == "sequential":
        u = _chain_uniforms(seed, 0, burn_in + k_out + 1, n)[None]
        assignments = _run_chains(unary, tables, u, keep_after=burn_in)[0]
    elif mode in ("parallel_chains", "parallel"):
        mode = "parallel_chains"
        blocks = [(unary, tables, seed, s, min(s + CHAIN_BLOCK, k_out), burn_in)
                  for s in range(0, k_out, CHAIN_BLOCK)]
        if workers > 1 and len(blocks) > 1:
            per = -(-len(blocks) // workers)
            groups = [blocks[g:g + per] for g in range(0, len(blocks), per)]
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=len(groups), mp_context=ctx) as pool:
                parts = [p for chunk in pool.map(_run_block_group, groups) for p in chunk]
        else:
            parts = [_parallel_block(b) for b in blocks]
        assignments = np.concatenate(parts, axis=0)
    else:
        raise ValueError(f"unknown chain mode {mode!r}")
    energies = batch_energy(mrf, assignments)
    config = {"burn_in": burn_in, "k_out": k_out, "seed": _seed_entropy(seed), "mode": mode}
    return realize_predictions(mrf, assignments, energies, config)


def _run_block_group(group) -> list[np.ndarray]:
    return [_parallel_block(b) for b in group]


def realize_predictions(mrf: SceneMRF, assignments: np.ndarray, energies: np.ndarray | None = None,
                        config: dict | None = None) -> ScenePredictionSet:
    a = np.asarray(assignments, dtype=np.intp).reshape(-1, mrf.n_agents)
    e = batch_energy(mrf, a) if energies is None else np.asarray(energies)
    trajs = None
    if mrf.prototype_refs is not None:
        trajs = np.stack([
            np.stack([mrf.prototype_refs[i].trajectories[a[s, i]] for i in range(mrf.n_agents)])
            for s in range(a.shape[0])
        ])
    return ScenePredictionSet(list(mrf.agent_ids), a, e, trajs, dict(config or {}))


@dataclass(eq=False)
class BeliefResult:
    beliefs: list[np.ndarray]
    converged: bool
    iterations: int


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def bp_rerank(mrf: SceneMRF, iterations: int = 20, damping: float = 0.5, tol: float = 1e-10) -> BeliefResult:
    """Loopy sum-product in log space with damped, normalized messages.

    Returns per-agent beliefs (probabilities); ``converged`` is False if the
    largest message change still exceeds ``tol`` after ``iterations`` rounds.
    """
    n = mrf.n_agents
    directed = {}
    for (i, j), m in mrf.pairwise.items():
        directed[(i, j)] = m  # rows: sender i, cols: receiver j
        directed[(j, i)] = m.T
    msgs = {(i, j): np.full(mrf.unary[j].shape[0], -math.log(mrf.unary[j].shape[0])) for (i, j) in directed}
    incoming: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for (i, j) in directed:
        incoming[j].append((i, j))
    converged = not directed
    done = 0
    log_keep = math.log(damping) if damping > 0 else -np.inf
    log_new = math.log(1.0 - damping)
    while not converged and done < iterations:
        done += 1
        new = {}
        delta = 0.0
        for (i, j), m in directed.items():
            h = mrf.unary[i].copy()
            for (k, _) in incoming[i]:
                if k != j:
                    h = h + msgs[(k, i)]
            out = _logsumexp(h[:, None] + m, axis=0)
            out = out - _logsumexp(out, axis=0)
            if damping > 0:
                out = np.logaddexp(log_keep + msgs[(i, j)], log_new + out)
                out = out - _logsumexp(out, axis=0)
            delta = max(delta, float(np.max(np.abs(out - msgs[(i, j)]))))
            new[(i, j)] = out
        msgs = new
        converged = delta < tol
    beliefs = []
    for j in range(n):
        b = mrf.unary[j].copy()
        for key in incoming[j]:
            b = b + msgs[key]
        b = np.exp(b - b.max())
        beliefs.append(b / b.sum())
    if not converged:
        log.info("belief propagation did not converge in %d iterations", iterations)
    return BeliefResult(beliefs, converged, done)


def rank_aligned_predictions(mrf: SceneMRF, k_out: int, beliefs: Sequence[np.ndarray] | None = None,
                             iterations: int = 20) -> ScenePredictionSet:
    """Sample ``r`` pairs every agent's rank-``r`` prototype by belief (no joint sampling)."""
    if beliefs is None:
        beliefs = bp_rerank(mrf, iterations).beliefs
    orders = [np.argsort(-np.asarray(b), kind="stable") for b in beliefs]
    a = np.array([[orders[i][r % len(orders[i])] for i in range(mrf.n_agents)] for r in range(k_out)],
                 dtype=np.intp).reshape(k_out, mrf.n_agents)
    return realize_predictions(mrf, a, None, {"k_out": k_out, "mode": "rank_aligned"})


def pairwise_focal_loss(prob: float, alpha: float = FOCAL_ALPHA, lam: float = FOCAL_GAMMA) -> float:
    return focal_loss(prob, alpha, lam)


def gt_pair_index(protos_i: np.ndarray, protos_j: np.ndarray, gt_i: np.ndarray, gt_j: np.ndarray) -> tuple[int, int]:
    """Prototype pair with the smallest summed displacement from both ground truths."""
    ei = np.sqrt(np.sum((np.asarray(protos_i) - np.asarray(gt_i)[None]) ** 2, axis=(1, 2)))
    ej = np.sqrt(np.sum((np.asarray(protos_j) - np.asarray(gt_j)[None]) ** 2, axis=(1, 2)))
    joint = ei[:, None] + ej[None, :]
    m, n = np.unravel_index(int(np.argmin(joint)), joint.shape)
    return int(m), int(n)


def _pair_softmax(e: np.ndarray) -> np.ndarray:
    z = np.exp(e - e.max())
    return z / z.sum()


def pairwise_loss_and_grad(model: BilinearPairwise, dataset: Sequence, alpha: float = FOCAL_ALPHA,
                           lam: float = FOCAL_GAMMA) -> tuple[float, np.ndarray]:
    """Mean pairwise focal loss and its gradient w.r.t. the bilinear weights.

    Each item is ``(lat_i, lat_j, (m, n))``; the pair probability is the
    softmax of the potential matrix over all K_i x K_j entries.
    """
    if not dataset:
        raise ValueError("empty dataset")
    grad = np.zeros_like(model.weights)
    total = 0.0
    for lat_i, lat_j, (m, n) in dataset:
        p = _pair_softmax(model.potential(lat_i, lat_j))
        pmn = p[m, n]
        total += focal_loss(pmn, alpha, lam)
        g = -pmn * p
        g[m, n] += pmn
        g *= focal_loss_grad(pmn, alpha, lam)
        grad += lat_i.T @ g @ lat_j
    return total / len(dataset), grad / len(dataset)


def train_pairwise(dataset: Sequence, d_s: int, epochs: int = 100, lr: float = 0.1, seed: int = 0,
                   model: BilinearPairwise | None = None) -> tuple[BilinearPairwise, list[float]]:
    model = BilinearPairwise.initial(d_s, seed) if model is None else BilinearPairwise(model.weights.copy())
    curve = []
    for _ in range(epochs):
        loss, grad = pairwise_loss_and_grad(model, dataset)
        if not math.isfinite(loss):
            raise FloatingPointError(f"pairwise training diverged (lr={lr})")
        curve.append(loss)
        model.weights = model.weights - lr * grad
    return model, curve


def build_scene_mrf(prototype_sets: Sequence[PrototypeSet], graph: InteractionGraph | None = None,
                    pairwise_model: str | BilinearPairwise = "analytic", basis: SvdBasis | None = None,
                    a2a_filter: bool = True, threshold: float = COLLISION_THRESHOLD,
                    mask_value: float = MASK_VALUE, edge_radius: float = DEFAULT_EDGE_RADIUS) -> SceneMRF:
    if graph is None:
        graph = build_interaction_graph(prototype_sets, edge_radius)
    pairwise, collisions = {}, {}
    for (i, j) in graph.edges:
        pi, pj = prototype_sets[i], prototype_sets[j]
        m = pairwise_potential(pi, pj, pairwise_model, basis)
        if a2a_filter:
            col = collision_matrix(pi.trajectories, pj.trajectories, threshold)
            m = np.where(col, mask_value, m)
            collisions[(i, j)] = col
        pairwise[(i, j)] = m
    return SceneMRF(list(graph.nodes), [ps.logits for ps in prototype_sets], pairwise, mask_value,
                    list(prototype_sets), collisions)
