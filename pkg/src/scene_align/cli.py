"""``scene-align`` command line.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import benchmark, data, plot
from .anchors import AnchorDatabase, build_anchor_db, build_motion_matrix, reconstruction_residual
from .metrics import MetricsAccumulator
from .pipeline import PipelineConfig, predict_scene
from .environment import DEFAULT_MAX_RANGE, N_BEARINGS, DistanceArray, distance_array, prelabel_anchor_validity
from .profiler import NoValidAnchorsError, ScorerExample, ScorerParams, agent_features, feature_spec, train_scorer, \
    wta_regression_loss
from .trajectory import pose_from_history, to_agent_frame_points

log = logging.getLogger("scene_align")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- output helpers ---------------------------------------------------------

@contextmanager
def atomic_output(path: str | Path, mode: str = "w"):
    """Write to a temp file next to ``path`` and rename on success only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- inputs -----------------------------------------------------------------

def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _load_scenes(args, which: str = "test") -> list:
    paths = [_require(p) for p in (args.data or [])]
    window = data.WindowConfig()
    if getattr(args, "split", None):
        split = data.load_split_config(_require(args.split))
        window = split.window
        paths += list(split.train if which == "train" else split.test)
    if not paths:
        raise UsageError("no input data: pass --data or --split")
    scenes = []
    for p in paths:
        p = _require(p)
        if p.suffix == ".jsonl":
            scenes.extend(data.read_scenes_jsonl(p))
        else:
            scenes.extend(data.make_windows(data.parse_ethucy(p), window, source=p.stem, map_id=p.stem))
    if not scenes:
        raise data.DataFormatError("input data yields no complete windows")
    return scenes


def _map_loader(maps_dir):
    cache = {}

    def get(scene):
        if maps_dir is None or scene.map_id is None:
            return None
        if scene.map_id not in cache:
            png = Path(maps_dir) / f"{scene.map_id}.png"
            cache[scene.map_id] = data.load_navigability_map(png) if png.exists() else None
        return cache[scene.map_id]

    return get


def _pipeline_config(args) -> PipelineConfig:
    doc = {}
    if args.config:
        raw = json.loads(_require(args.config).read_text())
        doc.update(raw.get("pipeline", raw))
    if args.seed is not None:
        doc["seed"] = args.seed
    for flag, key in (("no_env_filter", "env_filter"), ("no_a2a_filter", "a2a_filter"), ("no_gibbs", "gibbs")):
        if getattr(args, flag, False):
            doc[key] = False
    for key in ("k", "burn_in"):
        if getattr(args, key, None) is not None:
            doc[key] = getattr(args, key)
    if getattr(args, "chain_mode", None):
        doc["chain_mode"] = args.chain_mode
    try:
        return PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _seed(args) -> int:
    return _pipeline_config(args).seed


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = _seed(args)
    out = Path(args.out)
    scenes = []
    for i in range(args.count):
        kind = args.kind or data.SYNTHETIC_KINDS[i % len(data.SYNTHETIC_KINDS)]
        n = args.agents if kind in ("parallel", "circle") else 2
        sc = data.SyntheticScenario(kind, n_agents=n, speed=args.speed, noise_std=args.noise,
                                    seed=seed * 100003 + i)
        scene = data.generate_synthetic_scene(sc)
        scene = data.Scene(scene.agent_ids, scene.histories, scene.futures, map_id=scene.scene_id,
                           scene_id=scene.scene_id, meta=scene.meta)
        scenes.append(scene)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_output(out / "scenes.jsonl") as fh:
        for s in scenes:
            fh.write(json.dumps(data.scene_to_dict(s), sort_keys=True) + "\n")
    maps = out / "maps"
    maps.mkdir(exist_ok=True)
    for s in scenes:
        data.save_navigability_map(data.synthetic_corridor_map(s), maps / f"{s.scene_id}.png")
    with atomic_output(out / "train.jsonl") as fh:
        for s in benchmark.training_corpus(args.train_walkers, seed):
            fh.write(json.dumps(data.scene_to_dict(s), sort_keys=True) + "\n")
    print(f"wrote {len(scenes)} scenes, maps and {args.train_walkers} training walkers to {out} (seed={seed})")
    return EXIT_OK


def cmd_build_anchors(args) -> int:
    seed = _seed(args)
    scenes = _load_scenes(args, "train")
    db = build_anchor_db(scenes, d_s=args.d_s, k_anchors=args.k_anchors, seed=seed)
    residual = reconstruction_residual(build_motion_matrix(scenes).data, db.basis)
    with atomic_output(args.out) as fh:
        fh.write(db.to_json())
    print(f"anchors={len(db)} d_s={db.d_s} rows={db.compressed.shape[0] if db.compressed is not None else 0} "
          f"residual={residual:.6g} inertia={db.inertia:.6g} seed={seed}")
    return EXIT_OK


def _scorer_examples(scenes, db, get_map) -> list[ScorerExample]:
    """One example per agent: the nearest valid anchor (agent frame) is the target."""
    examples = []
    for scene in scenes:
        nav_map = get_map(scene)
        for hist, fut in zip(scene.histories, scene.futures):
            pose, _ = pose_from_history(hist)
            if nav_map is None:
                dist = DistanceArray(np.full(N_BEARINGS, DEFAULT_MAX_RANGE), DEFAULT_MAX_RANGE)
                mask = np.ones(len(db), dtype=bool)
            else:
                dist = distance_array(nav_map, pose)
                mask = prelabel_anchor_validity(nav_map, pose, db)
            if not mask.any():
                continue
            feats, _ = agent_features(hist, dist, db.basis)
            valid = np.flatnonzero(mask)
            _, best = wta_regression_loss(db.anchors[valid], to_agent_frame_points(fut.points, pose))
            examples.append(ScorerExample(feats, int(valid[best]), mask))
    return examples


def cmd_train_scorer(args) -> int:
    seed = _seed(args)
    db = AnchorDatabase.load(_require(args.anchors))
    examples = _scorer_examples(_load_scenes(args, "train"), db, _map_loader(args.maps))
    if not examples:
        raise data.DataFormatError("no training examples with a valid anchor")
    params = ScorerParams.initial(len(examples[0].features), len(db), seed=seed, spec=feature_spec(db.d_s))
    result = train_scorer(examples, params, epochs=args.epochs, lr=args.lr, seed=seed)
    with atomic_output(args.out) as fh:
        fh.write(result.params.to_json())
    print(f"examples={len(examples)} epochs={args.epochs} loss {result.loss_curve[0]:.6g} -> "
          f"{result.loss_curve[-1]:.6g} seed={seed}")
    return EXIT_OK


def _predict_one(job):
    scene, db, cfg, nav_map, scorer = job
    return data.prediction_lines(predict_scene(scene, db, cfg, nav_map, scorer), seed=cfg.seed)


def _run_jobs(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork")) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_predict(args) -> int:
    cfg = _pipeline_config(args)
    db = AnchorDatabase.load(_require(args.anchors))
    scorer = ScorerParams.load(_require(args.scorer)) if args.scorer else None
    scenes = sorted(_load_scenes(args), key=lambda s: s.scene_id)
    get_map = _map_loader(args.maps)
    jobs = [(s, db, cfg, get_map(s), scorer) for s in scenes]
    start = time.perf_counter()
    results = _run_jobs(_predict_one, jobs, args.workers)
    energies = [json.loads(line)["energy"] for lines in results for line in lines]
    with atomic_output(args.out) as fh:
        for lines in results:
            for line in lines:
                fh.write(line + "\n")
    wall = time.perf_counter() - start
    print(f"scenes={len(scenes)} samples={len(energies)} mean_energy={np.mean(energies):.6g} "
          f"wall_time={wall:.2f}s seed={cfg.seed}")
    return EXIT_OK


def _align(scene, pred) -> np.ndarray:
    gt_ids = [str(a) for a in scene.agent_ids]
    if sorted(gt_ids) != sorted(pred.agent_ids):
        missing = sorted(set(gt_ids) - set(pred.agent_ids))
        extra = sorted(set(pred.agent_ids) - set(gt_ids))
        raise data.DataFormatError(f"scene {scene.scene_id}: agent ids differ (missing {missing}, extra {extra})")
    order = [pred.agent_ids.index(a) for a in gt_ids]
    return pred.trajectories[:, order]


def cmd_evaluate(args) -> int:
    scenes = {s.scene_id: s for s in _load_scenes(args)}
    get_map = _map_loader(args.maps)
    acc = MetricsAccumulator(args.threshold)
    if args.gt:
        for sid in sorted(scenes):
            s = scenes[sid]
            acc.add(s.future_array(), s.future_array()[None], get_map(s))
        source = "ground_truth"
    else:
        if not args.predictions:
            raise UsageError("pass --predictions or --gt")
        preds = data.read_predictions(_require(args.predictions))
        missing = sorted(set(preds) - set(scenes))
        if missing:
            raise data.DataFormatError(f"predictions for unknown scenes: {missing[:5]}"
                                       f"{' ...' if len(missing) > 5 else ''}")
        for sid in sorted(preds):
            s = scenes[sid]
            acc.add(s.future_array(), _align(s, preds[sid]), get_map(s))
        source = str(args.predictions)
    report = acc.report({"seed": _seed(args), "predictions": source})
    text = report.to_json() + "\n"
    if args.out:
        with atomic_output(args.out) as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    scenes = {s.scene_id: s for s in _load_scenes(args)}
    preds = data.read_predictions(_require(args.predictions))
    if not preds:
        raise data.DataFormatError("prediction file is empty")
    sid = args.scene or sorted(preds)[0]
    if sid not in preds or sid not in scenes:
        raise data.DataFormatError(f"unknown scene id {sid!r}")
    scene = scenes[sid]
    svg = plot.scene_svg(scene, _align(scene, preds[sid]), threshold=args.threshold, seed=_seed(args))
    with atomic_output(args.out) as fh:
        fh.write(svg)
    print(f"wrote {args.out} for scene {sid} (seed={_seed(args)})")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _pipeline_config(args)
    db = benchmark.suite_anchor_db(cfg.seed)
    records = benchmark.run_suite(args.scenes, db, cfg)
    arms = {}
    for name in benchmark.ARMS:
        a2a = [getattr(r, name).a2a for r in records]
        env = [getattr(r, name).env for r in records]
        arms[name] = {"a2a_collision_rate": float(np.mean(a2a)), "env_collision_rate": float(np.mean(env))}
    doc = {"seed": cfg.seed, "scenes": [r.seed for r in records], "arms": arms, "config": cfg.to_dict()}
    text = _dump(doc)
    if args.out:
        with atomic_output(args.out) as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _common(p, data_args=True):
    p.add_argument("--config", help="JSON file of pipeline settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    if data_args:
        p.add_argument("--data", nargs="*", help="ETH-UCY text files or scene .jsonl files")
        p.add_argument("--split", help="split config JSON")
        p.add_argument("--maps", help="directory of <map_id>.png/.json map pairs")


def _filters(p):
    p.add_argument("--no-env-filter", action="store_true")
    p.add_argument("--no-a2a-filter", action="store_true")
    p.add_argument("--no-gibbs", action="store_true")
    p.add_argument("--chain-mode", choices=["sequential", "parallel"])
    p.add_argument("--k", type=int)
    p.add_argument("--burn-in", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scene-align", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic scenes, corridor maps and a training corpus")
    _common(p, data_args=False)
    p.add_argument("--kind", choices=data.SYNTHETIC_KINDS)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--agents", type=int, default=4)
    p.add_argument("--speed", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--train-walkers", type=int, default=600)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-anchors", help="fit the SVD basis and cluster anchors")
    _common(p)
    p.add_argument("--k-anchors", type=int, default=64)
    p.add_argument("--d-s", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_anchors)

    p = sub.add_parser("train-scorer", help="fit the linear anchor scorer")
    _common(p)
    p.add_argument("--anchors", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_scorer)

    p = sub.add_parser("predict", help="sample joint scene predictions")
    _common(p)
    _filters(p)
    p.add_argument("--anchors", required=True)
    p.add_argument("--scorer", help="trained scorer JSON; cosine baseline when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--predictions")
    p.add_argument("--gt", action="store_true", help="evaluate ground truth against itself")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render one scene as SVG")
    _common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--scene")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("benchmark", help="synthetic ablation suite")
    _common(p, data_args=False)
    _filters(p)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SCENE_ALIGN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, data.DataFormatError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, NoValidAnchorsError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
