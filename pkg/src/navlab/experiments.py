"""Experiment drivers: the baseline comparison table and learning curves,
target generalization, scene generalization, embedding geometry, and
deterministic SVG plots.

Every driver writes CSVs plus a ``manifest.json`` into its output directory.
Statistics across seeds are medians.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

import navlab
from navlab.baselines import train_method
from navlab.errors import ConfigError, NumericError, ValidationError
from navlab.gridworld import Pose, Scene, generate_scene, load_scene_dir, observe
from navlab.model import ModelParams, embed_stack, reset_history
from navlab.trainer import (
    MetricsRow,
    ModelAgent,
    Task,
    TrainConfig,
    UniformAgent,
    World,
    evaluate_agent,
    tasks_for,
    train,
)

log = logging.getLogger(__name__)

KINDS = ("baseline-comparison", "target-gen", "scene-gen", "embedding")


@dataclass
class ExperimentConfig:
    kind: str = "baseline-comparison"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    scenes_dir: str = ""
    scene_seed: int = 1000
    n_scenes: int = 5
    scene_width: int = 10
    scene_height: int = 10
    obstacle_density: float = 0.15
    n_targets: int = 5
    percept_dim: int = 64
    smoothing: float = 0.5
    eval_episodes: int = 20
    eval_cap: int = 500
    success_cap: int = 100
    # target generalization
    gen_targets: int = 15
    target_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    distance_bins: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    heldout_per_bin: int = 10
    # scene generalization
    pretrain_scene_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    test_scenes: int = 2
    pretrain_frames: int = 2_000_000
    adapt_frames: int = 1_000_000
    threshold: float = 0.8
    threshold_window: int = 50
    # embedding geometry
    max_pairs: int = 2000

    def validate(self) -> "ExperimentConfig":
        checks = [
            ("kind", self.kind in KINDS, "|".join(KINDS)),
            ("seeds", len(self.seeds) >= 1, "non-empty"),
            ("n_scenes", self.n_scenes >= 1, ">= 1"),
            ("eval_episodes", self.eval_episodes >= 1, ">= 1"),
            ("eval_cap", self.eval_cap >= 1, ">= 1"),
            ("success_cap", 1 <= self.success_cap <= self.eval_cap, "in [1, eval_cap]"),
            ("threshold", 0.0 < self.threshold <= 1.0, "in (0, 1]"),
            ("threshold_window", self.threshold_window >= 1, ">= 1"),
            ("max_pairs", self.max_pairs >= 3, ">= 3"),
            ("heldout_per_bin", self.heldout_per_bin >= 1, ">= 1"),
            ("test_scenes", self.test_scenes >= 1, ">= 1"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{key} = {getattr(self, key)!r} out of range (must be {rule})")
        return self


# ---------------------------------------------------------------------------
# scenes, hashing, manifests


def make_scenes(ecfg: ExperimentConfig, count: int | None = None, offset: int = 0,
                n_targets: int | None = None) -> list[Scene]:
    """The pinned scene suite: ``generate_scene(scene_seed + i, ...)``, or
    the ``.navscn`` files of ``scenes_dir`` when set."""
    count = ecfg.n_scenes if count is None else count
    if ecfg.scenes_dir:
        scenes = load_scene_dir(ecfg.scenes_dir)[offset:offset + count]
        if len(scenes) < count:
            raise ConfigError(f"scenes_dir {ecfg.scenes_dir} holds fewer than {offset + count} scenes")
        return scenes
    return [
        generate_scene(ecfg.scene_seed + offset + i, ecfg.scene_width, ecfg.scene_height,
                       ecfg.obstacle_density, ecfg.n_targets if n_targets is None else n_targets,
                       ecfg.percept_dim, ecfg.smoothing)
        for i in range(count)
    ]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Manifest:
    """``manifest.json``: written at start, finalized on exit with a status."""

    def __init__(self, out_dir: str | Path, command: str, config_text: str = "",
                 seeds: Sequence[int] = ()):
        self.path = Path(out_dir) / "manifest.json"
        self.data = {
            "tool": "navlab",
            "version": navlab.__version__,
            "build": _build_id(),
            "python": platform.python_version(),
            "command": command,
            "config": config_text,
            "config_sha256": sha256_bytes(config_text.encode()),
            "seeds": list(seeds),
            "inputs": {},
            "outputs": {},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
        }
        self.write()

    def add_input(self, name: str, data: bytes) -> None:
        self.data["inputs"][name] = sha256_bytes(data)

    def add_scenes(self, scenes: Iterable[Scene]) -> None:
        for sc in scenes:
            self.add_input(f"scene:{sc.scene_id}", sc.to_bytes())

    def add_output(self, path: Path) -> None:
        rel = str(path.relative_to(self.path.parent)) if path.is_relative_to(self.path.parent) else str(path)
        self.data["outputs"][rel] = sha256_bytes(path.read_bytes())

    def finish(self, status: str = "ok", error: str | None = None) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["status"] = status
        if error:
            self.data["error"] = error
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.6g}"
    return str(v)


def median(xs: Sequence[float]) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else float("nan")


# ---------------------------------------------------------------------------
# learning curves


def learning_curve(metrics: Sequence[MetricsRow], bin_frames: int, scale: int = 1) -> list[tuple[int, float, int]]:
    """Mean training-episode length per ``bin_frames`` window of frames.

    ``scale`` multiplies frame counts, for per-target runs whose counters
    only cover one task each.
    """
    if not metrics:
        return []
    f = np.array([m.frames_so_far for m in metrics]) * scale
    L = np.array([m.episode_length for m in metrics], dtype=float)
    bins = (f - 1) // bin_frames
    out = []
    for b in np.unique(bins):
        sel = bins == b
        out.append((int((b + 1) * bin_frames), float(L[sel].mean()), int(sel.sum())))
    return out


def frames_to_threshold(metrics: Sequence[MetricsRow], threshold: float, window: int,
                        success_cap: int) -> int | None:
    """First frame count at which the success rate over the last ``window``
    training episodes reaches ``threshold``; success means reaching the goal
    within ``success_cap`` steps."""
    ok = np.array([m.success and m.episode_length <= success_cap for m in metrics], dtype=float)
    if len(ok) < window:
        return None
    rate = np.convolve(ok, np.ones(window) / window, mode="valid")
    hit = np.nonzero(rate >= threshold - 1e-12)[0]
    return None if hit.size == 0 else int(metrics[hit[0] + window - 1].frames_so_far)


# ---------------------------------------------------------------------------
# baseline comparison


TABLE_ROWS = ("random", "shortest", "q1", "a3c1", "a3c4", "single-branch", "final")
TABLE_LABELS = {
    "random": "Random walk",
    "shortest": "Shortest path",
    "q1": "One-step Q",
    "a3c1": "A3C (1 thread)",
    "a3c4": "A3C (4 threads)",
    "single-branch": "Single branch",
    "final": "Target-driven (final)",
}


@dataclass
class ComparisonResult:
    table: list[dict]
    per_seed: dict[str, list[float]]
    paths: list[Path]


def run_baseline_comparison(cfg: TrainConfig, ecfg: ExperimentConfig, out_dir: str | Path,
                            methods: Sequence[str] = TABLE_ROWS,
                            progress: Callable[[str], None] | None = None) -> ComparisonResult:
    """Every method on one task set with equal frame budgets; evaluation on
    identical starts. Writes ``table.csv`` and ``curves.csv``."""
    out = Path(out_dir)
    scenes = make_scenes(ecfg)
    tasks = tasks_for(scenes)
    world = World.for_tasks(tasks)
    per_seed: dict[str, list[dict]] = {m: [] for m in methods}
    curve_rows = []
    for seed in ecfg.seeds:
        for method in methods:
            if progress:
                progress(f"seed {seed}: {method}")
            run = train_method(method, cfg.replace(seed=seed), tasks, out / f"seed{seed}" / method)
            rep = evaluate_agent(run.agent, tasks, ecfg.eval_episodes, ecfg.eval_cap, seed=seed,
                                 label=method, world=world)
            per_seed[method].append(dict(mean_length=rep.mean_length, success_rate=rep.success_rate,
                                         sp_ratio=rep.sp_ratio))
            scale = len(tasks) if method in ("q1", "a3c1", "a3c4") else 1
            for frames, mean_len, n in learning_curve(run.metrics, cfg.eval_every, scale):
                curve_rows.append((method, seed, frames, mean_len, n))
    table = []
    for m in methods:
        rows = per_seed[m]
        table.append(dict(
            method=m, label=TABLE_LABELS[m],
            mean_length=median([r["mean_length"] for r in rows]),
            success_rate=median([r["success_rate"] for r in rows]),
            sp_ratio=median([r["sp_ratio"] for r in rows]),
            seeds=len(rows),
        ))
    paths = [
        write_csv(out / "table.csv", ("method", "label", "mean_length", "success_rate", "sp_ratio", "seeds"),
                  [[r[k] for k in ("method", "label", "mean_length", "success_rate", "sp_ratio", "seeds")]
                   for r in table]),
        write_csv(out / "table_per_seed.csv", ("method", "seed", "mean_length", "success_rate", "sp_ratio"),
                  [(m, s, r["mean_length"], r["success_rate"], r["sp_ratio"])
                   for m in methods for s, r in zip(ecfg.seeds, per_seed[m])]),
        write_csv(out / "curves.csv", ("series", "seed", "x", "y", "episodes"), curve_rows),
    ]
    lengths = {m: [r["mean_length"] for r in per_seed[m]] for m in methods}
    return ComparisonResult(table, lengths, paths)


# ---------------------------------------------------------------------------
# target generalization


@dataclass
class TargetGenResult:
    grid: dict[tuple[int, int], float | None]  # (n_trained, bin) -> median success
    trained_self: dict[int, float]
    per_seed: list[dict]
    paths: list[Path]


def heldout_by_distance(scene: Scene, trained: Sequence[Pose], bins: Sequence[int], per_bin: int,
                        rng: np.random.Generator) -> dict[int, list[Pose]]:
    """Free poses whose BFS action-distance to the nearest trained target
    equals each bin value; at most ``per_bin`` sampled per bin."""
    tb = scene.table
    d = np.min([tb.distances_to(tb.pose_id(t)) for t in trained], axis=0)
    trained_set = set(trained)
    out = {}
    for b in bins:
        ids = [i for i in np.nonzero(d == b)[0].tolist() if tb.pose_at(i) not in trained_set]
        if len(ids) > per_bin:
            ids = sorted(rng.choice(ids, size=per_bin, replace=False).tolist())
        out[b] = [tb.pose_at(i) for i in ids]
    return out


def goal_tasks(scene: Scene, goals: Sequence[Pose], prefix: str) -> list[Task]:
    """Tasks for arbitrary goal poses (added to the scene's target list)."""
    extra = tuple(g for g in goals if g not in scene.targets)
    sc = dataclasses.replace(scene, targets=scene.targets + extra) if extra else scene
    return [Task(sc, g, f"{prefix}/{g.x},{g.y},{int(g.heading)}") for g in goals]


def run_target_generalization(cfg: TrainConfig, ecfg: ExperimentConfig, out_dir: str | Path,
                              progress: Callable[[str], None] | None = None) -> TargetGenResult:
    out = Path(out_dir)
    scene = make_scenes(ecfg, count=1, n_targets=ecfg.gen_targets)[0]
    if len(scene.targets) < max(ecfg.target_counts):
        raise ConfigError(f"gen_targets = {ecfg.gen_targets} is below the largest trained-target count")
    rows = []
    for seed in ecfg.seeds:
        for k in ecfg.target_counts:
            if progress:
                progress(f"seed {seed}: {k} trained targets")
            trained = list(scene.targets[:k])
            tasks = [Task(scene, g, f"{scene.scene_id}/t{i}") for i, g in enumerate(trained)]
            res = train(cfg.replace(seed=seed), tasks, out_dir=out / f"seed{seed}" / f"k{k}")
            agent = ModelAgent(res.params)
            self_rep = evaluate_agent(agent, tasks, ecfg.eval_episodes, ecfg.eval_cap, ecfg.success_cap,
                                      seed=seed)
            rows.append(dict(seed=seed, n_trained=k, bin="trained", n_goals=len(tasks),
                             success=self_rep.success_rate))
            held = heldout_by_distance(scene, trained, ecfg.distance_bins, ecfg.heldout_per_bin,
                                       np.random.default_rng([seed, k, 17]))
            for b in ecfg.distance_bins:
                goals = held[b]
                if not goals:
                    rows.append(dict(seed=seed, n_trained=k, bin=b, n_goals=0, success=None))
                    continue
                htasks = goal_tasks(scene, goals, f"{scene.scene_id}/held")
                rep = evaluate_agent(agent, htasks, ecfg.eval_episodes, ecfg.eval_cap, ecfg.success_cap,
                                     seed=seed)
                rows.append(dict(seed=seed, n_trained=k, bin=b, n_goals=len(goals),
                                 success=rep.success_rate))
    grid = {}
    for k in ecfg.target_counts:
        for b in ecfg.distance_bins:
            vals = [r["success"] for r in rows if r["n_trained"] == k and r["bin"] == b
                    and r["success"] is not None]
            grid[(k, b)] = median(vals) if vals else None
    trained_self = {k: median([r["success"] for r in rows if r["n_trained"] == k and r["bin"] == "trained"])
                    for k in ecfg.target_counts}
    paths = [
        write_csv(out / "target_gen_per_seed.csv", ("seed", "n_trained", "bin", "n_goals", "success_rate"),
                  [(r["seed"], r["n_trained"], r["bin"], r["n_goals"], r["success"]) for r in rows]),
        write_csv(out / "target_gen.csv", ("group", "series", "value"),
                  [(f"{b} steps", f"{k} targets", grid[(k, b)]) for b in ecfg.distance_bins
                   for k in ecfg.target_counts]),
    ]
    return TargetGenResult(grid, trained_self, rows, paths)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation (nan when either input is constant)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return float("nan")
    return float(stats.spearmanr(xs, ys).statistic)


# ---------------------------------------------------------------------------
# scene generalization


@dataclass
class SceneGenResult:
    frames_to_threshold: dict[str, list[int | None]]  # condition -> per (seed, test scene)
    zero_shot_success: list[float]
    random_success: list[float]
    paths: list[Path]


def _ftt_key(value: int | None, cap: int) -> float:
    """Never reaching the threshold counts as one step past the budget."""
    return float(cap + 1) if value is None else float(value)


def run_scene_generalization(cfg: TrainConfig, ecfg: ExperimentConfig, out_dir: str | Path,
                             progress: Callable[[str], None] | None = None) -> SceneGenResult:
    out = Path(out_dir)
    n_pre = max(ecfg.pretrain_scene_counts)
    pool = make_scenes(ecfg, count=n_pre)
    tests = make_scenes(ecfg, count=ecfg.test_scenes, offset=n_pre)
    ftt: dict[str, list[int | None]] = {f"pretrain-{k}": [] for k in ecfg.pretrain_scene_counts}
    ftt["scratch"] = []
    curve_rows, zero_shot, rand = [], [], []
    adapt_cfg = cfg.replace(frames_budget=ecfg.adapt_frames)

    def record(cond: str, seed: int, sc: Scene, metrics: Sequence[MetricsRow]) -> None:
        f = frames_to_threshold(metrics, ecfg.threshold, ecfg.threshold_window, ecfg.success_cap)
        ftt[cond].append(f)
        ok = np.array([m.success and m.episode_length <= ecfg.success_cap for m in metrics], float)
        if len(ok) >= ecfg.threshold_window:
            rate = np.convolve(ok, np.ones(ecfg.threshold_window) / ecfg.threshold_window, "valid")
            step = max(1, len(rate) // 50)
            for i in range(0, len(rate), step):
                curve_rows.append((cond, seed, sc.scene_id,
                                   metrics[i + ecfg.threshold_window - 1].frames_so_far, rate[i]))

    for seed in ecfg.seeds:
        for k in ecfg.pretrain_scene_counts:
            if progress:
                progress(f"seed {seed}: pre-train on {k} scenes")
            pre = train(cfg.replace(seed=seed, frames_budget=ecfg.pretrain_frames), tasks_for(pool[:k]),
                        out_dir=out / f"seed{seed}" / f"pretrain{k}")
            for sc in tests:
                params = pre.params.copy()
                res = train(adapt_cfg.replace(seed=seed), tasks_for([sc]), params_in=params, freeze_core=True)
                record(f"pretrain-{k}", seed, sc, res.metrics)
        for sc in tests:
            if progress:
                progress(f"seed {seed}: scratch on {sc.scene_id}")
            res = train(adapt_cfg.replace(seed=seed), tasks_for([sc]))
            record("scratch", seed, sc, res.metrics)
        if progress:
            progress(f"seed {seed}: single-branch zero-shot")
        sb = train(cfg.replace(seed=seed, frames_budget=ecfg.pretrain_frames), tasks_for(pool),
                   single_branch=True)
        test_tasks = tasks_for(tests)
        zs = evaluate_agent(ModelAgent(sb.params), test_tasks, ecfg.eval_episodes, ecfg.eval_cap,
                            ecfg.success_cap, seed=seed)
        rw = evaluate_agent(UniformAgent(), test_tasks, ecfg.eval_episodes, ecfg.eval_cap,
                            ecfg.success_cap, seed=seed)
        zero_shot.append(zs.success_rate)
        rand.append(rw.success_rate)
    conds = list(ftt)
    n = len(ecfg.seeds) * len(tests)
    paths = [
        write_csv(out / "scene_gen_frames_to_threshold.csv", ("condition", "seed", "scene", "frames"),
                  [(c, ecfg.seeds[i // len(tests)], tests[i % len(tests)].scene_id, ftt[c][i])
                   for c in conds for i in range(n)]),
        write_csv(out / "scene_gen_curves.csv", ("series", "seed", "scene", "x", "y"), curve_rows),
        write_csv(out / "scene_gen_zero_shot.csv", ("seed", "single_branch_success", "random_success"),
                  list(zip(ecfg.seeds, zero_shot, rand))),
    ]
    return SceneGenResult(ftt, zero_shot, rand, paths)


# ---------------------------------------------------------------------------
# embedding geometry


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Product-moment correlation and its two-sided p-value from the
    t-distribution with n - 2 degrees of freedom."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("pearson needs two equal-length vectors")
    n = x.size
    if n < 3:
        raise ValidationError(f"pearson needs at least 3 points, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise NumericError("correlation undefined for a constant input")
    r = float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


@dataclass
class EmbeddingResult:
    r: float
    p: float
    n_pairs: int
    projection: list[tuple[int, int, int, float, float]]  # x, y, heading, pc1, pc2


def pose_embeddings(params: ModelParams, scene: Scene) -> tuple[list[Pose], np.ndarray]:
    poses = list(scene.free_poses)
    stacks = np.stack([reset_history(observe(scene, p).astype(np.float32)).flat() for p in poses])
    return poses, embed_stack(params.core, stacks).astype(np.float64)


def embedding_geometry(params: ModelParams, scene: Scene, max_pairs: int = 2000,
                       seed: int = 0) -> EmbeddingResult:
    """Correlation between embedding distance and cell distance over sampled
    pose pairs, plus a 2-D PCA projection of all pose embeddings."""
    poses, emb = pose_embeddings(params, scene)
    n = len(poses)
    if n < 3:
        raise ValidationError("scene has too few poses for an embedding analysis")
    rng = np.random.default_rng([seed, 23])
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        i = rng.integers(n, size=max_pairs)
        j = (i + rng.integers(1, n, size=max_pairs)) % n
    xy = np.array([(p.x, p.y) for p in poses], dtype=np.float64)
    d_emb = np.linalg.norm(emb[i] - emb[j], axis=1)
    d_cell = np.linalg.norm(xy[i] - xy[j], axis=1)
    r, p = pearson(d_emb, d_cell)
    centered = emb - emb.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    rows = [(q.x, q.y, int(q.heading), float(a), float(b)) for q, (a, b) in zip(poses, proj)]
    return EmbeddingResult(r, p, len(i), rows)


def write_embedding(res: EmbeddingResult, out_dir: str | Path, name: str = "embedding") -> list[Path]:
    out = Path(out_dir)
    return [
        write_csv(out / f"{name}_pca.csv", ("x", "y", "heading", "pc1", "pc2"), res.projection),
        write_csv(out / f"{name}_stats.csv", ("pearson_r", "p_value", "pairs"), [(res.r, res.p, res.n_pairs)]),
    ]


def run_embedding(cfg: TrainConfig, ecfg: ExperimentConfig, out_dir: str | Path,
                  progress: Callable[[str], None] | None = None) -> list[dict]:
    """Train on one scene per seed and measure embedding geometry of the
    trained core; the null is an untrained core on an uncorrelated-feature
    (smoothing 0) copy of the scene."""
    out = Path(out_dir)
    scene = make_scenes(ecfg, count=1)[0]
    null_scene = dataclasses.replace(scene, smoothing=0.0, scene_id=scene.scene_id + "-null")
    rows = []
    for seed in ecfg.seeds:
        if progress:
            progress(f"seed {seed}: training")
        res = train(cfg.replace(seed=seed), tasks_for([scene]), out_dir=out / f"seed{seed}")
        fresh = ModelParams(res.params.arch, seed=seed)
        for label, params, sc in (("trained", res.params, scene), ("untrained", fresh, null_scene)):
            e = embedding_geometry(params, sc, ecfg.max_pairs, seed)
            write_embedding(e, out / f"seed{seed}", label)
            rows.append(dict(seed=seed, model=label, r=e.r, p=e.p, pairs=e.n_pairs))
    write_csv(out / "embedding_summary.csv", ("seed", "model", "pearson_r", "p_value", "pairs"),
              [(r["seed"], r["model"], r["r"], r["p"], r["pairs"]) for r in rows])
    return rows


# ---------------------------------------------------------------------------
# SVG plots


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H, ML, MR, MT, MB = 640, 400, 70, 170, 40, 50


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _svg_frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
        f'<text x="{(ML + W - MR) / 2}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{(MT + H - MB) / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {(MT + H - MB) / 2})">{escape(ylabel)}</text>',
    ]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * k / n for k in range(n + 1)]


def _no_data(parts: list[str]) -> str:
    parts.append(f'<text x="{(ML + W - MR) / 2}" y="{(MT + H - MB) / 2}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="14" fill="gray">no data</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart_svg(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str) -> str:
    parts = _svg_frame(title, xlabel, ylabel)
    pts = [p for s in series.values() for p in s if np.isfinite(p[1])]
    if not pts:
        return _no_data(parts)
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return ML + (x - x0) / (x1 - x0) * (W - ML - MR)

    def sy(y):
        return H - MB - (y - y0) / (y1 - y0) * (H - MT - MB)

    for t in _ticks(x0, x1):
        parts.append(f'<text x="{sx(t):.1f}" y="{H - MB + 16}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{_num(t)}</text>')
    for t in _ticks(y0, y1):
        parts.append(f'<text x="{ML - 6}" y="{sy(t) + 3:.1f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{_num(t)}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        good = [(x, y) for x, y in s if np.isfinite(y)]
        if good:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in good)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        ly = MT + 16 * k + 8
        parts.append(f'<line x1="{W - MR + 10}" y1="{ly}" x2="{W - MR + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - MR + 35}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart_svg(groups: dict[str, dict[str, float]], title: str, xlabel: str, ylabel: str) -> str:
    """Grouped bars: ``{group: {series: value}}``; missing values leave gaps."""
    parts = _svg_frame(title, xlabel, ylabel)
    vals = [v for g in groups.values() for v in g.values() if v is not None and np.isfinite(v)]
    if not vals:
        return _no_data(parts)
    series = list(dict.fromkeys(s for g in groups.values() for s in g))
    y1 = max(max(vals), 1e-12)
    gw = (W - ML - MR) / len(groups)
    bw = gw * 0.8 / len(series)
    for t in _ticks(0.0, y1):
        y = H - MB - t / y1 * (H - MT - MB)
        parts.append(f'<text x="{ML - 6}" y="{y + 3:.1f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{_num(t)}</text>')
    for gi, (gname, g) in enumerate(groups.items()):
        gx = ML + gi * gw + gw * 0.1
        for si, s in enumerate(series):
            v = g.get(s)
            if v is None or not np.isfinite(v):
                continue
            h = v / y1 * (H - MT - MB)
            parts.append(f'<rect x="{gx + si * bw:.1f}" y="{H - MB - h:.1f}" width="{bw:.1f}" height="{h:.1f}" '
                         f'fill="{PALETTE[si % len(PALETTE)]}"/>')
        parts.append(f'<text x="{gx + gw * 0.4:.1f}" y="{H - MB + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{escape(gname)}</text>')
    if len(series) > 1:
        for si, s in enumerate(series):
            ly = MT + 16 * si + 8
            parts.append(f'<rect x="{W - MR + 10}" y="{ly - 5}" width="12" height="10" fill="{PALETTE[si % len(PALETTE)]}"/>')
            parts.append(f'<text x="{W - MR + 28}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(s)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="") as fh:
        rows = [(n, r) for n, r in enumerate(csv.reader(fh), 1) if r and not r[0].startswith("#")]
    if not rows:
        return [], []
    header = rows[0][1]
    body = rows[1:]
    for n, r in body:
        if len(r) != len(header):
            raise ValidationError(f"{path}:{n}: expected {len(header)} fields, got {len(r)}")
    return header, body


def _float(path: Path, n: int, s: str) -> float:
    if s == "":
        return float("nan")
    try:
        return float(s)
    except ValueError:
        raise ValidationError(f"{path}:{n}: not a number: {s!r}") from None


def plot_csv(path: str | Path) -> str:
    """SVG for one CSV, chosen by its header: ``series,...,x,y`` gives a
    line chart (median over seeds per x); ``group,series,value`` and
    ``method,label,mean_length,...`` give bar charts."""
    path = Path(path)
    header, body = _read_rows(path)
    title = path.stem.replace("_", " ")
    if {"series", "x", "y"} <= set(header):
        ix, iy, iss = header.index("x"), header.index("y"), header.index("series")
        acc: dict[str, dict[float, list[float]]] = {}
        for n, r in body:
            acc.setdefault(r[iss], {}).setdefault(_float(path, n, r[ix]), []).append(_float(path, n, r[iy]))
        series = {s: [(x, float(np.median(v))) for x, v in sorted(d.items())] for s, d in acc.items()}
        return line_chart_svg(series, title, "frames", "value")
    if header[:3] == ["frames", "task_id", "episode_len"]:
        pts: dict[str, list[tuple[float, float]]] = {}
        for n, r in body:
            pts.setdefault(r[1], []).append((_float(path, n, r[0]), _float(path, n, r[2])))
        top = max((x for s in pts.values() for x, _ in s), default=1.0)
        width = max(top / 50, 1.0)
        series = {}
        for task, s in pts.items():
            bins: dict[float, list[float]] = {}
            for x, y in s:
                bins.setdefault((np.ceil(x / width)) * width, []).append(y)
            series[task] = [(x, float(np.mean(v))) for x, v in sorted(bins.items())]
        return line_chart_svg(series, title, "frames", "episode length")
    if header[:3] == ["group", "series", "value"]:
        groups: dict[str, dict[str, float]] = {}
        for n, r in body:
            groups.setdefault(r[0], {})[r[1]] = _float(path, n, r[2])
        return bar_chart_svg(groups, title, "group", "value")
    if header[:3] == ["method", "label", "mean_length"]:
        groups = {r[1]: {"mean length": _float(path, n, r[2])} for n, r in body}
        return bar_chart_svg(groups, title, "method", "mean trajectory length")
    raise ValidationError(f"{path}:1: no chart schema for header {','.join(header)}")


def emit_plots(csv_paths: Iterable[str | Path], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in csv_paths:
        p = Path(p)
        svg = plot_csv(p)
        dest = out / (p.stem + ".svg")
        dest.write_text(svg)
        written.append(dest)
    return written


PLOTTABLE = ("table.csv", "curves.csv", "target_gen.csv", "scene_gen_curves.csv")


def plottable_csvs(root: str | Path) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.rglob("*.csv") if p.name in PLOTTABLE)
