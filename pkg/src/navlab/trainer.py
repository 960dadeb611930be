"""Asynchronous actor-critic training and the shared evaluation pipeline.

Workers each own a task (scene + goal). In ``serialized`` mode all workers
advance in lock-step inside one thread: they act for up to ``t_max`` steps
against a parameter snapshot, then apply their gradients one after another
in worker order. This is deterministic for a given seed and keeps the
staleness profile of asynchronous updates. In ``hogwild`` mode each worker
is a thread that snapshots, rolls out and applies on its own schedule.
"""
from __future__ import annotations

import csv
import io
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from navlab.errors import ConfigError, NumericError
from navlab.gridworld import GOAL_REWARD, N_ACTIONS, STEP_PENALTY, Pose, Scene
from navlab.model import HISTORY, ModelArch, ModelParams, forward_arrays, backward_arrays
from navlab.numerics import (
    RmsPropState,
    a3c_loss_and_grads,
    clip_by_global_norm,
    masked_n_step_returns,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("frames", "task_id", "episode_len", "return", "success", "wall_ms")


@dataclass(frozen=True)
class Task:
    scene: Scene
    goal: Pose
    task_id: str

    def __post_init__(self) -> None:
        if Pose.of(*self.goal) not in self.scene.targets:
            raise ConfigError(f"task {self.task_id}: goal {self.goal} is not a target of {self.scene.scene_id}")
        object.__setattr__(self, "goal", Pose.of(*self.goal))

    @property
    def scene_key(self) -> str:
        return self.scene.scene_id


def tasks_for(scenes: Sequence[Scene], per_scene: int | None = None) -> list[Task]:
    """One task per (scene, target), optionally the first ``per_scene`` targets."""
    out = []
    for sc in scenes:
        targets = sc.targets if per_scene is None else sc.targets[:per_scene]
        for i, g in enumerate(targets):
            out.append(Task(sc, g, f"{sc.scene_id}/t{i}"))
    return out


@dataclass
class TrainConfig:
    frames_budget: int = 2_000_000
    workers: int = 20
    t_max: int = 5
    gamma: float = 0.99
    beta: float = 0.01
    lr: float = 7e-4
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 0.1
    clip_norm: float = 40.0
    slip_prob: float = 0.0
    episode_cap: int = 500
    eval_every: int = 100_000
    seed: int = 0
    mode: str = "serialized"
    embed_dim: int = 32
    fuse_dim: int = 32

    def validate(self) -> "TrainConfig":
        checks = [
            ("workers", self.workers >= 1, ">= 1"),
            ("t_max", self.t_max >= 1, ">= 1"),
            ("episode_cap", self.episode_cap >= 1, ">= 1"),
            ("frames_budget", self.frames_budget >= self.t_max, ">= t_max"),
            ("gamma", 0.0 < self.gamma <= 1.0, "in (0, 1]"),
            ("beta", self.beta >= 0.0, ">= 0"),
            ("lr", self.lr > 0.0, "> 0"),
            ("rmsprop_decay", 0.0 <= self.rmsprop_decay < 1.0, "in [0, 1)"),
            ("rmsprop_eps", self.rmsprop_eps > 0.0, "> 0"),
            ("clip_norm", self.clip_norm >= 0.0, ">= 0"),
            ("slip_prob", 0.0 <= self.slip_prob <= 0.5, "in [0, 0.5]"),
            ("eval_every", self.eval_every >= 1, ">= 1"),
            ("mode", self.mode in ("serialized", "hogwild"), "serialized|hogwild"),
            ("embed_dim", self.embed_dim >= 1, ">= 1"),
            ("fuse_dim", self.fuse_dim >= 1, ">= 1"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{key} = {getattr(self, key)!r} out of range (must be {rule})")
        return self

    def optimizer(self) -> RmsPropState:
        return RmsPropState(self.lr, self.rmsprop_decay, self.rmsprop_eps, self.mode)

    def arch(self, percept_dim: int, goal_stream: bool = True) -> ModelArch:
        return ModelArch(percept_dim, self.embed_dim, self.fuse_dim, goal_stream=goal_stream)

    def header_comment(self) -> str:
        return "# " + " ".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw}).validate()


@dataclass
class MetricsRow:
    frames_so_far: int
    task_id: str
    episode_length: int
    episode_return: float
    success: bool
    wall_ms: int = 0

    def csv_fields(self) -> list[str]:
        return [str(self.frames_so_far), self.task_id, str(self.episode_length),
                f"{self.episode_return:.4f}", str(int(self.success)), str(self.wall_ms)]


class MetricsSink:
    """Append-only, thread-safe; flushes every row when writing to a file."""

    def __init__(self, path: str | Path | None = None, comment: str | None = None):
        self.rows: list[MetricsRow] = []
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            if comment:
                self._fh.write(comment + "\n")
            self._fh.write(",".join(METRICS_HEADER) + "\n")
            self._fh.flush()

    def append(self, row: MetricsRow) -> None:
        with self._lock:
            self.rows.append(row)
            if self._fh is not None:
                self._fh.write(",".join(row.csv_fields()) + "\n")
                self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def metrics_csv_text(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(METRICS_HEADER) + "\n")
    for r in rows:
        buf.write(",".join(r.csv_fields()) + "\n")
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [MetricsRow(int(r["frames"]), r["task_id"], int(r["episode_len"]), float(r["return"]),
                       r["success"] == "1", int(r["wall_ms"])) for r in reader]


class FrameCounter:
    def __init__(self, budget: int):
        self.budget = budget
        self.value = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> int:
        with self._lock:
            self.value += n
            return self.value

    @property
    def exhausted(self) -> bool:
        return self.value >= self.budget


# ---------------------------------------------------------------------------
# world: tables of several scenes concatenated into one global pose space


class World:
    def __init__(self, scenes: Sequence[Scene]):
        self.scenes: list[Scene] = []
        self._offset: dict[str, int] = {}
        nxt, frames = [], []
        off = 0
        for sc in scenes:
            if sc.scene_id in self._offset:
                continue
            tb = sc.table
            self.scenes.append(sc)
            self._offset[sc.scene_id] = off
            nxt.append(tb.next_pose + off)
            frames.append(tb.frames)
            off += tb.n_poses
        dims = {f.shape[1] for f in frames}
        if len(dims) != 1:
            raise ConfigError(f"scenes disagree on percept_dim: {sorted(dims)}")
        self.next_pose = np.concatenate(nxt)
        self.frames = np.concatenate(frames)
        self.percept_dim = dims.pop()
        self._dist_cache: dict[int, np.ndarray] = {}

    @classmethod
    def for_tasks(cls, tasks: Sequence[Task]) -> "World":
        return cls([t.scene for t in tasks])

    def offset(self, scene: Scene) -> int:
        return self._offset[scene.scene_id]

    def gid(self, scene: Scene, pose: Pose) -> int:
        return self.offset(scene) + scene.table.pose_id(pose)

    def goal_gid(self, task: Task) -> int:
        return self.gid(task.scene, task.goal)

    def sample_starts(self, task: Task, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform over free poses of the task's scene, excluding the goal."""
        tb = task.scene.table
        g = tb.pose_id(task.goal)
        i = rng.integers(tb.n_poses - 1, size=n)
        return self.offset(task.scene) + np.where(i >= g, i + 1, i)

    def stacks(self, hist: np.ndarray) -> np.ndarray:
        """Flattened observation stacks for pose-id histories ``(..., HISTORY)``."""
        f = self.frames[hist]
        return f.reshape(*hist.shape[:-1], -1)

    def goal_stack(self, goal_gid: np.ndarray) -> np.ndarray:
        f = self.frames[goal_gid]
        return np.repeat(f[..., None, :], HISTORY, axis=-2).reshape(*np.shape(goal_gid), -1)

    def distances_to(self, task: Task) -> np.ndarray:
        """BFS action-distance to the task goal, indexed by local pose id."""
        key = self.goal_gid(task)
        d = self._dist_cache.get(key)
        if d is None:
            tb = task.scene.table
            d = tb.distances_to(tb.pose_id(task.goal))
            self._dist_cache[key] = d
        return d


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    a = (np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(a, N_ACTIONS - 1)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Segment:
    """Up to ``t_max`` steps per worker; row ``b`` is valid for ``lengths[b]``
    steps and ``hist[b, lengths[b]]`` is the history after the last step."""

    hist: np.ndarray  # (B, T+1, HISTORY) global pose ids
    actions: np.ndarray  # (B, T) intended (pre-slip) actions
    rewards: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,)
    terminal: np.ndarray  # (B,) goal reached on the last step
    goals: np.ndarray  # (B,) goal gids

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.actions.shape[1])[None, :] < self.lengths[:, None]


class Learner(Protocol):
    def snapshot(self, tasks: Sequence[Task]): ...

    def act_probs(self, snap, state_x: np.ndarray, goal_x: np.ndarray) -> np.ndarray: ...

    def update(self, snap, seg: Segment, world: World) -> float: ...


def _stack_or_share(groups) -> np.ndarray:
    """One copied buffer when every worker uses the same group, otherwise a
    ``(B, size)`` stack."""
    if all(g is groups[0] for g in groups):
        return groups[0].flat.copy()
    return np.stack([g.flat for g in groups])


class A3CLearner:
    """n-step advantage actor-critic over any task -> (core, branch) mapping."""

    def __init__(self, arch: ModelArch, groups_for: Callable[[Task], tuple], opt: RmsPropState,
                 cfg: TrainConfig, freeze_core: bool = False):
        self.arch = arch
        self.groups_for = groups_for
        self.opt = opt
        self.cfg = cfg
        self.freeze_core = freeze_core
        self.updates = 0

    def snapshot(self, tasks: Sequence[Task]):
        pairs = [self.groups_for(t) for t in tasks]
        cores = [p[0] for p in pairs]
        branches = [p[1] for p in pairs]
        return cores, branches, _stack_or_share(cores), _stack_or_share(branches)

    def act_probs(self, snap, state_x, goal_x):
        _, _, core_flat, branch_flat = snap
        out, _ = forward_arrays(self.arch, core_flat, branch_flat, state_x, goal_x)
        return out.probs[:, 0]

    def update(self, snap, seg: Segment, world: World) -> float:
        cores, branches, core_flat, branch_flat = snap
        B, T = seg.actions.shape
        x = world.stacks(seg.hist)
        g = world.goal_stack(seg.goals)[:, None, :]
        out, cache = forward_arrays(self.arch, core_flat, branch_flat, x, g)
        rows = np.arange(B)
        bootstrap = out.value[rows, seg.lengths].astype(np.float64)
        returns = masked_n_step_returns(seg.rewards, bootstrap, seg.terminal, seg.lengths, self.cfg.gamma)
        mask = seg.mask
        loss, hg = a3c_loss_and_grads(out.probs[:, :T], out.value[:, :T], seg.actions,
                                      returns.astype(out.value.dtype), self.cfg.beta, mask)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} (lengths={seg.lengths.tolist()})")
        hg.logits = np.concatenate([hg.logits, np.zeros_like(hg.logits[:, :1])], axis=1)
        hg.value = np.concatenate([hg.value, np.zeros_like(hg.value[:, :1])], axis=1)
        core_grad, branch_grad = backward_arrays(cache, hg, per_worker=True)
        for b in range(B):
            if seg.lengths[b] == 0:
                continue
            parts = [branch_grad[b]] if self.freeze_core else [core_grad[b], branch_grad[b]]
            clip_by_global_norm(parts, self.cfg.clip_norm)
            if not self.freeze_core:
                self.opt.update(cores[b].name, cores[b].flat, core_grad[b])
            self.opt.update(branches[b].name, branches[b].flat, branch_grad[b])
            self.updates += 1
        return loss


class WorkerPool:
    """``B`` workers stepping in lock-step. Worker ``w`` cycles through its
    task list, moving to the next task after each episode."""

    def __init__(self, world: World, assignments: Sequence[Sequence[Task]], cfg: TrainConfig,
                 counter: FrameCounter, sink: MetricsSink, rng: np.random.Generator,
                 wall_clock: bool = False):
        self.world = world
        self.assign = [list(a) for a in assignments]
        self.cfg = cfg
        self.counter = counter
        self.sink = sink
        self.rng = rng
        self.wall_clock = wall_clock
        self.t0 = time.perf_counter()
        B = len(self.assign)
        self.cursor = np.zeros(B, dtype=np.int64)
        self.tasks: list[Task] = [a[0] for a in self.assign]
        self.goal = np.array([world.goal_gid(t) for t in self.tasks])
        self.pos = np.zeros(B, dtype=np.int64)
        self.hist = np.zeros((B, HISTORY), dtype=np.int64)
        self.ep_len = np.zeros(B, dtype=np.int64)
        self.ep_ret = np.zeros(B)
        self.steps = np.zeros(B, dtype=np.int64)
        for b in range(B):
            self._start_episode(b)

    def _start_episode(self, b: int) -> None:
        task = self.tasks[b]
        s = int(self.world.sample_starts(task, 1, self.rng)[0])
        self.pos[b] = s
        self.hist[b] = s
        self.ep_len[b] = 0
        self.ep_ret[b] = 0.0

    def _next_task(self, b: int) -> None:
        self.cursor[b] = (self.cursor[b] + 1) % len(self.assign[b])
        self.tasks[b] = self.assign[b][self.cursor[b]]
        self.goal[b] = self.world.goal_gid(self.tasks[b])

    def run_segment(self, learner: Learner) -> Segment | None:
        cfg, world, rng = self.cfg, self.world, self.rng
        B, T = len(self.tasks), cfg.t_max
        if self.counter.exhausted:
            return None
        snap = learner.snapshot(self.tasks)
        goals = self.goal.copy()
        goal_x = world.goal_stack(goals)[:, None, :]
        seg = Segment(
            hist=np.zeros((B, T + 1, HISTORY), dtype=np.int64),
            actions=np.zeros((B, T), dtype=np.int64),
            rewards=np.zeros((B, T)),
            lengths=np.zeros(B, dtype=np.int64),
            terminal=np.zeros(B, dtype=bool),
            goals=goals,
        )
        live = np.ones(B, dtype=bool)
        ended: list[int] = []
        for t in range(T):
            if not live.any():
                break
            if self.counter.exhausted:
                break
            seg.hist[:, t] = self.hist
            probs = learner.act_probs(snap, world.stacks(self.hist)[:, None, :], goal_x)
            a = sample_actions(probs, rng)
            a_exec = a
            if cfg.slip_prob > 0:
                slip = rng.random(B) < cfg.slip_prob
                a_exec = np.where(slip, (a + rng.integers(1, N_ACTIONS, size=B)) % N_ACTIONS, a)
            nxt = world.next_pose[self.pos, a_exec]
            done = nxt == goals
            r = np.where(done, GOAL_REWARD, STEP_PENALTY)
            idx = np.nonzero(live)[0]
            seg.actions[idx, t] = a[idx]
            seg.rewards[idx, t] = r[idx]
            seg.lengths[idx] += 1
            self.pos[idx] = nxt[idx]
            self.hist[idx, :-1] = self.hist[idx, 1:]
            self.hist[idx, -1] = nxt[idx]
            self.ep_len[idx] += 1
            self.ep_ret[idx] += r[idx]
            self.steps[idx] += 1
            frames = self.counter.add(len(idx))
            fin = idx[done[idx] | (self.ep_len[idx] >= cfg.episode_cap)]
            for b in fin.tolist():
                seg.terminal[b] = bool(done[b])
                seg.hist[b, seg.lengths[b]] = self.hist[b]
                wall = int((time.perf_counter() - self.t0) * 1000) if self.wall_clock else 0
                self.sink.append(MetricsRow(frames, self.tasks[b].task_id, int(self.ep_len[b]),
                                            float(self.ep_ret[b]), bool(done[b]), wall))
                live[b] = False
                ended.append(b)
        for b in np.nonzero(live)[0].tolist():
            seg.hist[b, seg.lengths[b]] = self.hist[b]
        if seg.lengths.sum() == 0:
            return None
        learner.update(snap, seg, world)
        for b in ended:
            self._next_task(b)
            self._start_episode(b)
        return seg


def assign_workers(tasks: Sequence[Task], workers: int) -> list[list[Task]]:
    """One worker per task; with fewer workers each cycles through every
    ``workers``-th task; with more, tasks get several workers."""
    if workers >= len(tasks):
        return [[tasks[w % len(tasks)]] for w in range(workers)]
    return [list(tasks[w::workers]) for w in range(workers)]


def thread_cap(workers: int) -> int:
    """Workers allowed to run at once; ``NAVLAB_THREADS`` lowers the cap."""
    raw = os.environ.get("NAVLAB_THREADS", "").strip()
    if not raw:
        return workers
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"NAVLAB_THREADS must be a positive integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"NAVLAB_THREADS must be a positive integer, got {raw!r}")
    return min(cap, workers)


def run_workers(learner_factory: Callable[[], Learner], world: World, tasks: Sequence[Task],
                cfg: TrainConfig, sink: MetricsSink, counter: FrameCounter | None = None,
                on_frames: Callable[[int], None] | None = None) -> FrameCounter:
    """Drive workers until the frame budget is consumed.

    ``on_frames(frames)`` fires each time the counter crosses a multiple of
    ``cfg.eval_every`` (serialized mode: between segments).
    """
    counter = counter or FrameCounter(cfg.frames_budget)
    assignments = assign_workers(tasks, cfg.workers)
    if cfg.mode == "serialized":
        pool = WorkerPool(world, assignments, cfg, counter, sink, np.random.default_rng([cfg.seed, 7]))
        learner = learner_factory()
        mark = cfg.eval_every
        while pool.run_segment(learner) is not None:
            if on_frames is not None and counter.value >= mark:
                while mark <= counter.value:
                    mark += cfg.eval_every
                on_frames(counter.value)
        return counter

    errors: list[BaseException] = []
    seeds = np.random.SeedSequence([cfg.seed, 7]).spawn(len(assignments))
    learner = learner_factory()
    gate = threading.BoundedSemaphore(thread_cap(len(assignments)))

    def work(i: int) -> None:
        try:
            pool = WorkerPool(world, [assignments[i]], cfg, counter, sink,
                              np.random.default_rng(seeds[i]), wall_clock=True)
            while True:
                with gate:
                    if pool.run_segment(learner) is None:
                        break
        except BaseException as exc:  # surfaced after join
            errors.append(exc)
            counter.add(counter.budget)

    threads = [threading.Thread(target=work, args=(i,), daemon=True) for i in range(len(assignments))]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    if on_frames is not None:
        on_frames(counter.value)
    return counter


# ---------------------------------------------------------------------------
# training entry point


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[MetricsRow]
    frames: int
    checkpoints: list[Path] = field(default_factory=list)


def train(cfg: TrainConfig, tasks: Sequence[Task], params_in: ModelParams | None = None,
          freeze_core: bool = False, single_branch: bool = False,
          out_dir: str | Path | None = None,
          callback: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Train the goal-conditioned siamese actor-critic on ``tasks``.

    Branches for unseen scenes are created on first use. With ``out_dir``,
    writes ``metrics.csv`` line by line and checkpoints every
    ``eval_every`` frames plus ``final.ckpt``.
    """
    from navlab.checkpoint import save_model

    cfg.validate()
    if not tasks:
        raise ConfigError("train needs at least one task")
    world = World.for_tasks(tasks)
    arch = cfg.arch(world.percept_dim)
    if params_in is None:
        params = ModelParams(arch, seed=cfg.seed, single_branch=single_branch)
    else:
        params = params_in
        if params.arch.percept_dim != world.percept_dim:
            raise ConfigError("checkpoint percept_dim does not match the scenes")
        if single_branch and not params.single_branch:
            params = params.single_branch_view()
    for t in tasks:
        params.branch_for(t.scene_key, create_if_missing=True)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    sink = MetricsSink(out / "metrics.csv" if out else None, cfg.header_comment())
    opt = cfg.optimizer()
    ckpts: list[Path] = []

    def on_frames(frames: int) -> None:
        if out is not None:
            p = out / f"ckpt_{frames:010d}.ckpt"
            save_model(params, p)
            ckpts.append(p)
        if callback is not None:
            callback(frames, params)

    def factory() -> A3CLearner:
        return A3CLearner(params.arch, lambda t: (params.core, params.branch_for(t.scene_key)),
                          opt, cfg, freeze_core)

    try:
        counter = run_workers(factory, world, tasks, cfg, sink, on_frames=on_frames)
    finally:
        sink.close()
    if out is not None:
        save_model(params, out / "final.ckpt")
        ckpts.append(out / "final.ckpt")
    return TrainResult(params, list(sink.rows), counter.value, ckpts)


# ---------------------------------------------------------------------------
# evaluation


class Agent(Protocol):
    stochastic: bool

    def probs(self, task: Task, world: World, hist: np.ndarray) -> np.ndarray: ...


class ModelAgent:
    """Target-driven model; actions drawn from the policy (or argmax)."""

    stochastic = True

    def __init__(self, params: ModelParams, argmax: bool = False):
        self.params = params
        self.stochastic = not argmax

    def probs(self, task, world, hist):
        br = self.params.branch_for(task.scene_key)
        x = world.stacks(hist)
        g = None
        if self.params.arch.goal_stream:
            g = np.broadcast_to(world.goal_stack(np.array(world.goal_gid(task))), x.shape)
        out, _ = forward_arrays(self.params.arch, self.params.core.flat, br.flat, x, g)
        return out.probs


class UniformAgent:
    stochastic = True

    def probs(self, task, world, hist):
        return np.full((hist.shape[0], N_ACTIONS), 1.0 / N_ACTIONS)


class OracleAgent:
    """Follows a BFS-optimal action from the current pose."""

    stochastic = False

    def probs(self, task, world, hist):
        dist = world.distances_to(task)
        tb = task.scene.table
        local = hist[:, -1] - world.offset(task.scene)
        p = np.zeros((hist.shape[0], N_ACTIONS))
        for i, pid in enumerate(local.tolist()):
            p[i, tb.optimal_action(pid, dist)] = 1.0
        return p


@dataclass
class TaskReport:
    task_id: str
    mean_length: float
    success_rate: float
    sp_ratio: float
    mean_shortest: float
    lengths: list[int]


@dataclass
class EvalReport:
    per_task: list[TaskReport]
    mean_length: float
    success_rate: float
    sp_ratio: float
    mean_shortest: float
    seed: int
    frames: int = 0
    label: str = ""

    def task(self, task_id: str) -> TaskReport:
        return next(r for r in self.per_task if r.task_id == task_id)


def run_episodes(agent: Agent, task: Task, world: World, starts: np.ndarray, episode_cap: int,
                 rng: np.random.Generator, slip_prob: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized episodes from ``starts``; returns (lengths, reached)."""
    n = len(starts)
    goal = world.goal_gid(task)
    pos = starts.astype(np.int64).copy()
    hist = np.repeat(pos[:, None], HISTORY, axis=1)
    lengths = np.zeros(n, dtype=np.int64)
    reached = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(episode_cap):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        p = agent.probs(task, world, hist[idx])
        if agent.stochastic:
            a = sample_actions(p, rng)
        else:
            a = np.argmax(p, axis=-1)
        if slip_prob > 0:
            slip = rng.random(idx.size) < slip_prob
            a = np.where(slip, (a + rng.integers(1, N_ACTIONS, size=idx.size)) % N_ACTIONS, a)
        nxt = world.next_pose[pos[idx], a]
        pos[idx] = nxt
        hist[idx, :-1] = hist[idx, 1:]
        hist[idx, -1] = nxt
        lengths[idx] += 1
        hit = nxt == goal
        reached[idx[hit]] = True
        active[idx[hit]] = False
    lengths[~reached] = episode_cap
    return lengths, reached


def evaluate_agent(agent: Agent, tasks: Sequence[Task], episodes_per_task: int, episode_cap: int,
                   success_cap: int | None = None, seed: int = 0, slip_prob: float = 0.0,
                   frames: int = 0, label: str = "", world: World | None = None) -> EvalReport:
    """Shared evaluation pipeline for every agent.

    Start poses come from a stream seeded only by ``seed`` and the task
    order, so agents evaluated with one seed see identical starts. Failures
    count as ``episode_cap`` steps; success means the goal was reached in at
    most ``success_cap`` steps.
    """
    success_cap = episode_cap if success_cap is None else success_cap
    world = world or World.for_tasks(tasks)
    start_rng = np.random.default_rng([seed, 11])
    act_rng = np.random.default_rng([seed, 13])
    reports = []
    for task in tasks:
        starts = world.sample_starts(task, episodes_per_task, start_rng)
        lengths, reached = run_episodes(agent, task, world, starts, episode_cap, act_rng, slip_prob)
        dist = world.distances_to(task)[starts - world.offset(task.scene)]
        success = reached & (lengths <= success_cap)
        reports.append(TaskReport(task.task_id, float(lengths.mean()), float(success.mean()),
                                  float(np.mean(lengths / dist)), float(dist.mean()),
                                  lengths.tolist()))
    return EvalReport(
        per_task=reports,
        mean_length=float(np.mean([r.mean_length for r in reports])),
        success_rate=float(np.mean([r.success_rate for r in reports])),
        sp_ratio=float(np.mean([r.sp_ratio for r in reports])),
        mean_shortest=float(np.mean([r.mean_shortest for r in reports])),
        seed=seed, frames=frames, label=label,
    )


def evaluate(params: ModelParams, tasks: Sequence[Task], episodes_per_task: int, episode_cap: int,
             success_cap: int | None = None, seed: int = 0, argmax: bool = False,
             agent: Agent | None = None, frames: int = 0) -> EvalReport:
    """Evaluate the target-driven model (or an injected ``agent``)."""
    if agent is None:
        for t in tasks:
            params.branch_for(t.scene_key)
        agent = ModelAgent(params, argmax=argmax)
    return evaluate_agent(agent, tasks, episodes_per_task, episode_cap, success_cap, seed,
                          frames=frames)
