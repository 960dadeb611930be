"""Comparison agents: random walk, shortest-path oracle, asynchronous
one-step Q, per-target actor-critic without a goal input, and the
single-branch ablation of the target-driven model.

Every agent is scored by :func:`navlab.trainer.evaluate_agent`, so reports
are comparable by construction.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from navlab.checkpoint import dump_groups, load_groups
from navlab.errors import CheckpointError, ConfigError, NumericError, SceneError
from navlab.gridworld import N_ACTIONS, Pose, Scene
from navlab.model import ModelParams
from navlab.numerics import (
    Layout,
    ParamBlock,
    ParamGroup,
    affine_relu_backward,
    affine_relu_forward,
    clip_by_global_norm,
    layout_views,
)
from navlab.trainer import (
    EvalReport,
    FrameCounter,
    MetricsSink,
    ModelAgent,
    OracleAgent,
    Segment,
    Task,
    TrainConfig,
    TrainResult,
    UniformAgent,
    World,
    evaluate_agent,
    run_workers,
    train,
)

METHODS = ("random", "shortest", "q1", "a3c1", "a3c4", "single-branch", "final")
TARGET_COPY_FRAMES = 2000


def _task(scene: Scene, goal: Pose) -> Task:
    """A one-off task; ``goal`` may be any free pose, not only a listed target."""
    goal = Pose.of(*goal)
    if not scene.valid_pose(goal):
        raise SceneError(f"goal {goal} is not a free pose of {scene.scene_id}")
    if goal not in scene.targets:
        scene = dataclasses.replace(scene, targets=scene.targets + (goal,))
    return Task(scene, goal, f"{scene.scene_id}/{goal.x},{goal.y},{int(goal.heading)}")


def random_walk_eval(scene: Scene, goal: Pose, episodes: int, episode_cap: int,
                     seed: int = 0) -> EvalReport:
    """Uniformly random actions, scored like every other agent."""
    return evaluate_agent(UniformAgent(), [_task(scene, goal)], episodes, episode_cap, seed=seed,
                          label="random")


def shortest_path_eval(scene: Scene, goal: Pose, episodes: int, seed: int = 0) -> EvalReport:
    """Replays BFS-optimal actions; lengths equal shortest-path lengths."""
    task = _task(scene, goal)
    world = World([scene])
    if not np.all(np.isfinite(world.distances_to(task))):
        raise SceneError(f"goal {goal} is unreachable from part of {scene.scene_id}")
    cap = int(world.distances_to(task).max()) + 1
    return evaluate_agent(OracleAgent(), [task], episodes, cap, seed=seed, label="shortest",
                          world=world)


# ---------------------------------------------------------------------------
# one-step Q


def q_layout(input_dim: int, embed_dim: int, fuse_dim: int) -> Layout:
    """State-stream trunk sized like the target-driven model's, then Q values."""
    return (("embed", embed_dim, input_dim), ("fc", fuse_dim, embed_dim), ("q_head", N_ACTIONS, fuse_dim))


def new_qnet(name: str, layout: Layout, seed: int) -> ParamGroup:
    g = ParamGroup(name, layout)
    g.init_uniform(np.random.default_rng([seed, zlib.crc32(name.encode())]), zero_blocks=("q_head",))
    return g


def q_forward(layout: Layout, flat: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, list]:
    blocks = [ParamBlock(n, w, b) for n, (w, b) in layout_views(flat, layout).items()]
    caches = []
    h = x
    for k, blk in enumerate(blocks):
        h, c = affine_relu_forward(blk, h, final_layer=k == len(blocks) - 1)
        caches.append((blk, c))
    return h, caches


def q_backward(layout: Layout, caches: list, dq: np.ndarray, per_worker: bool = False) -> np.ndarray:
    grads = {}
    d = dq
    for k in range(len(caches) - 1, -1, -1):
        blk, c = caches[k]
        d, g = affine_relu_backward(blk, c, d, per_worker, need_dx=k > 0)
        grads[blk.name] = g
    lead = grads[layout[0][0]].weights.shape[:-2]
    flat = np.zeros(lead + (sum(o * i + o for _, o, i in layout),), dtype=dq.dtype)
    for name, (w, b) in layout_views(flat, layout).items():
        w[...] = grads[name].weights
        b[...] = grads[name].bias
    return flat


def td_targets(rewards: np.ndarray, next_q: np.ndarray, terminal: np.ndarray, lengths: np.ndarray,
               gamma: float) -> np.ndarray:
    """``y_t = r_t + gamma * max_a Q'(s_{t+1}, a)``; no bootstrap on the goal step."""
    B, T = rewards.shape
    y = rewards + gamma * next_q.max(axis=-1)
    last = np.arange(T)[None, :] == (lengths - 1)[:, None]
    y = np.where(last & terminal[:, None], rewards, y)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite TD target")
    return y


def epsilon_at(frames: int, budget: int, final: float = 0.1) -> float:
    """Linear anneal 1 -> ``final`` over the first half of the budget."""
    half = max(budget // 2, 1)
    return max(final, 1.0 - (1.0 - final) * frames / half)


class QLearner:
    """Asynchronous one-step Q: gradients accumulated over a worker's
    segment, a target network copied every ``TARGET_COPY_FRAMES`` frames."""

    def __init__(self, nets: dict[str, ParamGroup], layout: Layout, cfg: TrainConfig,
                 counter: FrameCounter):
        self.nets = nets
        self.targets = {k: g.copy() for k, g in nets.items()}
        self.layout = layout
        self.cfg = cfg
        self.opt = cfg.optimizer()
        self.counter = counter
        self.last_copy = 0

    def _stack(self, groups):
        if all(g is groups[0] for g in groups):
            return groups[0].flat.copy()
        return np.stack([g.flat for g in groups])

    def snapshot(self, tasks: Sequence[Task]):
        nets = [self.nets[t.task_id] for t in tasks]
        targets = [self.targets[t.task_id] for t in tasks]
        return nets, self._stack(nets), self._stack(targets)

    def act_probs(self, snap, state_x, goal_x):
        _, flat, _ = snap
        q, _ = q_forward(self.layout, flat, state_x)
        q = q[:, 0]
        eps = epsilon_at(self.counter.value, self.counter.budget)
        p = np.full(q.shape, eps / N_ACTIONS)
        p[np.arange(len(q)), q.argmax(axis=-1)] += 1.0 - eps
        return p

    def update(self, snap, seg: Segment, world: World) -> float:
        nets, flat, target_flat = snap
        B, T = seg.actions.shape
        x = world.stacks(seg.hist)
        q, caches = q_forward(self.layout, flat, x)
        q_next, _ = q_forward(self.layout, target_flat, x[:, 1:])
        y = td_targets(seg.rewards, q_next.astype(np.float64), seg.terminal, seg.lengths, self.cfg.gamma)
        rows = np.arange(B)[:, None]
        chosen = q[rows, np.arange(T)[None, :], seg.actions]
        err = np.where(seg.mask, chosen - y, 0.0)
        dq = np.zeros_like(q)
        dq[rows, np.arange(T)[None, :], seg.actions] = 2.0 * err
        grad = q_backward(self.layout, caches, dq, per_worker=True)
        for b in range(B):
            if seg.lengths[b] == 0:
                continue
            clip_by_global_norm([grad[b]], self.cfg.clip_norm)
            self.opt.update(nets[b].name, nets[b].flat, grad[b])
        if self.counter.value - self.last_copy >= TARGET_COPY_FRAMES:
            for k, g in self.nets.items():
                self.targets[k].flat[...] = g.flat
            self.last_copy = self.counter.value
        return float(np.sum(err ** 2))


@dataclass
class QResult:
    nets: dict[str, ParamGroup]
    layout: Layout
    metrics: list
    frames: int


def one_step_q_train(cfg: TrainConfig, task: Task, out_dir: str | Path | None = None) -> QResult:
    """Train one Q-network on a single task with ``cfg.workers`` workers."""
    cfg.validate()
    world = World([task.scene])
    layout = q_layout(4 * world.percept_dim, cfg.embed_dim, cfg.fuse_dim)
    nets = {task.task_id: new_qnet(f"q/{task.task_id}", layout, cfg.seed)}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    sink = MetricsSink(out / "metrics.csv" if out else None, cfg.header_comment())
    counter = FrameCounter(cfg.frames_budget)
    learner = QLearner(nets, layout, cfg, counter)
    try:
        run_workers(lambda: learner, world, [task], cfg, sink, counter=counter)
    finally:
        sink.close()
    if out is not None:
        save_qnets(nets, layout, out / "final.ckpt")
    return QResult(nets, layout, list(sink.rows), counter.value)


def save_qnets(nets: dict[str, ParamGroup], layout: Layout, path: str | Path) -> None:
    meta = {"kind": "qnet", "layout": [list(b) for b in layout], "tasks": sorted(nets)}
    Path(path).write_bytes(dump_groups(meta, [nets[k] for k in sorted(nets)]))


def load_qnets(path: str | Path) -> tuple[dict[str, ParamGroup], Layout]:
    header, groups = load_groups(Path(path).read_bytes())
    if header.get("kind") != "qnet":
        raise CheckpointError(f"expected a qnet checkpoint, got kind {header.get('kind')!r}")
    layout = tuple((b[0], int(b[1]), int(b[2])) for b in header["layout"])
    return {k: g for k, g in zip(header["tasks"], groups)}, layout


class QAgent:
    """Greedy (epsilon 0) policy of per-task Q-networks."""

    stochastic = False

    def __init__(self, nets: dict[str, ParamGroup], layout: Layout):
        self.nets = nets
        self.layout = layout

    def probs(self, task, world, hist):
        q, _ = q_forward(self.layout, self.nets[task.task_id].flat, world.stacks(hist))
        p = np.zeros(q.shape)
        p[np.arange(len(q)), q.argmax(axis=-1)] = 1.0
        return p


# ---------------------------------------------------------------------------
# per-target actor-critic and the single-branch ablation


def per_target_a3c_train(cfg: TrainConfig, task: Task, threads_per_target: int,
                         out_dir: str | Path | None = None) -> TrainResult:
    """Goal-free actor-critic trained by ``threads_per_target`` workers on one task."""
    if threads_per_target < 1:
        raise ConfigError(f"threads_per_target = {threads_per_target} must be >= 1")
    arch = cfg.arch(task.scene.percept_dim, goal_stream=False)
    params = ModelParams(arch, seed=cfg.seed)
    return train(cfg.replace(workers=threads_per_target), [task], params_in=params, out_dir=out_dir)


class PerTaskAgent:
    """Routes each task to its own agent."""

    def __init__(self, agents: dict):
        self.agents = agents
        first = next(iter(agents.values()))
        self.stochastic = first.stochastic

    def probs(self, task, world, hist):
        return self.agents[task.task_id].probs(task, world, hist)


@dataclass
class MethodRun:
    method: str
    agent: object
    metrics: list
    frames: int


def train_method(method: str, cfg: TrainConfig, tasks: Sequence[Task],
                 out_dir: str | Path | None = None) -> MethodRun:
    """Train (if needed) one comparison method on ``tasks`` with a total
    budget of ``cfg.frames_budget`` frames; per-target methods split it
    evenly across tasks."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    out = Path(out_dir) if out_dir is not None else None
    if method == "random":
        return MethodRun(method, UniformAgent(), [], 0)
    if method == "shortest":
        return MethodRun(method, OracleAgent(), [], 0)
    if method in ("final", "single-branch"):
        res = train(cfg, tasks, single_branch=method == "single-branch", out_dir=out)
        return MethodRun(method, ModelAgent(res.params), res.metrics, res.frames)
    per_task = cfg.replace(frames_budget=max(cfg.frames_budget // len(tasks), cfg.t_max))
    agents, metrics, frames = {}, [], 0
    for i, task in enumerate(tasks):
        sub = out / f"task{i:03d}" if out is not None else None
        if method == "q1":
            r = one_step_q_train(per_task.replace(workers=4), task, sub)
            agents[task.task_id] = QAgent(r.nets, r.layout)
        else:
            r = per_target_a3c_train(per_task, task, 1 if method == "a3c1" else 4, sub)
            agents[task.task_id] = ModelAgent(r.params)
        metrics.extend(r.metrics)
        frames += r.frames
    return MethodRun(method, PerTaskAgent(agents), metrics, frames)
