"""Procedural grid-world scenes, pose dynamics, synthetic perception and BFS.

A scene is an immutable occupancy grid plus a list of candidate goal poses.
Percepts are regenerated from the scene's feature seed on demand, so scenes
persist as a small header and an obstacle bitmap.

Headings: N = +y, E = +x, S = -y, W = -x.
"""
from __future__ import annotations

import enum
import json
import struct
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from navlab.errors import SceneError

GOAL_REWARD = 10.0
STEP_PENALTY = -0.01

SCENE_MAGIC = b"NAVSCN1"
SCENE_VERSION = 1


class Heading(enum.IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    MOVE_BACKWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


N_ACTIONS = len(Action)
# (dx, dy) for a forward step, indexed by heading
_FORWARD = ((0, 1), (1, 0), (0, -1), (-1, 0))


class Pose(NamedTuple):
    x: int
    y: int
    heading: Heading

    @classmethod
    def of(cls, x: int, y: int, heading: int | str) -> "Pose":
        h = Heading[heading] if isinstance(heading, str) else Heading(heading)
        return cls(int(x), int(y), h)

    def __str__(self) -> str:
        return f"({self.x},{self.y},{self.heading.name})"


@dataclass(frozen=True)
class StepOutcome:
    next_pose: Pose
    reward: float
    done: bool
    collided: bool


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    width: int
    height: int
    obstacle_mask: np.ndarray  # (height, width) bool, True = blocked
    smoothing: float
    percept_dim: int
    feature_seed: int
    targets: tuple[Pose, ...]
    # provenance only; not needed to rebuild the scene
    seed: int = 0
    obstacle_density: float = 0.0

    def __post_init__(self) -> None:
        mask = np.asarray(self.obstacle_mask, dtype=bool)
        if mask.shape != (self.height, self.width):
            raise SceneError(
                f"obstacle_mask shape {mask.shape} != ({self.height}, {self.width})"
            )
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "obstacle_mask", mask)
        object.__setattr__(self, "targets", tuple(Pose.of(*t) for t in self.targets))
        for t in self.targets:
            if not self.is_free(t.x, t.y):
                raise SceneError(f"target {t} lies on a blocked cell")

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and not self.obstacle_mask[y, x]

    def valid_pose(self, pose: Pose) -> bool:
        return self.is_free(pose.x, pose.y)

    @cached_property
    def free_cells(self) -> tuple[tuple[int, int], ...]:
        """Free cells in row-major order; the basis of pose indexing."""
        ys, xs = np.nonzero(~self.obstacle_mask)
        return tuple((int(x), int(y)) for y, x in zip(ys, xs))

    @cached_property
    def free_poses(self) -> tuple[Pose, ...]:
        return tuple(Pose(x, y, h) for x, y in self.free_cells for h in Heading)

    @cached_property
    def table(self) -> "PoseTable":
        return PoseTable.build(self)

    def to_bytes(self) -> bytes:
        return dump_scene_bytes(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self) -> int:
        return hash(self.to_bytes())


# ---------------------------------------------------------------------------
# dynamics


def turn_left(h: Heading) -> Heading:
    return Heading((h + 3) % 4)


def turn_right(h: Heading) -> Heading:
    return Heading((h + 1) % 4)


def apply_action(scene: Scene, pose: Pose, action: Action) -> tuple[Pose, bool]:
    """Noiseless dynamics. Returns (next_pose, collided)."""
    action = Action(action)
    if action is Action.TURN_LEFT:
        return Pose(pose.x, pose.y, turn_left(pose.heading)), False
    if action is Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, turn_right(pose.heading)), False
    dx, dy = _FORWARD[pose.heading]
    if action is Action.MOVE_BACKWARD:
        dx, dy = -dx, -dy
    nx, ny = pose.x + dx, pose.y + dy
    if not scene.is_free(nx, ny):
        return pose, True
    return Pose(nx, ny, pose.heading), False


def step(
    scene: Scene,
    pose: Pose,
    action: Action,
    goal: Pose,
    slip_prob: float = 0.0,
    rng: np.random.Generator | None = None,
) -> StepOutcome:
    if not scene.valid_pose(pose):
        raise SceneError(f"invalid pose {pose}")
    if not 0.0 <= slip_prob <= 0.5:
        raise ValueError(f"slip_prob must be in [0, 0.5], got {slip_prob}")
    action = Action(action)
    if slip_prob > 0.0:
        if rng is None:
            raise ValueError("slip_prob > 0 requires an rng")
        if rng.random() < slip_prob:
            action = Action((action + rng.integers(1, N_ACTIONS)) % N_ACTIONS)
    nxt, collided = apply_action(scene, pose, action)
    done = nxt == goal
    return StepOutcome(nxt, GOAL_REWARD if done else STEP_PENALTY, done, collided)


# ---------------------------------------------------------------------------
# perception


def _base_vector(feature_seed: int, x: int, y: int, heading: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([feature_seed, x, y, heading])
    return rng.standard_normal(dim)


def observe(scene: Scene, pose: Pose) -> np.ndarray:
    """Unit-norm synthetic percept for a pose (float64)."""
    if not scene.valid_pose(pose):
        raise SceneError(f"invalid pose {pose}")
    d = scene.percept_dim
    h = int(pose.heading)
    v = _base_vector(scene.feature_seed, pose.x, pose.y, h, d)
    if scene.smoothing:
        for dx, dy in _FORWARD:
            nx, ny = pose.x + dx, pose.y + dy
            if scene.in_bounds(nx, ny):
                v = v + scene.smoothing * _base_vector(scene.feature_seed, nx, ny, h, d)
    return v / np.linalg.norm(v)


def _all_percepts(scene: Scene) -> np.ndarray:
    d = scene.percept_dim
    base = np.empty((scene.height, scene.width, 4, d))
    for y in range(scene.height):
        for x in range(scene.width):
            for h in range(4):
                base[y, x, h] = _base_vector(scene.feature_seed, x, y, h, d)
    lam = scene.smoothing
    acc = base.copy()
    if lam:
        # same neighbour order as observe(): N, E, S, W
        acc[:-1] += lam * base[1:]
        acc[:, :-1] += lam * base[:, 1:]
        acc[1:] += lam * base[:-1]
        acc[:, 1:] += lam * base[:, :-1]
    acc /= np.linalg.norm(acc, axis=-1, keepdims=True)
    return acc


# ---------------------------------------------------------------------------
# tabular form


@dataclass(frozen=True, eq=False)
class PoseTable:
    """Dense transition and percept tables over a scene's free poses.

    Pose ids are ``cell_index * 4 + heading`` with cells in row-major order.
    """

    n_poses: int
    cell_xy: np.ndarray  # (n_poses, 2) int
    next_pose: np.ndarray  # (n_poses, 4) int, noiseless successor per action
    collided: np.ndarray  # (n_poses, 4) bool
    frames: np.ndarray  # (n_poses, d) float32
    index: dict

    @classmethod
    def build(cls, scene: Scene) -> "PoseTable":
        poses = scene.free_poses
        index = {p: i for i, p in enumerate(poses)}
        nxt = np.empty((len(poses), N_ACTIONS), dtype=np.int64)
        col = np.empty((len(poses), N_ACTIONS), dtype=bool)
        for i, p in enumerate(poses):
            for a in Action:
                q, c = apply_action(scene, p, a)
                nxt[i, a] = index[q]
                col[i, a] = c
        percepts = _all_percepts(scene)
        frames = np.array([percepts[p.y, p.x, p.heading] for p in poses], dtype=np.float32)
        cell_xy = np.array([(p.x, p.y) for p in poses], dtype=np.int64).reshape(-1, 2)
        for arr in (nxt, col, frames, cell_xy):
            arr.flags.writeable = False
        return cls(len(poses), cell_xy, nxt, col, frames, index)

    def pose_id(self, pose: Pose) -> int:
        try:
            return self.index[Pose.of(*pose)]
        except KeyError:
            raise SceneError(f"pose {pose} is not a free pose of the scene") from None

    def pose_at(self, pid: int) -> Pose:
        x, y = self.cell_xy[pid]
        return Pose(int(x), int(y), Heading(pid % 4))

    def distances_to(self, goal_id: int) -> np.ndarray:
        """BFS action-distance from every pose to ``goal_id``; -1 if unreachable."""
        # reverse adjacency, built lazily once per table
        rev = self._reverse
        dist = np.full(self.n_poses, -1, dtype=np.int64)
        dist[goal_id] = 0
        queue = deque([goal_id])
        while queue:
            u = queue.popleft()
            for v in rev[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def distances_from(self, start_id: int) -> np.ndarray:
        dist = np.full(self.n_poses, -1, dtype=np.int64)
        dist[start_id] = 0
        queue = deque([start_id])
        nxt = self.next_pose
        while queue:
            u = queue.popleft()
            for v in nxt[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(int(v))
        return dist

    @cached_property
    def _reverse(self) -> list[list[int]]:
        rev: list[list[int]] = [[] for _ in range(self.n_poses)]
        for u in range(self.n_poses):
            for v in set(self.next_pose[u].tolist()):
                if v != u:
                    rev[v].append(u)
        return rev

    def optimal_action(self, pid: int, dist_to_goal: np.ndarray) -> int:
        """First action (lowest index) that decreases the distance to the goal."""
        d = dist_to_goal[pid]
        for a in range(N_ACTIONS):
            if dist_to_goal[self.next_pose[pid, a]] == d - 1:
                return a
        raise SceneError("no improving action; goal unreachable or already reached")


def shortest_path_length(scene: Scene, start: Pose, goal: Pose) -> int | None:
    """Minimum number of noiseless actions from ``start`` to ``goal``."""
    for p in (start, goal):
        if not scene.valid_pose(Pose.of(*p)):
            raise SceneError(f"invalid pose {p}")
    table = scene.table
    d = table.distances_from(table.pose_id(start))[table.pose_id(goal)]
    return None if d < 0 else int(d)


def sample_start(scene: Scene, goal: Pose, rng: np.random.Generator) -> Pose:
    table = scene.table
    if table.n_poses < 2:
        raise SceneError("scene has no free pose other than the goal")
    gid = table.pose_id(goal)
    i = int(rng.integers(table.n_poses - 1))
    return table.pose_at(i + 1 if i >= gid else i)


# ---------------------------------------------------------------------------
# generation


def _components(free: np.ndarray) -> np.ndarray:
    """Label 4-connected components of free cells; 0 marks blocked cells."""
    labels = np.zeros(free.shape, dtype=np.int64)
    h, w = free.shape
    n = 0
    for y0 in range(h):
        for x0 in range(w):
            if not free[y0, x0] or labels[y0, x0]:
                continue
            n += 1
            labels[y0, x0] = n
            queue = deque([(x0, y0)])
            while queue:
                x, y = queue.popleft()
                for dx, dy in _FORWARD:
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = n
                        queue.append((nx, ny))
    return labels


def _connect_once(free: np.ndarray, labels: np.ndarray) -> None:
    """Unblock the cells on a shortest blocked corridor from the largest
    component to the nearest other component."""
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    main = int(np.argmax(counts))
    h, w = free.shape
    prev: dict[tuple[int, int], tuple[int, int] | None] = {}
    queue: deque[tuple[int, int]] = deque()
    for y, x in zip(*np.nonzero(labels == main)):
        prev[(int(x), int(y))] = None
        queue.append((int(x), int(y)))
    while queue:
        x, y = queue.popleft()
        for dx, dy in _FORWARD:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h) or (nx, ny) in prev:
                continue
            prev[(nx, ny)] = (x, y)
            if labels[ny, nx] not in (0, main):
                cur = (x, y)
                while cur is not None and labels[cur[1], cur[0]] != main:
                    free[cur[1], cur[0]] = True
                    cur = prev[cur]
                return
            queue.append((nx, ny))


def generate_scene(
    seed: int,
    width: int,
    height: int,
    obstacle_density: float,
    n_targets: int,
    percept_dim: int,
    smoothing: float,
    scene_id: str | None = None,
) -> Scene:
    if width < 3 or height < 3:
        raise SceneError("width and height must be >= 3")
    if not 0.0 <= obstacle_density <= 0.4:
        raise SceneError(f"obstacle_density must be in [0, 0.4], got {obstacle_density}")
    if n_targets < 1:
        raise SceneError("n_targets must be >= 1")
    if percept_dim < 1:
        raise SceneError("percept_dim must be positive")
    if not 0.0 <= smoothing <= 1.0:
        raise SceneError(f"smoothing must be in [0, 1], got {smoothing}")

    rng = np.random.default_rng(seed)
    free = rng.random((height, width)) >= obstacle_density
    if not free.any():
        free[height // 2, width // 2] = True
    for _ in range(width * height):
        labels = _components(free)
        if labels.max() <= 1:
            break
        _connect_once(free, labels)
    else:
        raise SceneError("connectivity repair did not converge")
    if _components(free).max() > 1:
        raise SceneError("connectivity repair did not converge")

    n_free_poses = int(free.sum()) * 4
    if n_targets > n_free_poses:
        raise SceneError(f"n_targets={n_targets} exceeds {n_free_poses} free poses")
    feature_seed = int(rng.integers(0, 2**63 - 1))
    ys, xs = np.nonzero(free)
    picks = rng.choice(n_free_poses, size=n_targets, replace=False)
    targets = tuple(Pose(int(xs[i // 4]), int(ys[i // 4]), Heading(int(i % 4))) for i in picks)
    return Scene(
        scene_id=scene_id or f"scene-{seed}",
        width=width,
        height=height,
        obstacle_mask=~free,
        smoothing=float(smoothing),
        percept_dim=int(percept_dim),
        feature_seed=feature_seed,
        targets=targets,
        seed=int(seed),
        obstacle_density=float(obstacle_density),
    )


def make_scene(rows: list[str], percept_dim: int = 16, smoothing: float = 0.5,
               feature_seed: int = 0, targets=(), scene_id: str = "custom") -> Scene:
    """Build a scene from an ASCII map; '#' is blocked. ``rows[0]`` is the top
    row (largest y)."""
    height = len(rows)
    width = len(rows[0])
    mask = np.array([[c == "#" for c in row] for row in reversed(rows)], dtype=bool)
    return Scene(scene_id, width, height, mask, smoothing, percept_dim, feature_seed,
                 tuple(targets))


# ---------------------------------------------------------------------------
# persistence


def dump_scene_bytes(scene: Scene) -> bytes:
    header = {
        "version": SCENE_VERSION,
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "feature_seed": scene.feature_seed,
        "obstacle_density": scene.obstacle_density,
        "smoothing": scene.smoothing,
        "percept_dim": scene.percept_dim,
        "targets": [[t.x, t.y, t.heading.name] for t in scene.targets],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    bitmap = np.packbits(scene.obstacle_mask.ravel()).tobytes()
    return SCENE_MAGIC + struct.pack("<I", len(blob)) + blob + bitmap


def load_scene_bytes(data: bytes) -> Scene:
    if not data.startswith(SCENE_MAGIC):
        raise SceneError("not a scene file (bad magic)")
    off = len(SCENE_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + n])
    if header.get("version") != SCENE_VERSION:
        raise SceneError(f"unsupported scene version {header.get('version')}")
    w, h = header["width"], header["height"]
    bits = np.frombuffer(data[off + n :], dtype=np.uint8)
    mask = np.unpackbits(bits)[: w * h].astype(bool).reshape(h, w)
    if len(bits) != (w * h + 7) // 8:
        raise SceneError("obstacle bitmap has the wrong length")
    return Scene(
        scene_id=header["scene_id"],
        width=w,
        height=h,
        obstacle_mask=mask,
        smoothing=header["smoothing"],
        percept_dim=header["percept_dim"],
        feature_seed=header["feature_seed"],
        targets=tuple(Pose.of(*t) for t in header["targets"]),
        seed=header["seed"],
        obstacle_density=header["obstacle_density"],
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_bytes(dump_scene_bytes(scene))


def load_scene(path: str | Path) -> Scene:
    return load_scene_bytes(Path(path).read_bytes())


def load_scene_dir(directory: str | Path) -> list[Scene]:
    paths = sorted(Path(directory).glob("*.navscn"))
    if not paths:
        raise SceneError(f"no .navscn files in {directory}")
    return [load_scene(p) for p in paths]
