"""Siamese actor-critic: one shared embedding for the observation and goal
streams, a fusion layer, then a per-scene branch with policy and value heads.
"""
from __future__ import annotations

import threading
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from navlab.errors import BranchError
from navlab.gridworld import N_ACTIONS, Pose, Scene, observe
from navlab.numerics import (
    DTYPE,
    HeadGrads,
    Layout,
    ParamBlock,
    ParamGroup,
    affine_relu_backward,
    affine_relu_forward,
    layout_size,
    layout_views,
    softmax,
)

HISTORY = 4
SHARED_BRANCH = "__shared__"


@dataclass(frozen=True)
class ModelArch:
    percept_dim: int = 64
    embed_dim: int = 32
    fuse_dim: int = 32
    history: int = HISTORY
    goal_stream: bool = True
    goal_first: bool = False  # concat order ablation; default is (state, goal)

    @property
    def input_dim(self) -> int:
        return self.history * self.percept_dim

    def core_layout(self) -> Layout:
        streams = 2 if self.goal_stream else 1
        return (
            ("embed", self.embed_dim, self.input_dim),
            ("fusion", self.fuse_dim, streams * self.embed_dim),
        )

    def branch_layout(self) -> Layout:
        return (
            ("fc1", self.fuse_dim, self.fuse_dim),
            ("policy_head", N_ACTIONS, self.fuse_dim),
            ("value_head", 1, self.fuse_dim),
        )

    def to_dict(self) -> dict:
        return asdict(self)


HEAD_BLOCKS = ("policy_head", "value_head")


# ---------------------------------------------------------------------------
# observation stacks


@dataclass(frozen=True, eq=False)
class ObservationStack:
    frames: np.ndarray  # (history, d), most recent last

    def __post_init__(self) -> None:
        f = np.asarray(self.frames)
        if f.ndim != 2 or f.shape[0] != HISTORY:
            raise ValueError(f"an observation stack holds {HISTORY} frames, got shape {f.shape}")
        object.__setattr__(self, "frames", f)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def flat(self) -> np.ndarray:
        return self.frames.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObservationStack):
            return NotImplemented
        return np.array_equal(self.frames, other.frames)


def reset_history(first_frame: np.ndarray) -> ObservationStack:
    f = np.asarray(first_frame)
    return ObservationStack(np.repeat(f[None, :], HISTORY, axis=0))


def push_frame(stack: ObservationStack, frame: np.ndarray) -> ObservationStack:
    frame = np.asarray(frame)
    if frame.shape != (stack.dim,):
        raise ValueError(f"frame has shape {frame.shape}, stack holds ({stack.dim},) frames")
    return ObservationStack(np.concatenate([stack.frames[1:], frame[None, :].astype(stack.frames.dtype)]))


def make_goal_stack(scene: Scene, goal: Pose) -> ObservationStack:
    """The goal view replicated across the history axis."""
    return reset_history(observe(scene, goal).astype(DTYPE))


# ---------------------------------------------------------------------------
# parameters


class SiameseCore(ParamGroup):
    """Embedding block shared by both streams, plus the fusion block."""

    def __init__(self, arch: ModelArch, flat: np.ndarray | None = None, name: str = "core"):
        super().__init__(name, arch.core_layout(), flat)
        self.arch = arch

    @property
    def embed(self) -> ParamBlock:
        return self.blocks["embed"]

    @property
    def fusion(self) -> ParamBlock:
        return self.blocks["fusion"]


class SceneBranch(ParamGroup):
    def __init__(self, arch: ModelArch, key: str, flat: np.ndarray | None = None):
        super().__init__(f"branch/{key}", arch.branch_layout(), flat)
        self.key = key
        self.arch = arch

    @property
    def fc1(self) -> ParamBlock:
        return self.blocks["fc1"]

    @property
    def policy_head(self) -> ParamBlock:
        return self.blocks["policy_head"]

    @property
    def value_head(self) -> ParamBlock:
        return self.blocks["value_head"]


def _key_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


class ModelParams:
    """Generic core plus a keyed collection of scene branches.

    With ``single_branch`` every key resolves to one shared branch.
    """

    def __init__(self, arch: ModelArch, seed: int = 0, single_branch: bool = False,
                 core: SiameseCore | None = None, branches: dict | None = None,
                 lock: threading.Lock | None = None):
        self.arch = arch
        self.seed = int(seed)
        self.single_branch = single_branch
        if core is None:
            core = SiameseCore(arch)
            core.init_uniform(_key_rng(self.seed, "core"))
        self.core = core
        self.branches: dict[str, SceneBranch] = {} if branches is None else branches
        self._lock = lock or threading.Lock()

    def resolve(self, scene_key: str) -> str:
        return SHARED_BRANCH if self.single_branch else scene_key

    def new_branch(self, key: str) -> SceneBranch:
        br = SceneBranch(self.arch, key)
        br.init_uniform(_key_rng(self.seed, "branch/" + key), zero_blocks=HEAD_BLOCKS)
        return br

    def branch_for(self, scene_key: str, create_if_missing: bool = False) -> SceneBranch:
        key = self.resolve(scene_key)
        br = self.branches.get(key)
        if br is not None:
            return br
        if not create_if_missing:
            raise BranchError(f"no branch for scene {scene_key!r}")
        with self._lock:
            br = self.branches.get(key)
            if br is None:
                br = self.new_branch(key)
                self.branches[key] = br
            return br

    def single_branch_view(self) -> "ModelParams":
        """Aliasing view: same core and branch store, every key -> one branch."""
        return ModelParams(self.arch, self.seed, True, self.core, self.branches, self._lock)

    def groups(self) -> list[ParamGroup]:
        return [self.core] + [self.branches[k] for k in sorted(self.branches)]

    def copy(self) -> "ModelParams":
        core = SiameseCore(self.arch, self.core.flat.copy())
        branches = {k: SceneBranch(self.arch, k, b.flat.copy()) for k, b in self.branches.items()}
        return ModelParams(self.arch, self.seed, self.single_branch, core, branches)


def branch_for(params: ModelParams, scene_key: str, create_if_missing: bool = False) -> SceneBranch:
    return params.branch_for(scene_key, create_if_missing)


def single_branch_mode(params: ModelParams) -> ModelParams:
    return params.single_branch_view()


# ---------------------------------------------------------------------------
# forward / backward on raw views


def _blocks(flat: np.ndarray, layout: Layout) -> dict[str, ParamBlock]:
    return {n: ParamBlock(n, w, b) for n, (w, b) in layout_views(flat, layout).items()}


@dataclass
class PolicyValue:
    probs: np.ndarray
    value: np.ndarray | float
    logits: np.ndarray


def forward_arrays(arch: ModelArch, core_flat: np.ndarray, branch_flat: np.ndarray,
                   state: np.ndarray, goal: np.ndarray | None):
    """Forward over flattened stacks ``(..., history*d)``.

    ``branch_flat`` may be ``(size,)`` or stacked ``(B, size)``; stacked
    branches need inputs shaped ``(B, T, history*d)``.
    """
    core = _blocks(core_flat, arch.core_layout())
    branch = _blocks(branch_flat, arch.branch_layout())
    hs, c_s = affine_relu_forward(core["embed"], state)
    if arch.goal_stream:
        # the goal may be given once per worker, (B, 1, in), and broadcast over time
        hg, c_g = affine_relu_forward(core["embed"], goal)
        hgb = np.broadcast_to(hg, hs.shape)
        joint = np.concatenate([hgb, hs] if arch.goal_first else [hs, hgb], axis=-1)
    else:
        c_g = None
        joint = hs
    f, c_f = affine_relu_forward(core["fusion"], joint)
    h, c_1 = affine_relu_forward(branch["fc1"], f)
    logits, c_p = affine_relu_forward(branch["policy_head"], h, final_layer=True)
    value, c_v = affine_relu_forward(branch["value_head"], h, final_layer=True)
    probs = softmax(logits)
    cache = dict(core=core, branch=branch, s=c_s, g=c_g, f=c_f, fc1=c_1, p=c_p, v=c_v,
                 hs=hs, hg=hg if arch.goal_stream else None, arch=arch)
    return PolicyValue(probs, value[..., 0], logits), cache


def backward_arrays(cache: dict, head_grads: HeadGrads, per_worker: bool = False
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. core and branch, as flat arrays in layout
    order. With ``per_worker`` (or stacked branches) they keep the worker axis."""
    arch: ModelArch = cache["arch"]
    core, branch = cache["core"], cache["branch"]
    dlogits = head_grads.logits
    dvalue = head_grads.value[..., None]

    dh_p, g_p = affine_relu_backward(branch["policy_head"], cache["p"], dlogits, per_worker)
    dh_v, g_v = affine_relu_backward(branch["value_head"], cache["v"], dvalue, per_worker)
    df, g_1 = affine_relu_backward(branch["fc1"], cache["fc1"], dh_p + dh_v, per_worker)
    djoint, g_f = affine_relu_backward(core["fusion"], cache["f"], df, per_worker)
    e = arch.embed_dim
    if arch.goal_stream:
        if arch.goal_first:
            dhg, dhs = djoint[..., :e], djoint[..., e:]
        else:
            dhs, dhg = djoint[..., :e], djoint[..., e:]
        g_shape = cache["g"][1].shape
        if g_shape != dhg.shape:
            axes = tuple(i for i, (a, b) in enumerate(zip(g_shape, dhg.shape)) if a != b)
            dhg = dhg.sum(axis=axes, keepdims=True)
        _, g_es = affine_relu_backward(core["embed"], cache["s"], dhs, per_worker, need_dx=False)
        _, g_eg = affine_relu_backward(core["embed"], cache["g"], dhg, per_worker, need_dx=False)
        embed_w = g_es.weights + g_eg.weights
        embed_b = g_es.bias + g_eg.bias
    else:
        _, g_es = affine_relu_backward(core["embed"], cache["s"], djoint, per_worker, need_dx=False)
        embed_w, embed_b = g_es.weights, g_es.bias

    lead_b = g_1.weights.shape[:-2]
    lead_c = g_f.weights.shape[:-2]
    core_grad = np.zeros(lead_c + (layout_size(arch.core_layout()),), dtype=dlogits.dtype)
    views = layout_views(core_grad, arch.core_layout())
    views["embed"][0][...] = embed_w
    views["embed"][1][...] = embed_b
    views["fusion"][0][...] = g_f.weights
    views["fusion"][1][...] = g_f.bias
    branch_grad = np.zeros(lead_b + (layout_size(arch.branch_layout()),), dtype=dlogits.dtype)
    views = layout_views(branch_grad, arch.branch_layout())
    for g in (g_1, g_p, g_v):
        views[g.name][0][...] = g.weights
        views[g.name][1][...] = g.bias
    return core_grad, branch_grad


# ---------------------------------------------------------------------------
# single-sample API


def _fingerprint(*arrays: np.ndarray) -> int:
    return zlib.crc32(b"".join(np.ascontiguousarray(a).tobytes() for a in arrays))


def _as_flat(x) -> np.ndarray:
    return x.flat() if isinstance(x, ObservationStack) else np.asarray(x).reshape(*np.shape(x)[:-2], -1)


def model_forward(core: SiameseCore, branch: SceneBranch, state, goal) -> tuple[PolicyValue, dict]:
    arch = core.arch
    s = _as_flat(state)
    g = _as_flat(goal) if goal is not None else None
    if s.shape[-1] != arch.input_dim or (arch.goal_stream and g.shape[-1] != arch.input_dim):
        raise ValueError(f"stack dimension does not match model input {arch.input_dim}")
    out, cache = forward_arrays(arch, core.flat, branch.flat, s, g)
    cache["fingerprint"] = _fingerprint(core.flat, branch.flat)
    cache["groups"] = (core, branch)
    return out, cache


def model_backward(cache: dict, head_grads: HeadGrads) -> tuple[dict, dict]:
    """Returns ``({name: GradBlock} for the core, {name: GradBlock} for the branch)``."""
    core, branch = cache["groups"]
    if _fingerprint(core.flat, branch.flat) != cache["fingerprint"]:
        raise ValueError("stale cache: parameters changed since the forward pass")
    if head_grads.logits.shape != cache["p"][1].shape:
        raise ValueError("head gradients do not match the cached forward pass")
    cg, bg = backward_arrays(cache, head_grads)
    return core.grad_blocks(cg), branch.grad_blocks(bg)


def embed_stack(core: SiameseCore, stacks: np.ndarray) -> np.ndarray:
    """Shared-stream embedding of flattened stacks ``(N, history*d)``."""
    out, _ = affine_relu_forward(core.embed, stacks)
    return out
