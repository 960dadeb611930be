"""Dense-layer math for every learned model: parameter blocks, affine+ReLU
forward/backward, softmax, the actor-critic loss, n-step returns and a shared
RMSProp optimizer.

Parameters are float32. Every function is dtype-generic so the gradient
checks can run the same code in float64.

Shapes: a weight matrix is ``(out, in)``. A *stacked* weight has a leading
worker axis ``(B, out, in)`` and then inputs must be ``(B, T, in)``; this is
how one batched pass serves many workers that each hold their own branch.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from navlab.errors import NumericError

DTYPE = np.float32


@dataclass
class ParamBlock:
    name: str
    weights: np.ndarray
    bias: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape[-2:]


@dataclass
class GradBlock:
    name: str
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, block: ParamBlock) -> "GradBlock":
        return cls(block.name, np.zeros_like(block.weights), np.zeros_like(block.bias))

    def zero(self) -> None:
        self.weights[...] = 0
        self.bias[...] = 0


Layout = tuple[tuple[str, int, int], ...]


def layout_size(layout: Layout) -> int:
    return sum(o * i + o for _, o, i in layout)


def layout_views(flat: np.ndarray, layout: Layout) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Split ``flat`` of shape ``(..., size)`` into ``{name: (W, b)}`` views."""
    lead = flat.shape[:-1]
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    off = 0
    for name, o, i in layout:
        w = flat[..., off : off + o * i].reshape(*lead, o, i)
        off += o * i
        b = flat[..., off : off + o]
        off += o
        out[name] = (w, b)
    return out


class ParamGroup:
    """Named blocks packed into one contiguous buffer.

    The optimizer and checkpoints work on ``flat``; layers see ``blocks``,
    whose arrays are views into it.
    """

    def __init__(self, name: str, layout: Layout, flat: np.ndarray | None = None,
                 dtype=DTYPE):
        self.name = name
        self.layout = tuple((n, int(o), int(i)) for n, o, i in layout)
        size = layout_size(self.layout)
        if flat is None:
            flat = np.zeros(size, dtype=dtype)
        if flat.shape != (size,):
            raise ValueError(f"{name}: flat buffer has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self.blocks = {n: ParamBlock(n, w, b) for n, (w, b) in layout_views(flat, self.layout).items()}

    @property
    def size(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> ParamBlock:
        return self.blocks[name]

    def init_uniform(self, rng: np.random.Generator, zero_blocks: Iterable[str] = ()) -> None:
        """Weights uniform in +-1/sqrt(fan_in); biases and ``zero_blocks`` zero."""
        zero = set(zero_blocks)
        for blk in self.blocks.values():
            blk.bias[...] = 0
            if blk.name in zero:
                blk.weights[...] = 0
            else:
                bound = 1.0 / np.sqrt(blk.weights.shape[-1])
                blk.weights[...] = rng.uniform(-bound, bound, blk.weights.shape)

    def copy(self, name: str | None = None, dtype=None) -> "ParamGroup":
        flat = self.flat.astype(dtype or self.flat.dtype, copy=True)
        return ParamGroup(name or self.name, self.layout, flat)

    def grad_blocks(self, flat: np.ndarray) -> dict[str, GradBlock]:
        return {n: GradBlock(n, w, b) for n, (w, b) in layout_views(flat, self.layout).items()}


# ---------------------------------------------------------------------------
# layers


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if w.ndim == 2:
        # one GEMM over all leading axes
        return (x.reshape(-1, w.shape[1]) @ w.T).reshape(*x.shape[:-1], w.shape[0]) + b
    return np.matmul(x, w.transpose(0, 2, 1)) + b[:, None, :]


def linear_backward(
    x: np.ndarray, w: np.ndarray, dz: np.ndarray, per_worker: bool = False,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Returns (dx, dW, db). With stacked weights or ``per_worker`` the
    parameter gradients keep the worker axis; otherwise they are summed."""
    o, i = w.shape[-2:]
    if w.ndim == 3 or per_worker:
        dw = np.matmul(dz.transpose(0, 2, 1), x)
        db = dz.sum(axis=1)
    else:
        dz2 = dz.reshape(-1, o)
        dw = dz2.T @ x.reshape(-1, i)
        db = dz2.sum(axis=0)
    if not need_dx:
        dx = None
    elif w.ndim == 2:
        dx = (dz.reshape(-1, o) @ w).reshape(*dz.shape[:-1], i)
    else:
        dx = np.matmul(dz, w)
    return dx, dw, db


def affine_relu_forward(
    block: ParamBlock, x: np.ndarray, final_layer: bool = False
) -> tuple[np.ndarray, tuple]:
    if x.shape[-1] != block.weights.shape[-1]:
        raise ValueError(
            f"{block.name}: input has {x.shape[-1]} features, block expects {block.weights.shape[-1]}"
        )
    z = linear_forward(x, block.weights, block.bias)
    out = z if final_layer else np.maximum(z, 0)
    return out, (x, z, final_layer)


def affine_relu_backward(
    block: ParamBlock, cache: tuple, dout: np.ndarray, per_worker: bool = False,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, GradBlock]:
    x, z, final_layer = cache
    dz = dout if final_layer else dout * (z > 0)
    dx, dw, db = linear_backward(x, block.weights, dz, per_worker, need_dx)
    return dx, GradBlock(block.name, dw, db)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# losses


@dataclass
class HeadGrads:
    """Loss gradient at the two head outputs: policy logits and value."""

    logits: np.ndarray
    value: np.ndarray


def a3c_loss_and_grads(
    policy_probs: np.ndarray,
    values: np.ndarray,
    actions: np.ndarray,
    returns: np.ndarray,
    beta: float,
    mask: np.ndarray | None = None,
) -> tuple[float, HeadGrads]:
    """Summed actor-critic loss over a rollout.

    Per step: ``-log pi(a) * (R - V) - beta * H(pi) + (R - V)**2``, with the
    advantage held constant in the policy term. Gradients are returned with
    respect to the policy *logits* (softmax folded in) and the values.
    Arrays may carry any leading shape ``(..., 4)`` / ``(...)``; ``mask``
    zeroes padded steps.
    """
    probs = np.asarray(policy_probs)
    values = np.asarray(values)
    actions = np.asarray(actions, dtype=np.int64)
    returns = np.asarray(returns, dtype=values.dtype)
    if not (probs.shape[:-1] == values.shape == actions.shape == returns.shape):
        raise ValueError("rollout arrays must be aligned")
    m = np.ones(values.shape, dtype=values.dtype) if mask is None else mask.astype(values.dtype)

    chosen = np.take_along_axis(probs, actions[..., None], axis=-1)[..., 0]
    if np.any((chosen <= 0) & (m > 0)):
        raise NumericError("chosen action has zero probability (softmax underflow)")
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(probs)
        plogp = np.where(probs > 0, probs * logp, 0)
    entropy = -plogp.sum(axis=-1)
    log_chosen = np.log(np.where(m > 0, chosen, 1))

    adv = returns - values
    loss = float(np.sum(m * (-log_chosen * adv - beta * entropy + adv * adv)))

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, actions[..., None], 1, axis=-1)
    # d(-log p_a)/dz = p - onehot ; d(-H)/dz = p * (log p + H)
    safe_logp = np.where(probs > 0, logp, 0)
    dlogits = adv[..., None] * (probs - onehot) + beta * probs * (safe_logp + entropy[..., None])
    dlogits *= m[..., None]
    dvalue = -2.0 * adv * m
    return loss, HeadGrads(dlogits.astype(probs.dtype), dvalue.astype(values.dtype))


def n_step_returns(
    rewards: Sequence[float], bootstrap_value: float, terminal: bool, gamma: float
) -> np.ndarray:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    r = 0.0 if terminal else float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        r = rewards[t] + gamma * r
        out[t] = r
    return out


def masked_n_step_returns(
    rewards: np.ndarray, bootstrap: np.ndarray, terminal: np.ndarray,
    lengths: np.ndarray, gamma: float,
) -> np.ndarray:
    """Batched ``n_step_returns`` over padded ``(B, T)`` segments.

    Row ``b`` uses its first ``lengths[b]`` rewards; padding yields zeros.
    """
    B, T = rewards.shape
    out = np.zeros((B, T), dtype=np.float64)
    r = np.where(terminal, 0.0, bootstrap).astype(np.float64)
    for t in range(T - 1, -1, -1):
        live = t < lengths
        r = np.where(live, rewards[:, t] + gamma * r, r)
        out[:, t] = np.where(live, r, 0.0)
    return out


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.dot(a.ravel(), a.ravel())) for a in arrays)))


def clip_by_global_norm(arrays: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``arrays`` in place so their joint norm is at most ``max_norm``
    (0 disables). Returns the pre-clip norm."""
    norm = global_norm(arrays)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for a in arrays:
            a *= scale
    return norm


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class RmsPropState:
    """Shared RMSProp statistics.

    ``mode="serialized"`` wraps each update in one global lock;
    ``mode="hogwild"`` locks only the buffer being written, so updates to
    different parameter groups interleave.
    """

    learning_rate: float = 7e-4
    decay: float = 0.99
    epsilon: float = 0.1
    mode: str = "serialized"
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    rejected: int = 0
    applied: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("serialized", "hogwild"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        self._global = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._registry = threading.Lock()

    def slot(self, name: str, like: np.ndarray) -> np.ndarray:
        v = self.accumulators.get(name)
        if v is None:
            with self._registry:
                v = self.accumulators.setdefault(name, np.zeros_like(like))
        if v.shape != like.shape:
            raise ValueError(f"accumulator {name} has shape {v.shape}, got {like.shape}")
        return v

    def _lock_for(self, name: str) -> threading.Lock:
        if self.mode == "serialized":
            return self._global
        lock = self._locks.get(name)
        if lock is None:
            with self._registry:
                lock = self._locks.setdefault(name, threading.Lock())
        return lock

    def update(self, name: str, theta: np.ndarray, grad: np.ndarray) -> bool:
        """In-place update of ``theta`` (any shape). Rejects non-finite grads.

        Finiteness is tested on the squared norm, so gradients whose squares
        overflow float32 are rejected too.
        """
        if not np.isfinite(np.dot(grad.ravel(), grad.ravel())):
            self.rejected += 1
            return False
        v = self.slot(name, theta)
        a = theta.dtype.type(self.decay)
        with self._lock_for(name):
            tmp = np.multiply(grad, grad)
            tmp *= 1 - a
            v *= a
            v += tmp
            np.add(v, theta.dtype.type(self.epsilon), out=tmp)
            np.sqrt(tmp, out=tmp)
            np.divide(grad, tmp, out=tmp)
            tmp *= theta.dtype.type(self.learning_rate)
            theta -= tmp
            self.applied += 1
        return True


def rmsprop_apply(state: RmsPropState, params: ParamBlock, grads: GradBlock) -> None:
    """Apply one RMSProp step to a block and zero its gradient."""
    if params.weights.shape != grads.weights.shape or params.bias.shape != grads.bias.shape:
        raise ValueError(f"{params.name}: gradient shapes do not match parameters")
    ok = np.all(np.isfinite(grads.weights)) and np.all(np.isfinite(grads.bias))
    if not ok:
        state.rejected += 1
    else:
        state.update(params.name + "/W", params.weights, grads.weights)
        state.update(params.name + "/b", params.bias, grads.bias)
    grads.zero()


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / (||a|| + ||b||), the usual gradient-check ratio."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
