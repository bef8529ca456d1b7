"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Supports exactly the operations the denoiser and the losses need: add, sub,
mul_scalar, matmul, conv2d (stride 1, zero-padded same), relu, silu, mean,
sum, mse and broadcast_add_channelwise. Tensors are float32 and immutable
after creation; reductions accumulate in float64. Recording happens on an
explicitly opened Tape, so anything evaluated outside a ``with Tape()``
block is a constant (this is how stop-gradient is realized).

Image batches use channels-last layout (N, H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OP_KINDS = (
    "add",
    "sub",
    "mul_scalar",
    "matmul",
    "conv2d",
    "relu",
    "silu",
    "mean",
    "sum",
    "mse",
    "broadcast_add_channelwise",
)


class Tensor:
    """Immutable float32 array with an optional gradient requirement.

    NaN/Inf anywhere in the payload is an explicit error state: construction
    validates finiteness, so a silent NaN can never propagate through the
    tape.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor holds non-finite values (NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Constant copy of this tensor; no gradient will ever flow to it."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar over the fixed op set
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, scalar):
        return mul_scalar(self, scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    parents: tuple
    out: "Tensor"
    backward: Callable


@dataclass
class Tape:
    """Ordered single-writer record of executed operations.

    Nodes are appended in execution order, so every node's parents precede
    it and the reverse sweep is a valid topological order. A tape is
    consumed by :func:`backward` and cannot be reused.
    """

    nodes: list = field(default_factory=list)
    _produced: set = field(default_factory=set)
    _leaves: list = field(default_factory=list)
    _leaf_ids: set = field(default_factory=set)
    closed: bool = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def records(self, t: Tensor) -> bool:
        """True if `t` was produced by an operation recorded on this tape."""
        return id(t) in self._produced

    def _record(self, node: _Node):
        if self.closed:
            raise RuntimeError("tape already consumed by backward()")
        for p in node.parents:
            if p.requires_grad and not self.records(p) and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self._leaves.append(p)
        self.nodes.append(node)
        self._produced.add(id(node.out))


_ACTIVE_TAPE: Tape | None = None


class no_tape:
    """Context manager suspending tape recording; everything evaluated
    inside is a constant. This is the stop-gradient mechanism."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved
        return False


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _maybe_record(op: str, parents: tuple, out: Tensor, backward_fn: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(_Node(op, parents, out, backward_fn))
    return out


def _shapes(*tensors: Tensor) -> str:
    return ", ".join(str(t.shape) for t in tensors)


def _f32_scalar(value: float, op: str) -> np.float32:
    """Cast a float64 reduction result to float32, refusing overflow."""
    if not np.isfinite(value) or abs(value) > np.finfo(np.float32).max:
        raise ValueError(f"{op}: non-finite result {value!r}")
    return np.float32(value)


# ---------------------------------------------------------------------------
# operations


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {_shapes(a, b)}")
    out = Tensor(a.data + b.data)
    return _maybe_record("add", (a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {_shapes(a, b)}")
    out = Tensor(a.data - b.data)
    return _maybe_record("sub", (a, b), out, lambda g: (g, -g))


def mul_scalar(a: Tensor, scalar: float) -> Tensor:
    s = float(scalar)
    out = Tensor(a.data * np.float32(s))
    return _maybe_record("mul_scalar", (a,), out, lambda g: (g * np.float32(s),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {_shapes(a, b)}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _maybe_record(
        "matmul", (a, b), out,
        lambda g: (g @ bd.T if a.requires_grad else None,
                   ad.T @ g if b.requires_grad else None),
    )


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-pad for same output size and unfold k x k windows.

    Returns (N*H*W, k*k*C) with the channel axis innermost, matching a
    kernel flattened from (k, k, C, O).
    """
    n, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N,H,W,C,k,k)
    windows = windows.transpose(0, 1, 2, 4, 5, 3)  # channel innermost
    return np.ascontiguousarray(windows).reshape(n * h * w, -1)


def _conv_forward(x: np.ndarray, w: np.ndarray):
    n, h, wid, _ = x.shape
    k, _, _, o = w.shape
    col = _im2col(x, k)
    out = col @ w.reshape(-1, o)
    return out.reshape(n, h, wid, o), col


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """2D cross-correlation, stride 1, zero-padded to the input size.

    x: (N, H, W, C_in), w: (k, k, C_in, C_out) with odd k.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4D input and kernel, got {_shapes(x, w)}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 != 1:
        raise ValueError(f"conv2d: kernel must be odd and square, got {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: channel mismatch {_shapes(x, w)}")
    out_data, col = _conv_forward(x.data, w.data)
    out = Tensor(out_data)
    wd = w.data

    def backward_fn(g):
        grad_w = None
        if w.requires_grad:
            o = wd.shape[3]
            grad_w = (col.T @ g.reshape(-1, o)).reshape(wd.shape)
        grad_x = None
        if x.requires_grad:
            # input gradient is a same-pad conv of g with the spatially
            # flipped kernel, in/out channels swapped
            w_flip = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2))
            grad_x, _ = _conv_forward(g, w_flip)
        return grad_x, grad_w

    return _maybe_record("conv2d", (x, w), out, backward_fn)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _maybe_record("relu", (a,), out, lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    # clamp keeps exp inside float32 range; sigmoid saturates exactly beyond
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -80.0, 80.0)))
    out = Tensor(x * sig)
    return _maybe_record(
        "silu", (a,), out, lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),)
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(_f32_scalar(a.data.sum(dtype=np.float64) / n, "mean"))
    return _maybe_record(
        "mean", (a,), out,
        lambda g: (np.full(a.shape, g / np.float32(n), dtype=np.float32),),
    )


def sum(a: Tensor) -> Tensor:  # noqa: A001 - op name fixed by the engine contract
    out = Tensor(_f32_scalar(a.data.sum(dtype=np.float64), "sum"))
    return _maybe_record(
        "sum", (a,), out,
        lambda g: (np.full(a.shape, g, dtype=np.float32),),
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {_shapes(a, b)}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    out = Tensor(_f32_scalar((diff * diff).sum() / n, "mse"))
    diff32 = diff.astype(np.float32)

    def backward_fn(g):
        scale = np.float32(2.0 / n) * g
        grad = scale * diff32
        return (grad if a.requires_grad else None,
                -grad if b.requires_grad else None)

    return _maybe_record("mse", (a, b), out, backward_fn)


def broadcast_add_channelwise(x: Tensor, c: Tensor) -> Tensor:
    """Add a per-channel vector to every spatial position of x.

    x: (N, H, W, C); c: (C,) shared across the batch or (N, C) per sample.
    """
    if x.data.ndim != 4:
        raise ValueError(f"broadcast_add_channelwise: x must be 4D, got {x.shape}")
    if c.data.ndim == 1:
        if c.shape[0] != x.shape[3]:
            raise ValueError(
                f"broadcast_add_channelwise: shape mismatch {_shapes(x, c)}"
            )
        out = Tensor(x.data + c.data[None, None, None, :])
        return _maybe_record(
            "broadcast_add_channelwise", (x, c), out,
            lambda g: (g, g.sum(axis=(0, 1, 2), dtype=np.float64).astype(np.float32)),
        )
    if c.data.ndim == 2:
        if c.shape[0] != x.shape[0] or c.shape[1] != x.shape[3]:
            raise ValueError(
                f"broadcast_add_channelwise: shape mismatch {_shapes(x, c)}"
            )
        out = Tensor(x.data + c.data[:, None, None, :])
        return _maybe_record(
            "broadcast_add_channelwise", (x, c), out,
            lambda g: (g, g.sum(axis=(1, 2), dtype=np.float64).astype(np.float32)),
        )
    raise ValueError(f"broadcast_add_channelwise: c must be (C,) or (N,C), got {c.shape}")


_OPS: Mapping[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul_scalar": mul_scalar,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "silu": silu,
    "mean": mean,
    "sum": sum,
    "mse": mse,
    "broadcast_add_channelwise": broadcast_add_channelwise,
}


def forward_op(op_kind: str, *inputs) -> Tensor:
    """Dispatch one operation from the fixed set by name."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}; supported: {OP_KINDS}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep of the tape from a scalar loss.

    Returns a map from each requires_grad leaf that participated in a
    recorded operation to its float32 gradient array. Leaves on the tape
    that do not influence the loss get an exactly-zero gradient. The tape is
    consumed and cannot be reused.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.closed:
        raise RuntimeError("tape already consumed by backward()")
    if not tape.records(loss) and loss.requires_grad:
        raise ValueError("backward: loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.float32(1.0)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        parent_grads = node.backward(g_out)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + g
            else:
                grads[pid] = g

    result = {}
    for leaf in tape._leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=np.float32)
        result[leaf] = np.asarray(g, dtype=np.float32)

    tape.closed = True
    tape.nodes.clear()
    return result


# ---------------------------------------------------------------------------
# Adam optimizer


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
        )


def sgd_adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[dict, AdamState]:
    """One Adam update. Returns fresh parameter tensors and advanced state.

    Deterministic given inputs; missing gradients count as zero.
    """
    t = state.step + 1
    b1, b2 = np.float32(hyper.beta1), np.float32(hyper.beta2)
    corr1 = 1.0 - hyper.beta1**t
    corr2 = 1.0 - hyper.beta2**t
    new_params: dict[str, Tensor] = {}
    new_m, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=np.float32)
        else:
            g = np.asarray(g, dtype=np.float32)
            if not np.all(np.isfinite(g)):
                raise ValueError(f"sgd_adam_step: non-finite gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(
                f"sgd_adam_step: gradient shape {g.shape} != param shape {p.shape} for {name!r}"
            )
        m = b1 * state.m[name] + (np.float32(1.0) - b1) * g
        v = b2 * state.v[name] + (np.float32(1.0) - b2) * (g * g)
        m_hat = m / np.float32(corr1)
        v_hat = v / np.float32(corr2)
        step_arr = np.float32(hyper.lr) * m_hat / (np.sqrt(v_hat) + np.float32(hyper.eps))
        new_params[name] = Tensor(p.data - step_arr, requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)
