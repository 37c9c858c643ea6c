"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the siamese architecture needs are provided. Every op
accepts an optional leading batch axis: ``conv3d`` takes ``(C, D, H, W)`` or
``(N, C, D, H, W)``, ``dense`` takes ``(n,)`` or ``(N, n)``.

Training runs at float32; gradient checks build the same graph at float64 by
creating parameters and inputs with ``dtype=np.float64``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces or receives NaN/Inf."""


class Tensor:
    """An array with a gradient slot and a link to the op that produced it."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op", "requires_grad")

    def __init__(self, data, dtype=None, *, requires_grad=True, _parents=(), _backward=None,
                 op="leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in output of {op}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"


class _Storage:
    __slots__ = ("data", "grad", "group")

    def __init__(self, data: np.ndarray, group: str | None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.group = group


class Parameter(Tensor):
    """A trainable tensor.

    Parameters in the same ``shared_group`` are views onto one storage:
    values and gradients are physically shared, so tied siamese branches can
    never drift apart. Use :meth:`tie` to obtain another view.
    """

    __slots__ = ("_storage", "id")

    _next_id = itertools.count()

    def __init__(self, data, dtype=None, shared_group: str | None = None, *, _storage=None):
        if _storage is None:
            arr = np.array(data, dtype=dtype)
            if dtype is None and not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
            _storage = _Storage(arr, shared_group)
        self._storage = _storage
        self.id = next(Parameter._next_id)
        self._parents = ()
        self._backward = None
        self.op = "param"
        self.requires_grad = True

    # data and grad live in the shared storage
    @property
    def data(self) -> np.ndarray:  # type: ignore[override]
        return self._storage.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self._storage.data[...] = value

    @property
    def grad(self) -> np.ndarray | None:  # type: ignore[override]
        return self._storage.grad

    @grad.setter
    def grad(self, value) -> None:
        self._storage.grad = value

    @property
    def shared_group(self) -> str | None:
        return self._storage.group

    @property
    def storage_key(self) -> int:
        return id(self._storage)

    def _accumulate(self, g: np.ndarray) -> None:
        st = self._storage
        if st.grad is None:
            st.grad = np.array(g, dtype=st.data.dtype, copy=True)
        else:
            st.grad += g

    def tie(self) -> "Parameter":
        """Return a new handle sharing this parameter's storage."""
        if self._storage.group is None:
            self._storage.group = f"group{self.id}"
        return Parameter(None, _storage=self._storage)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, group={self.shared_group})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, backward, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, dtype=data.dtype, requires_grad=rg, _parents=parents if rg else (),
                  _backward=backward if rg else None, op=op)


# ---------------------------------------------------------------------------
# ops


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 3D cross-correlation."""
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    xd = x.data
    batched = xd.ndim == 5
    if not batched:
        if xd.ndim != 4:
            raise ShapeError(f"conv3d input must be rank 4 or 5, got shape {xd.shape}")
        xd = xd[None]
    w = weight.data
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5, got shape {w.shape}")
    c_out, c_in, kd, kh, kw = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv3d channel axis: input has {xd.shape[1]}, weight expects {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv3d bias axis: expected ({c_out},), got {bias.data.shape}")
    for name, size, k in zip("DHW", xd.shape[2:], (kd, kh, kw)):
        if k > size:
            raise ShapeError(f"conv3d axis {name}: kernel {k} exceeds extent {size}")

    win = sliding_window_view(xd, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[2:5]
    # (N, D', H', W', C_out)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, 4, 1) + bias.data[None, :, None, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)
    if not batched:
        out = out[0]

    def backward(g: np.ndarray) -> None:
        gb = g if batched else g[None]
        bias._accumulate(gb.sum(axis=(0, 2, 3, 4)))
        weight._accumulate(np.tensordot(gb, win, axes=([0, 2, 3, 4], [0, 2, 3, 4])))
        if not x.requires_grad:
            return
        gx = np.zeros_like(xd)
        s = stride
        for i, j, k in itertools.product(range(kd), range(kh), range(kw)):
            # (N, D', H', W', C_in)
            contrib = np.tensordot(gb, w[:, :, i, j, k], axes=([1], [0]))
            gx[:, :, i : i + s * od : s, j : j + s * oh : s, k : k + s * ow : s] += np.moveaxis(
                contrib, 4, 1
            )
        x._accumulate(gx if batched else gx[0])

    return _make(out, (x, weight, bias), backward, "conv3d")


def avgpool3d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling; trailing voxels that do not fill a window are dropped."""
    xd = x.data
    if xd.ndim not in (4, 5):
        raise ShapeError(f"avgpool3d input must be rank 4 or 5, got shape {xd.shape}")
    if window < 1:
        raise ShapeError("window must be >= 1")
    spatial = xd.shape[-3:]
    for name, size in zip("DHW", spatial):
        if window > size:
            raise ShapeError(f"avgpool3d axis {name}: window {window} exceeds extent {size}")
    lead = xd.shape[:-3]
    d, h, w = (s // window for s in spatial)
    trimmed = xd[..., : d * window, : h * window, : w * window]
    blocks = trimmed.reshape(*lead, d, window, h, window, w, window)
    axes = tuple(len(lead) + a for a in (1, 3, 5))
    out = blocks.mean(axis=axes)

    def backward(g: np.ndarray) -> None:
        scale = 1.0 / window**3
        gx = np.zeros_like(xd)
        up = g * scale
        up = np.repeat(np.repeat(np.repeat(up, window, axis=-3), window, axis=-2), window, axis=-1)
        gx[..., : d * window, : h * window, : w * window] = up
        x._accumulate(gx)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward, "avgpool3d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W x + b`` over the last axis."""
    xd, w, b = x.data, weight.data, bias.data
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"dense weight/bias shapes {w.shape}/{b.shape} are inconsistent")
    if xd.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense input length {xd.shape[-1]} != weight columns {w.shape[1]}")
    out = xd @ w.T + b

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(-1, w.shape[0])
        x2 = xd.reshape(-1, w.shape[1])
        weight._accumulate(g2.T @ x2)
        bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w)

    return _make(out, (x, weight, bias), backward, "dense")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"subtract shapes differ: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward, "subtract")


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate feature vectors along the last axis."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat leading shapes differ: {lead} vs {p.shape[:-1]}")
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accumulate(g[..., lo:hi])

    return _make(out, tuple(parts), backward, "concat")


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    """Flatten to a vector, or to ``(N, -1)`` when ``batched``."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1) if batched else x.data.reshape(-1)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(shape))

    return _make(out, (x,), backward, "flatten")


def activation(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        out = np.where(mask, xd, 0).astype(xd.dtype, copy=False)

        def backward(g: np.ndarray) -> None:
            x._accumulate(g * mask)

    elif kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        out[~pos] = ex / (1.0 + ex)

        def backward(g: np.ndarray) -> None:
            x._accumulate(g * out * (1.0 - out))

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _make(out, (x,), backward, kind)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rate == 1`` in train mode zeroes everything."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rate == 1.0:
        mask = np.zeros_like(x.data)
    else:
        keep = rng.random(x.shape) >= rate
        mask = keep.astype(x.dtype) / (1.0 - rate)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward, "dropout")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all entries, with ``pred`` clamped to [eps, 1-eps]."""
    p = pred.data
    y = np.broadcast_to(np.asarray(target, dtype=p.dtype), p.shape)
    clamped = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -(y * np.log(clamped) + (1 - y) * np.log(1 - clamped)).sum() / n
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)

    def backward(g: np.ndarray) -> None:
        local = (-(y / clamped) + (1 - y) / (1 - clamped)) / n
        pred._accumulate(g * local * inside)

    return _make(np.asarray(loss, dtype=p.dtype), (pred,), backward, "bce")


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if x.shape != y.shape:
        raise ShapeError(f"mul shapes differ: {x.shape} vs {y.shape}")

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * y.data)
        y._accumulate(g * x.data)

    return _make(x.data * y.data, (x, y), backward, "mul")


# ---------------------------------------------------------------------------
# graph and backward


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a root tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so call
    :func:`zero_grad` (or step an optimizer) between iterations.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_root(loss)
    # intermediate gradients are reset; parameter grads accumulate
    for node in graph.nodes:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def unique_params(params: Iterable[Parameter]) -> list[Parameter]:
    """One handle per logical storage, in first-seen order."""
    out, seen = [], set()
    for p in params:
        if p.storage_key not in seen:
            seen.add(p.storage_key)
            out.append(p)
    return out


class Adam:
    """Adam optimizer; tied parameter groups are updated once per step.

    ``sgd=True`` switches to plain gradient descent, mostly for tests.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, sgd: bool = False):
        self.params = unique_params(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.sgd = sgd
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.update_counts: dict[int, int] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for {p!r}")
        self.t += 1
        self.update_counts = {}
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.sgd:
                p.data -= np.asarray(self.lr * g, dtype=p.data.dtype)
            else:
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1**self.t)
                v_hat = v / (1 - b2**self.t)
                p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            self.update_counts[p.storage_key] = self.update_counts.get(p.storage_key, 0) + 1
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def optimizer_step(params: Sequence[Parameter], state: Adam, lr: float | None = None) -> None:
    """Functional wrapper: apply one update of ``state`` (optionally overriding lr)."""
    if lr is not None:
        state.lr = lr
    state.step()


# ---------------------------------------------------------------------------
# initialization


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
