"""Minimal reverse-mode differentiation over the fixed operation set the model needs.

Values are float64 numpy arrays wrapped in :class:`Tensor` nodes. Every operation
records its parents and a backward closure at forward time; :func:`backward`
replays those closures in reverse topological order. The operation set is
deliberately closed (see :func:`supported_ops`): sparse 3-D convolution over
coordinate-list tensors, the elementwise/linear-algebra primitives needed by the
model, batch normalisation, dropout, the regularisation reductions, and the
binary cross-entropy reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DiffEngineError

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Node in the computation graph: a float64 array plus gradient bookkeeping.

    ``requires_grad`` marks trainable leaves; interior nodes inherit it from
    their parents so constant subexpressions are pruned from the recorded graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def ensure_grad(self) -> Array:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Small conveniences; the canonical entry points are the module functions.
    def __add__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        return multiply(self, _lift(other))

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Create an interior node, recording the graph only if a parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order with cycle detection (0 = visiting, 1 = done)."""
    order: list[Tensor] = []
    state: dict[int, int] = {id(root): 0}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child = stack[-1]
        if child < len(node.parents):
            stack[-1] = (node, child + 1)
            parent = node.parents[child]
            mark = state.get(id(parent))
            if mark == 0:
                raise DiffEngineError("cycle detected in computation graph")
            if mark is None:
                state[id(parent)] = 0
                stack.append((parent, 0))
        else:
            state[id(node)] = 1
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of ``loss`` w.r.t. every reachable node.

    ``loss`` must be scalar. Gradients accumulate into ``.grad``; callers zero
    parameter gradients between steps. Leaves not reachable from ``loss`` are
    simply never touched (their gradient stays zero).
    """
    if loss.size != 1:
        raise DiffEngineError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss.ensure_grad()
    loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            a.ensure_grad()
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.ensure_grad()
            b.grad += _unbroadcast(g, b.shape)

    return _node(data, (a, b), back)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            a.ensure_grad()
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.ensure_grad()
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), back)


def negate(a: Tensor) -> Tensor:
    def back(g):
        a.ensure_grad()
        a.grad -= g

    return _node(-a.data, (a,), back)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. the constant)."""
    factor = float(factor)

    def back(g):
        a.ensure_grad()
        a.grad += factor * g

    return _node(a.data * factor, (a,), back)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def back(g):
        a.ensure_grad()
        a.grad += g * data

    return _node(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        a.ensure_grad()
        a.grad += g * data * (1.0 - data)

    return _node(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        a.ensure_grad()
        a.grad += g * (1.0 - data * data)

    return _node(data, (a,), back)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; used to keep the decay rate positive."""
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        a.ensure_grad()
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        a.grad += g * s

    return _node(data, (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    data = np.where(x > 0, x, slope * x)

    def back(g):
        a.ensure_grad()
        a.grad += g * np.where(x > 0, 1.0, slope)

    return _node(data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DiffEngineError("matmul expects 2-D operands")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.ensure_grad()
            b.grad += a.data.T @ g

    return _node(data, (a, b), back)


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------

def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def back(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.ensure_grad()
                slicer = [slice(None)] * g.ndim
                slicer[axis] = slice(offset, offset + n)
                p.grad += g[tuple(slicer)]
            offset += n

    return _node(data, tuple(parts), back)


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.ensure_grad()
                p.grad += np.take(g, i, axis=axis)

    return _node(data, tuple(parts), back)


def take_index(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (e.g. one time position of a sequence)."""
    data = np.take(a.data, index, axis=axis)

    def back(g):
        a.ensure_grad()
        slicer = [slice(None)] * a.data.ndim
        slicer[axis] = index
        a.grad[tuple(slicer)] += g

    return _node(data, (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def back(g):
        a.ensure_grad()
        a.grad += g.reshape(a.data.shape)

    return _node(data, (a,), back)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def back(g):
        a.ensure_grad()
        if axis is None:
            a.grad += g
        else:
            a.grad += np.expand_dims(g, axis)

    return _node(data, (a,), back)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def back(g):
        a.ensure_grad()
        if axis is None:
            a.grad += g / n
        else:
            a.grad += np.expand_dims(g, axis) / n

    return _node(data, (a,), back)


# ---------------------------------------------------------------------------
# Regularisation reductions
# ---------------------------------------------------------------------------

def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values. Subgradient 0 at exact zeros."""
    data = np.abs(a.data).sum()

    def back(g):
        a.ensure_grad()
        a.grad += g * np.sign(a.data)

    return _node(data, (a,), back)


def l2_norm(a: Tensor) -> Tensor:
    """Sum of squares (the penalty form of the L2 norm, no square root)."""
    data = (a.data * a.data).sum()

    def back(g):
        a.ensure_grad()
        a.grad += g * 2.0 * a.data

    return _node(data, (a,), back)


def graph_regularizer(weights: Tensor) -> Tensor:
    """Temporal walk-continuity penalty over a filter bank of shape (F, V, V, d).

    For each filter and each consecutive depth pair (s, s+1), compares the
    absolute incoming mass of every node at slice s with its absolute outgoing
    mass at slice s+1 and accumulates the absolute difference; the total is
    divided by the number of filters. Filters shaped like temporal walks
    (mass received at one step is emitted at the next) score zero.
    """
    W = weights.data
    if W.ndim != 4:
        raise DiffEngineError("graph_regularizer expects a (F, V, V, d) filter bank")
    F = W.shape[0]
    absW = np.abs(W)
    incoming = absW.sum(axis=1)  # (F, V, d): mass arriving at node v in slice s
    outgoing = absW.sum(axis=2)  # (F, V, d): mass leaving node v in slice s
    diff = incoming[:, :, :-1] - outgoing[:, :, 1:]  # (F, V, d-1)
    data = np.abs(diff).sum() / F

    def back(g):
        weights.ensure_grad()
        if diff.size == 0:
            return
        s = np.sign(diff) * (float(g) / F)  # (F, V, d-1)
        sw = np.sign(W)
        # incoming mass at slice s: d|W[f,i,v,s]| enters diff[f,v,s] positively
        weights.grad[:, :, :, :-1] += s[:, None, :, :] * sw[:, :, :, :-1]
        # outgoing mass at slice s+1: d|W[f,v,j,s+1]| enters diff[f,v,s] negatively
        weights.grad[:, :, :, 1:] -= s[:, :, None, :] * sw[:, :, :, 1:]

    return _node(data, (weights,), back)


# ---------------------------------------------------------------------------
# Sparse 3-D convolution over coordinate-list tensors
# ---------------------------------------------------------------------------

def conv_output_length(n_slots: int, depth: int, stride: int) -> int:
    return (n_slots - depth) // stride + 1


def conv_pairs(slots: Array, depth: int, stride: int, n_positions: int):
    """Precompute (entry, output position, depth offset) triples for one stride.

    An entry in time slot k contributes to output position l at filter depth
    offset k - l*stride whenever 0 <= k - l*stride < depth. Cost O(nnz * depth).
    """
    slots = np.asarray(slots, dtype=np.int64)
    entries, positions, offsets = [], [], []
    for delta in range(depth):
        num = slots - delta
        ok = (num % stride == 0) & (num >= 0)
        pos = num // stride
        ok &= pos < n_positions
        idx = np.nonzero(ok)[0]
        entries.append(idx)
        positions.append(pos[idx])
        offsets.append(np.full(idx.shape, delta, dtype=np.int64))
    return (np.concatenate(entries) if entries else np.zeros(0, dtype=np.int64),
            np.concatenate(positions) if positions else np.zeros(0, dtype=np.int64),
            np.concatenate(offsets) if offsets else np.zeros(0, dtype=np.int64))


def sparse_conv3d(values: Tensor, weights: Tensor, rows: Array, cols: Array,
                  pairs: tuple[Array, Array, Array], n_positions: int) -> Tensor:
    """Convolve a sparse (V, V, K) tensor with a dense (F, V, V, d) filter bank.

    ``values`` holds the nnz entry values, ``rows``/``cols`` their node indices,
    and ``pairs`` the precomputed (entry, position, offset) triples from
    :func:`conv_pairs`. Iterates only over nonzero entries: cost
    O(nnz * F * d), never O(V^2). Returns the (F, L) feature sequence.
    """
    W = weights.data
    F = W.shape[0]
    ent, pos, off = pairs
    out = np.zeros((n_positions, F))
    if ent.size:
        wsel = W[:, rows[ent], cols[ent], off]        # (F, P)
        np.add.at(out, pos, (wsel * values.data[ent]).T)
    data = out.T.copy()

    def back(g):
        if ent.size == 0:
            if values.requires_grad:
                values.ensure_grad()
            if weights.requires_grad:
                weights.ensure_grad()
            return
        gsel = g[:, pos]                              # (F, P)
        if weights.requires_grad:
            weights.ensure_grad()
            np.add.at(weights.grad,
                      (np.arange(F)[:, None], rows[ent][None, :],
                       cols[ent][None, :], off[None, :]),
                      gsel * values.data[ent])
        if values.requires_grad:
            values.ensure_grad()
            wsel = W[:, rows[ent], cols[ent], off]
            np.add.at(values.grad, ent, (wsel * gsel).sum(axis=0))

    return _node(data, (values, weights), back)


# ---------------------------------------------------------------------------
# Normalisation, dropout, loss
# ---------------------------------------------------------------------------

_BN_EPS = 1e-5


def batch_norm(x: Tensor, scale_p: Tensor, shift: Tensor, running_mean: Array,
               running_var: Array, training: bool, momentum: float = 0.1) -> Tensor:
    """Normalise per feature channel (axis 1) over batch and remaining axes.

    In training mode uses batch statistics and updates the running moments in
    place (population variance, ddof=0); in inference mode uses the running
    moments. ``running_mean``/``running_var`` are plain arrays, not nodes.
    """
    if x.data.ndim < 2:
        raise DiffEngineError("batch_norm expects at least 2-D input (batch, channels, ...)")
    axes = (0,) + tuple(range(2, x.data.ndim))
    cshape = (1, x.data.shape[1]) + (1,) * (x.data.ndim - 2)
    gam = scale_p.data.reshape(cshape)
    bet = shift.data.reshape(cshape)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.reshape(-1)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.reshape(-1)
    else:
        mu = running_mean.reshape(cshape)
        var = running_var.reshape(cshape)

    inv_std = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x.data - mu) * inv_std
    data = gam * xhat + bet
    m = x.data.size // x.data.shape[1]

    def back(g):
        if scale_p.requires_grad:
            scale_p.ensure_grad()
            scale_p.grad += (g * xhat).sum(axis=axes)
        if shift.requires_grad:
            shift.ensure_grad()
            shift.grad += g.sum(axis=axes)
        if x.requires_grad:
            x.ensure_grad()
            gx = g * gam
            if training:
                # gradient through the batch statistics
                sum_gx = gx.sum(axis=axes, keepdims=True)
                sum_gx_xhat = (gx * xhat).sum(axis=axes, keepdims=True)
                x.grad += inv_std * (gx - sum_gx / m - xhat * sum_gx_xhat / m)
            else:
                x.grad += gx * inv_std

    return _node(data, (x, scale_p, shift), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; training-only (callers skip it in inference mode)."""
    if not 0.0 <= rate < 1.0:
        raise DiffEngineError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def back(g):
        x.ensure_grad()
        x.grad += g * mask

    return _node(x.data * mask, (x,), back)


_PROB_CLAMP = 1e-12


def bce_mean(p: Tensor, targets: Array) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets.

    Probabilities are clamped to [1e-12, 1 - 1e-12] inside the logs; the
    gradient is zero where the clamp is active.
    """
    y = _as_f64(targets)
    if y.shape != p.data.shape:
        raise DiffEngineError("bce_mean: probability and target shapes differ")
    pc = np.clip(p.data, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    data = np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    n = y.size

    def back(g):
        p.ensure_grad()
        inside = (p.data > _PROB_CLAMP) & (p.data < 1.0 - _PROB_CLAMP)
        p.grad += g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n

    return _node(data, (p,), back)


# ---------------------------------------------------------------------------
# Operation registry
# ---------------------------------------------------------------------------

_OPS = {
    "sparse_conv3d": sparse_conv3d,
    "exp": exp,
    "negate": negate,
    "scale": scale,
    "matmul": matmul,
    "add": add,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "multiply": multiply,
    "concat": concat,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "softplus": softplus,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "graph_regularizer": graph_regularizer,
    # structural helpers the composite ops above are wired with
    "stack": stack,
    "take_index": take_index,
    "reshape": reshape,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "bce_mean": bce_mean,
}


def supported_ops() -> dict:
    """The registry of differentiable primitives, name -> callable."""
    return dict(_OPS)


def get_op(name: str):
    try:
        return _OPS[name]
    except KeyError:
        raise DiffEngineError(
            f"unknown op {name!r}; supported ops: {', '.join(sorted(_OPS))}"
        ) from None


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adaptive-moment accumulators, keyed like the parameter dict."""
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Array], grads: dict[str, Array],
              state: OptimizerState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected adaptive-moment update, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise DiffEngineError(f"adam_step: gradient shape {g.shape} does not "
                                  f"match parameter {name!r} shape {value.shape}")
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_errors(loss_fn, params: dict[str, Array], eps: float = 1e-4,
                             rng: np.random.Generator | None = None,
                             max_elements: int = 100) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per group.

    ``loss_fn`` maps a dict of named Tensors to a scalar Tensor and must be
    deterministic (dropout disabled). Arrays larger than ``max_elements`` are
    subsampled. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
              for k, v in params.items()}
    loss = loss_fn(leaves)
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in leaves.items()}

    frozen = {k: Tensor(t.data) for k, t in leaves.items()}

    def eval_loss() -> float:
        return float(loss_fn(frozen).data)

    errors: dict[str, float] = {}
    for name, t in frozen.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_elements:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=max_elements, replace=False)
        worst = 0.0
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = eval_loss()
            flat[idx] = orig - eps
            f_minus = eval_loss()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        errors[name] = worst
    return errors


def finite_difference_check(loss_fn, params: dict[str, Array], eps: float = 1e-4,
                            rng: np.random.Generator | None = None,
                            max_elements: int = 100) -> float:
    """Max relative error over all parameter groups (see finite_difference_errors)."""
    errors = finite_difference_errors(loss_fn, params, eps=eps, rng=rng,
                                      max_elements=max_elements)
    return max(errors.values()) if errors else 0.0
