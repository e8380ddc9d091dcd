"""Dense float64 tensors with reverse-mode gradients.

Implements exactly the operation set the decoders in this package need:
temporal and spatial convolutions, mean pooling, affine layers,
square/log/tanh activations, dropout, and a softmax cross-entropy head.
Every op accepts either a single sample or a batch with one leading axis.
No broadcasting beyond that, no GPU, no general-purpose graph surgery.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-6


class Tensor:
    """A float64 array node in a recorded computation.

    `values` holds the data in row-major order, `grad` is filled by
    `backward()` for nodes with `requires_grad`. Interior nodes keep
    references to their parents plus a closure that maps the incoming
    gradient to per-parent gradients.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Fill `grad` for every reachable tensor that requires one.

        Only scalar roots are supported; gradients accumulate across all
        uses of a node, so shared parameters get the full sum.
        """
        if self.values.ndim != 0:
            raise ValueError("backward requires a scalar loss node")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tracked tensor")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            gout = grads.pop(id(node), None)
            if gout is None:
                continue
            if node.grad is None:
                node.grad = gout.copy()
            else:
                node.grad = node.grad + gout
            if node._backward is None:
                continue
            parent_grads = node._backward(gout)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pgrad if acc is None else acc + pgrad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(values: np.ndarray, parents: Iterable[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Build an interior node; drops the closure when no parent tracks grads."""
    parents = tuple(parents)
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _with_batch(values: np.ndarray, expect_ndim: int) -> tuple[np.ndarray, bool]:
    if values.ndim == expect_ndim:
        return values[None], False
    if values.ndim == expect_ndim + 1:
        return values, True
    raise ValueError(f"expected {expect_ndim}-d or {expect_ndim + 1}-d input, got {values.ndim}-d")


def _scatter_windows(target: np.ndarray, windowed: np.ndarray, stride: int) -> None:
    # windowed[..., t', j] contributes to target[..., t' * stride + j]
    n_out, width = windowed.shape[-2], windowed.shape[-1]
    for j in range(width):
        target[..., j:j + (n_out - 1) * stride + 1:stride] += windowed[..., j]


def conv_time(x, kernels, stride: int = 1) -> Tensor:
    """Valid 1-d convolution along the time axis, one kernel bank shared by
    all channels.

    x: [channels, time] or [batch, channels, time]; kernels: [n_filters, k].
    Output: [n_filters, channels, time'] (batched: leading batch axis) with
    time' = floor((time - k) / stride) + 1.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 2:
        raise ValueError("kernels must have shape [n_filters, k]")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError("stride must be a positive integer")
    xb, batched = _with_batch(x.values, 2)
    k = kernels.values.shape[1]
    if k > xb.shape[-1]:
        raise ValueError(f"kernel length {k} exceeds signal length {xb.shape[-1]}")

    windows = sliding_window_view(xb, k, axis=-1)[..., ::stride, :]  # [B, C, T', k]
    out = np.tensordot(windows, kernels.values, axes=([3], [1]))     # [B, C, T', F]
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))              # [B, F, C, T']

    def backward(gout):
        g = gout if batched else gout[None]
        gk = gx = None
        if kernels.requires_grad:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 1, 2]))  # [F, k]
        if x.requires_grad:
            spread = np.tensordot(g, kernels.values, axes=([1], [0]))   # [B, C, T', k]
            gx = np.zeros_like(xb)
            _scatter_windows(gx, spread, stride)
            if not batched:
                gx = gx[0]
        return gx, gk

    return make_node(out if batched else out[0], (x, kernels), backward)


def conv_space(x, weights) -> Tensor:
    """Fully contract the (filter, channel) axes: spatial convolution.

    x: [n_filters, channels, time] or batched; weights: [n_out, n_filters,
    channels]. Output: [n_out, time] (batched: [batch, n_out, time]).
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 3:
        raise ValueError("weights must have shape [n_out, n_filters, channels]")
    xb, batched = _with_batch(x.values, 3)
    if weights.values.shape[1:] != xb.shape[1:3]:
        raise ValueError(
            f"weight extents {weights.values.shape[1:]} do not match input "
            f"filter/channel extents {xb.shape[1:3]}")

    out = np.einsum("ofc,bfct->bot", weights.values, xb, optimize=True)

    def backward(gout):
        g = gout if batched else gout[None]
        gw = gx = None
        if weights.requires_grad:
            gw = np.einsum("bot,bfct->ofc", g, xb, optimize=True)
        if x.requires_grad:
            gx = np.einsum("bot,ofc->bfct", g, weights.values, optimize=True)
            if not batched:
                gx = gx[0]
        return gx, gw

    return make_node(out if batched else out[0], (x, weights), backward)


def mean_pool(x, width: int, stride: int) -> Tensor:
    """Mean over sliding windows along the last axis.

    x: [features, time] or batched. Output time' = floor((time - width) /
    stride) + 1.
    """
    x = as_tensor(x)
    if not isinstance(width, int) or width < 1 or not isinstance(stride, int) or stride < 1:
        raise ValueError("width and stride must be positive integers")
    xb, batched = _with_batch(x.values, 2)
    if width > xb.shape[-1]:
        raise ValueError(f"pool width {width} exceeds time extent {xb.shape[-1]}")

    windows = sliding_window_view(xb, width, axis=-1)[..., ::stride, :]
    out = windows.mean(axis=-1)

    def backward(gout):
        g = gout if batched else gout[None]
        gx = np.zeros_like(xb)
        spread = np.repeat((g / width)[..., None], width, axis=-1)
        _scatter_windows(gx, spread, stride)
        return (gx if batched else gx[0],)

    return make_node(out if batched else out[0], (x,), backward)


def dense(x, weights, bias) -> Tensor:
    """Affine map: weights @ x + bias, batched over a leading axis if present."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or bias.ndim != 1:
        raise ValueError("weights must be [m, n] and bias [m]")
    xb, batched = _with_batch(x.values, 1)
    m, n = weights.values.shape
    if xb.shape[-1] != n or bias.values.shape[0] != m:
        raise ValueError(
            f"extent mismatch: input {xb.shape[-1]}, weights {weights.values.shape}, "
            f"bias {bias.values.shape}")

    out = xb @ weights.values.T + bias.values

    def backward(gout):
        g = gout if batched else gout[None]
        gx = gw = gb = None
        if x.requires_grad:
            gx = g @ weights.values
            if not batched:
                gx = gx[0]
        if weights.requires_grad:
            gw = g.T @ xb
        if bias.requires_grad:
            gb = g.sum(axis=0)
        return gx, gw, gb

    return make_node(out if batched else out[0], (x, weights, bias), backward)


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.values

    def backward(gout):
        return (2.0 * v * gout,)

    return make_node(v * v, (x,), backward)


def log_clipped(x, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); the clipped region has zero gradient."""
    x = as_tensor(x)
    v = x.values
    out = np.log(np.maximum(v, floor))

    def backward(gout):
        live = v > floor
        return (np.where(live, gout / np.where(live, v, 1.0), 0.0),)

    return make_node(out, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)

    def backward(gout):
        return (gout * (1.0 - out * out),)

    return make_node(out, (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout. Identity when rate == 0 or in inference mode."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(gout):
        return (gout * mask,)

    return make_node(x.values * mask, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.values.shape

    def backward(gout):
        return (gout.reshape(old),)

    return make_node(x.values.reshape(shape), (x,), backward)


def take_rows(x, idx) -> Tensor:
    """Gather rows of a 2-d tensor; duplicate indices accumulate gradient."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("take_rows expects a 2-d tensor")
    idx = np.asarray(idx, dtype=np.intp)

    def backward(gout):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, gout)
        return (gx,)

    return make_node(x.values[idx], (x,), backward)


def add(a, b) -> Tensor:
    """Elementwise sum of two same-shape tensors, or tensor + python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return make_node(a.values + float(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return make_node(a.values + b.values, (a, b), lambda g: (g, g))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return make_node(a.values * factor, (a,), lambda g: (g * factor,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shape tensors."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    total = tensors[0].values.copy()
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ValueError("add_n requires identical shapes")
        total += t.values
    return make_node(total, tensors, lambda g: tuple(g for _ in tensors))


def tsum(x) -> Tensor:
    """Sum of all elements, as a scalar node."""
    x = as_tensor(x)

    def backward(gout):
        return (np.full_like(x.values, float(gout)),)

    return make_node(np.asarray(x.values.sum()), (x,), backward)


def softmax_xent(logits, labels) -> tuple[Tensor, np.ndarray]:
    """Stabilized softmax + cross-entropy.

    1-d logits with an integer label give the single-sample loss; 2-d logits
    with a label vector give the batch-mean loss. Returns (loss, probabilities).
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        batched = False
        z = logits.values[None]
        labels_arr = np.asarray([labels], dtype=np.intp)
    elif logits.ndim == 2:
        batched = True
        z = logits.values
        labels_arr = np.asarray(labels, dtype=np.intp)
        if labels_arr.shape != (z.shape[0],):
            raise ValueError("labels must align with the batch axis")
    else:
        raise ValueError("logits must be 1-d or 2-d")
    n_classes = z.shape[1]
    if n_classes < 2:
        raise ValueError("softmax_xent needs at least 2 classes")
    if labels_arr.min() < 0 or labels_arr.max() >= n_classes:
        raise IndexError(f"label out of range for {n_classes} classes")

    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    rows = np.arange(z.shape[0])
    nll = np.log(total[:, 0]) - shifted[rows, labels_arr]
    loss_value = nll.mean() if batched else nll[0]

    def backward(gout):
        d = probs.copy()
        d[rows, labels_arr] -= 1.0
        if batched:
            d /= z.shape[0]
        g = d * float(gout)
        return (g if batched else g[0],)

    loss = make_node(np.asarray(loss_value), (logits,), backward)
    return loss, (probs if batched else probs[0]).copy()


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must rebuild the graph and return a scalar loss on every call, and be
    deterministic (re-seed any randomness inside it). Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in wrt:
        t.zero_grad()
    loss = fn()
    if loss.ndim != 0:
        raise ValueError("grad_check requires a scalar loss")
    loss.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, ana in zip(wrt, analytic):
        flat = t.values.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = fn().item()
            flat[i] = keep - eps
            down = fn().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
