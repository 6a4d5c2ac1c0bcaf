"""Minimal define-by-run reverse-mode differentiation over dense float64 arrays.

Only the handful of operations the unfolded network needs are provided.  Every
op takes :class:`Node` objects (plain ``np.ndarray`` inputs are wrapped as
constants) and returns a new :class:`Node` whose backward rule pushes the
incoming gradient to its parents.

Feature maps use the ``(batch, channel, height, width)`` shape convention.  The
convolution stores its output channels-last in memory and hands back a
transposed view, so a chain of convs, ReLUs and channel scalings never pays for
a layout conversion.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_CHUNK = 2048  # rows per block in the conv kernels


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class Node:
    """A value in the computation graph together with its accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_rule: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name
        # leaves that require grad own a persistent, zero-initialised buffer
        self.grad = np.zeros_like(self.value) if (requires_grad and not parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # interior nodes: keep a reference and never mutate it, since the
            # same array may have been handed to sibling parents
            self.grad = g
        elif self.is_leaf:
            self.grad += g
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=DTYPE, copy=True), requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents: Sequence[Node], rule) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents, rule if needs else None, requires_grad=needs)


# ---------------------------------------------------------------------------
# convolution kernels (3x3, stride 1, zero padding 1)


def _pad_flat(x_nhwc: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Zero-pad by one pixel and flatten to rows of channels with a safety tail.

    A 3x3 correlation then becomes nine contiguous row-offset slices of the
    returned buffer, each multiplied by one ``Cin x Cout`` tap.
    """
    B, H, W, C = x_nhwc.shape
    Hp, Wp = H + 2, W + 2
    L = B * Hp * Wp
    buf = np.zeros((L + 2 * Wp + 2, C), dtype=DTYPE)
    buf[:L].reshape(B, Hp, Wp, C)[:, 1 : H + 1, 1 : W + 1] = x_nhwc
    return buf, Hp, Wp


def _correlate_flat(buf: np.ndarray, taps: np.ndarray, B: int, H: int, W: int, Wp: int) -> np.ndarray:
    """Valid 3x3 correlation of a padded flat buffer; taps has shape (3, 3, Cin, Cout).

    Rows are processed in cache-sized chunks, which is about twice as fast as
    nine full-length products.
    """
    L = B * (H + 2) * Wp
    cin, cout = taps.shape[2], taps.shape[3]
    offs = [dy * Wp + dx for dy in range(3) for dx in range(3)]
    out = np.empty((L, cout), dtype=DTYPE)
    if cin == 1:
        # gather the nine shifted pixels, then one K=9 product
        flat = np.ascontiguousarray(taps.reshape(9, cout))
        col = np.empty((_CHUNK, 9), dtype=DTYPE)
        src = buf[:, 0]
        for s in range(0, L, _CHUNK):
            e = min(L, s + _CHUNK)
            n = e - s
            for k, off in enumerate(offs):
                col[:n, k] = src[s + off : e + off]
            out[s:e] = col[:n] @ flat
    elif cout == 1:
        # one product against all nine taps, then shifted sums of its columns
        flat = np.ascontiguousarray(taps.reshape(9, cin).T)
        tail = offs[-1]
        for s in range(0, L, _CHUNK):
            e = min(L, s + _CHUNK)
            n = e - s
            y = buf[s : e + tail] @ flat
            acc = y[0:n, 0].copy()
            for k in range(1, 9):
                acc += y[offs[k] : offs[k] + n, k]
            out[s:e, 0] = acc
    else:
        taps = np.ascontiguousarray(taps)
        pairs = [(off, taps[k // 3, k % 3]) for k, off in enumerate(offs)]
        for s in range(0, L, _CHUNK):
            e = min(L, s + _CHUNK)
            acc = buf[s:e] @ pairs[0][1]
            for off, tap in pairs[1:]:
                acc += buf[s + off : e + off] @ tap
            out[s:e] = acc
    return out.reshape(B, H + 2, Wp, -1)[:, :H, :W]


def _weight_grad_flat(buf: np.ndarray, grid: np.ndarray, Wp: int) -> np.ndarray:
    """Per-tap ``sum_q buf[q + off]^T grid[q]``, shape (3, 3, Cin, Cout)."""
    L = grid.shape[0]
    acc = np.zeros((3, 3, buf.shape[1], grid.shape[1]), dtype=DTYPE)
    for s in range(0, L, _CHUNK):
        e = min(L, s + _CHUNK)
        g = grid[s:e]
        for dy in range(3):
            for dx in range(3):
                off = dy * Wp + dx
                acc[dy, dx] += buf[s + off : e + off].T @ g
    return acc


def _conv_nhwc(x_nhwc: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    B, H, W, _ = x_nhwc.shape
    buf, _, Wp = _pad_flat(x_nhwc)
    taps = weight.transpose(2, 3, 1, 0)  # (3, 3, Cin, Cout)
    return _correlate_flat(buf, taps, B, H, W, Wp), buf, Wp


def conv2d_array(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Plain-array forward convolution, ``x`` is B x Cin x H x W."""
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    _check_conv_shapes(x.shape, weight.shape, None if bias is None else np.shape(bias))
    out, _, _ = _conv_nhwc(x.transpose(0, 2, 3, 1), weight)
    if bias is not None:
        out = out + np.asarray(bias, dtype=DTYPE)
    else:
        out = np.ascontiguousarray(out)
    return out.transpose(0, 3, 1, 2)


def _check_conv_shapes(xs, ws, bs) -> None:
    if len(xs) != 4:
        raise DimensionError(f"conv2d input must be 4-d (B, C, H, W), got shape {xs}")
    if len(ws) != 4 or ws[2:] != (3, 3):
        raise DimensionError(f"conv2d weight must be Cout x Cin x 3 x 3, got {ws}")
    if xs[1] != ws[1]:
        raise DimensionError(f"conv2d channel mismatch: input has {xs[1]} channels, weight expects {ws[1]}")
    if bs is not None and tuple(bs) != (ws[0],):
        raise DimensionError(f"conv2d bias must have shape ({ws[0]},), got {tuple(bs)}")


def conv2d(x, weight, bias=None) -> Node:
    """3x3 same-size cross-correlation with zero padding."""
    x, weight = constant(x), constant(weight)
    bias = None if bias is None else constant(bias)
    _check_conv_shapes(x.shape, weight.shape, None if bias is None else bias.shape)

    x_nhwc = x.value.transpose(0, 2, 3, 1)
    out, buf, Wp = _conv_nhwc(x_nhwc, weight.value)
    out = out + bias.value if bias is not None else np.ascontiguousarray(out)
    B, H, W, _ = x_nhwc.shape
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g: np.ndarray) -> None:
        g_nhwc = g.transpose(0, 2, 3, 1)
        if x.requires_grad or weight.requires_grad:
            gbuf, _, _ = _pad_flat(g_nhwc)
        if x.requires_grad:
            # adjoint of correlation: flipped kernel with in/out channels swapped
            flipped = weight.value[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
            x.accumulate(_correlate_flat(gbuf, flipped, B, H, W, Wp).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            # shifting the padded gradient by one row and one column puts g[i, j]
            # at grid position (i, j) with zeros everywhere else
            L = B * (H + 2) * Wp
            grid = gbuf[Wp + 1 : Wp + 1 + L]
            weight.accumulate(_weight_grad_flat(buf, grid, Wp).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g_nhwc.sum(axis=(0, 1, 2)))

    return _make(out.transpose(0, 3, 1, 2), parents, rule)


# ---------------------------------------------------------------------------
# elementwise and affine ops


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


_relu_masks: list | None = None


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation mask of every ``relu`` evaluated inside the block.

    Finite-difference checks use it to detect a perturbation that moves a
    pre-activation across the kink, where central differences are invalid.
    """
    global _relu_masks
    saved, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = saved


def relu(x) -> Node:
    x = constant(x)
    mask = x.value > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)

    def rule(g):
        x.accumulate(g * mask)

    return _make(np.maximum(x.value, 0.0), (x,), rule)


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _same_shape(a, b, "add")

    def rule(g):
        a.accumulate(g)
        b.accumulate(g)

    return _make(a.value + b.value, (a, b), rule)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _same_shape(a, b, "sub")

    def rule(g):
        a.accumulate(g)
        b.accumulate(-g)

    return _make(a.value - b.value, (a, b), rule)


def scale(x, s) -> Node:
    """Multiply every element of ``x`` by a scalar (a float or a 0-d/1-element node)."""
    x, s = constant(x), constant(s)
    if s.value.size != 1:
        raise DimensionError(f"scale: expected a scalar factor, got shape {s.shape}")
    sv = s.value.reshape(())

    def rule(g):
        x.accumulate(g * sv)
        if s.requires_grad:
            s.accumulate(np.reshape(np.vdot(g, x.value), s.shape))

    return _make(x.value * sv, (x, s), rule)


def channel_scale(x, s) -> Node:
    """Multiply channel ``c`` of a B x C x H x W map by ``s[c]``."""
    x, s = constant(x), constant(s)
    if x.value.ndim != 4 or s.shape != (x.shape[1],):
        raise DimensionError(f"channel_scale: cannot scale {x.shape} by vector of shape {s.shape}")
    sb = s.value[None, :, None, None]

    def rule(g):
        x.accumulate(g * sb)
        if s.requires_grad:
            s.accumulate(np.einsum("bchw,bchw->c", g, x.value))

    return _make(x.value * sb, (x, s), rule)


def fc(z, weight, bias) -> Node:
    """Fully connected map ``weight @ z + bias`` for a single length-K input."""
    z, weight, bias = constant(z), constant(weight), constant(bias)
    if z.value.ndim != 1 or weight.value.ndim != 2 or weight.shape[1] != z.shape[0] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"fc: incompatible shapes z{z.shape}, weight{weight.shape}, bias{bias.shape}")

    def rule(g):
        z.accumulate(weight.value.T @ g)
        weight.accumulate(np.outer(g, z.value))
        bias.accumulate(g)

    return _make(weight.value @ z.value + bias.value, (z, weight, bias), rule)


def matmul(x, a: np.ndarray) -> Node:
    """Right-multiply a B x K node by a constant K x M matrix."""
    x = constant(x)
    a = np.asarray(a, dtype=DTYPE)
    if x.value.ndim != 2 or a.ndim != 2 or x.shape[1] != a.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {x.shape} by {a.shape}")

    def rule(g):
        x.accumulate(g @ a.T)

    return _make(x.value @ a, (x,), rule)


def linear_map(x, fn: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]) -> Node:
    """Apply a fixed linear map (reshape, permutation, crop) with a known adjoint."""
    x = constant(x)

    def rule(g):
        x.accumulate(adjoint(g))

    return _make(fn(x.value), (x,), rule)


def reshape(x, shape: Sequence[int]) -> Node:
    x = constant(x)
    old = x.shape
    return linear_map(x, lambda v: v.reshape(shape), lambda g: g.reshape(old))


def mse(a, b) -> Node:
    """Mean of squared differences over all elements, a scalar node."""
    a, b = constant(a), constant(b)
    _same_shape(a, b, "mse")
    diff = a.value - b.value
    n = diff.size

    def rule(g):
        gd = diff * (2.0 * float(g) / n)
        a.accumulate(gd)
        b.accumulate(-gd)

    return _make(np.array(np.vdot(diff, diff) / n), (a, b), rule)


# ---------------------------------------------------------------------------
# reverse sweep


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    Gradients of interior nodes are released once propagated; leaf gradients
    accumulate across calls until :meth:`Node.zero_grad`.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    if loss.is_leaf:
        loss.accumulate(np.ones_like(loss.value))
        return
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.is_leaf or node.grad is None:
            continue
        node.backward_rule(node.grad)
        node.grad = None


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)``.  Raises ``FloatingPointError`` naming the
    first parameter whose gradient is not finite; nothing is modified then.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()
