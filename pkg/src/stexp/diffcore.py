"""Dense-tensor compute graph with reverse-mode gradients.

The graph is built dynamically from a fixed, minimal primitive set:

    matmul, add, scale, row_softmax, log, exp, l2_normalize_rows,
    transpose, concat, conv2d, relu, gelu, mean,
    cross_entropy_with_index_targets

Everything else in the model is composed from these. Each primitive knows
its own exact reverse-mode rule, and ``grad_check`` verifies any graph
against central finite differences, which stay fully independent of the
backward implementations.

Training runs in float32; verification clones everything to float64 first
(finite differences are noise-dominated in 32-bit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "GraphError",
    "Tensor",
    "ParamSet",
    "constant",
    "matmul",
    "add",
    "scale",
    "row_softmax",
    "log",
    "exp",
    "l2_normalize_rows",
    "transpose",
    "concat",
    "conv2d",
    "relu",
    "gelu",
    "mean",
    "cross_entropy_with_index_targets",
    "backward",
    "evaluate_with_gradients",
    "grad_check",
    "GradCheckReport",
]

L2_NORM_EPS = 1e-8  # fixed epsilon added to the norm denominator


class GraphError(ValueError):
    """Raised when an op is applied to incompatible or invalid tensors."""


class Tensor:
    """A node in the compute graph wrapping a dense row-major array.

    Leaf tensors (parameters, constants) have no parents. Op outputs keep
    references to their parents plus a closure that maps the output
    gradient to parent gradients.
    """

    __slots__ = ("data", "parents", "grad_fn", "requires_grad", "op")

    def __init__(self, data, *, parents=(), grad_fn=None, requires_grad=False, op="leaf"):
        self.data = np.asarray(data)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = bool(requires_grad)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"


def constant(data, dtype=None) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, op="const")


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x, dtype=dtype)


def _check_float(t: Tensor, op: str) -> None:
    if t.data.dtype.kind != "f":
        raise GraphError(f"{op}: expected float tensor, got dtype {t.data.dtype}")


def _result(data, parents, grad_fn, op) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        parents=parents,
        grad_fn=grad_fn if requires else None,
        requires_grad=requires,
        op=op,
    )


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")

    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), grad_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a 2-D tensor."""
    if a.shape == b.shape:
        def grad_fn(g):
            return g, g

        return _result(a.data + b.data, (a, b), grad_fn, "add")

    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def grad_fn(g):
            return g, g.sum(axis=0)

        return _result(a.data + b.data, (a, b), grad_fn, "add")

    raise GraphError(f"add: incompatible shapes {a.shape} and {b.shape}")


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a scalar: a Python number or a single-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise GraphError(f"scale: scalar operand has shape {s.shape}")
        s_val = s.data.reshape(())

        def grad_fn(g):
            gs = np.sum(g * x.data)
            return g * s_val, np.full(s.shape, gs, dtype=s.data.dtype)

        return _result(x.data * s_val, (x, s), grad_fn, "scale")

    s_val = float(s)

    def grad_fn(g):
        return (g * s_val,)

    return _result(x.data * s_val, (x,), grad_fn, "scale")


def row_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise GraphError(f"row_softmax: expected 2-D input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), grad_fn, "row_softmax")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise GraphError("log: input has non-positive entries")
    xd = x.data

    def grad_fn(g):
        return (g / xd,)

    return _result(np.log(xd), (x,), grad_fn, "log")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def grad_fn(g):
        return (g * y,)

    return _result(y, (x,), grad_fn, "exp")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Normalize each row to unit length; the norm denominator gets +1e-8."""
    if x.data.ndim != 2:
        raise GraphError(f"l2_normalize_rows: expected 2-D input, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    denom = norms + L2_NORM_EPS
    y = x.data / denom

    def grad_fn(g):
        # y = x / (|x| + eps);  dy/dx = I/(|x|+eps) - x x^T / (|x| (|x|+eps)^2)
        dot = np.sum(g * x.data, axis=1, keepdims=True)
        safe_norms = np.where(norms > 0, norms, 1.0)
        correction = np.where(norms > 0, x.data * dot / (safe_norms * denom * denom), 0.0)
        return (g / denom - correction,)

    return _result(y, (x,), grad_fn, "l2_normalize_rows")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise GraphError(f"transpose: expected 2-D input, got {x.shape}")

    def grad_fn(g):
        return (g.T,)

    return _result(x.data.T.copy(), (x,), grad_fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise GraphError("concat: empty input list")
    nd = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != nd:
            raise GraphError("concat: rank mismatch between operands")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, grad_fn, "concat")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: [N, C, Hp, Wp] -> [N, Ho*Wo, C*kh*kw]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # [N, C, Ho, Wo, kh, kw]
    n, c, ho, wo, _, _ = windows.shape
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over [N, C, H, W] with optional per-channel bias."""
    if x.data.ndim != 4:
        raise GraphError(f"conv2d: expected 4-D input, got {x.shape}")
    if w.data.ndim != 4:
        raise GraphError(f"conv2d: expected 4-D kernel, got {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise GraphError(f"conv2d: channel mismatch, input {c_in} vs kernel {c_in_w}")
    if b is not None and b.shape != (c_out,):
        raise GraphError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise GraphError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise GraphError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} (padding={padding})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride)  # [N, Ho*Wo, C*kh*kw]
    w_flat = w.data.reshape(c_out, -1)
    out = cols @ w_flat.T  # [N, Ho*Wo, Cout]
    if b is not None:
        out = out + b.data
    out = out.transpose(0, 2, 1).reshape(n, c_out, ho, wo)

    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        g_flat = g.reshape(n, c_out, ho * wo).transpose(0, 2, 1)  # [N, Ho*Wo, Cout]
        dw = np.einsum("nlo,nlk->ok", g_flat, cols).reshape(w.shape)
        dcols = g_flat @ w_flat  # [N, Ho*Wo, C*kh*kw]
        dcols = dcols.reshape(n, ho, wo, c_in, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, grad_fn, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0), (x,), grad_fn, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), grad_fn, "gelu")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    out = np.mean(x.data, axis=axis)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))

    def grad_fn(g):
        if axis is None:
            return (np.full(x.shape, g / count, dtype=x.data.dtype),)
        g_exp = np.asarray(g)
        for a in sorted(axis):
            g_exp = np.expand_dims(g_exp, a)
        return (np.broadcast_to(g_exp, x.shape).astype(x.data.dtype) / count,)

    return _result(out, (x,), grad_fn, "mean")


def cross_entropy_with_index_targets(logits: Tensor, targets) -> Tensor:
    """Per-row -log softmax(logits)[i, targets[i]]; returns a vector of length N."""
    if logits.data.ndim != 2:
        raise GraphError(f"cross_entropy_with_index_targets: expected 2-D logits, got {logits.shape}")
    idx = np.asarray(targets)
    if idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise GraphError(
            f"cross_entropy_with_index_targets: targets shape {idx.shape} does not match {logits.shape[0]} rows"
        )
    if idx.dtype.kind not in "iu" or np.any(idx < 0) or np.any(idx >= logits.shape[1]):
        raise GraphError("cross_entropy_with_index_targets: targets must index columns of logits")

    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    shifted = ld - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    rows = np.arange(ld.shape[0])
    losses = lse[:, 0] - ld[rows, idx]

    def grad_fn(g):
        p = np.exp(ld - lse)
        p[rows, idx] -= 1.0
        return (p * g[:, None],)

    return _result(losses, (logits,), grad_fn, "cross_entropy_with_index_targets")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode pass from a scalar root; returns gradients keyed by node id."""
    if root.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data) if root.data.ndim else np.asarray(1.0, dtype=root.data.dtype)
    }
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------


class ParamSet:
    """Named parameter tensors with deterministic iteration order (by name)."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, data: np.ndarray, *, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise GraphError(f"ParamSet: duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=not frozen, op=f"param:{name}")
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if n not in self._frozen]

    def astype(self, dtype) -> "ParamSet":
        clone = ParamSet()
        for name, t in self.items():
            clone.add(name, t.data.astype(dtype), frozen=self.is_frozen(name))
        return clone

    def copy(self) -> "ParamSet":
        clone = ParamSet()
        for name, t in self.items():
            clone.add(name, t.data.copy(), frozen=self.is_frozen(name))
        return clone

    def total_size(self) -> int:
        return sum(t.size for _, t in self.items())


# ---------------------------------------------------------------------------
# evaluation and verification
# ---------------------------------------------------------------------------


def evaluate_with_gradients(
    graph: Callable[[ParamSet, list[Tensor]], Tensor],
    params: ParamSet,
    inputs: Iterable = (),
) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Run ``graph(params, inputs)`` forward, then reverse-mode to every non-frozen parameter.

    The graph must return a scalar. Raises if a non-frozen parameter is
    unreachable from the output (either dead weight or a miswired graph).
    """
    input_nodes = [_as_tensor(x) for x in inputs]
    value = graph(params, input_nodes)
    if not isinstance(value, Tensor):
        raise GraphError("evaluate_with_gradients: graph did not return a Tensor")
    if value.size != 1:
        raise GraphError(f"evaluate_with_gradients: loss must be scalar, got shape {value.shape}")

    reachable = {id(n) for n in _topo_order(value)}
    missing = [name for name in params.trainable_names() if id(params[name]) not in reachable]
    if missing:
        raise GraphError(f"evaluate_with_gradients: parameters not used by graph: {missing}")

    grads = backward(value)
    out: dict[str, np.ndarray] = {}
    for name in params.trainable_names():
        node = params[name]
        g = grads.get(id(node))
        out[name] = g if g is not None else np.zeros_like(node.data)
    return value, out


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between reverse-mode and central differences."""

    eps: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"grad_check eps={self.eps:g} tol={self.tol:g}"]
        for name, err in sorted(self.max_rel_err.items()):
            status = "ok" if err <= self.tol else "FAIL"
            lines.append(f"  {name}: max_rel_err={err:.3e} [{status}]")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} (worst {self.worst:.3e})")
        return "\n".join(lines)


# Gradient pairs whose common magnitude falls below this floor are treated as
# matching: central differences on an exactly-zero slope produce pure
# cancellation noise around 1e-11, which would otherwise dominate the ratio.
_REL_ERR_FLOOR = 1e-8


def _rel_err(a: float, b: float) -> float:
    scale_ = max(abs(a), abs(b))
    if scale_ < _REL_ERR_FLOOR:
        return 0.0
    return abs(a - b) / scale_


def grad_check(
    graph: Callable[[ParamSet, list[Tensor]], Tensor],
    params: ParamSet,
    inputs: Iterable = (),
    *,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences in float64."""
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")

    params64 = params.astype(np.float64)
    inputs64 = []
    for x in inputs:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        inputs64.append(arr.astype(np.float64) if arr.dtype.kind == "f" else arr)

    _, analytic = evaluate_with_gradients(graph, params64, inputs64)

    def forward_value() -> float:
        nodes = [_as_tensor(x) for x in inputs64]
        return float(graph(params64, nodes).data.reshape(()))

    report = GradCheckReport(eps=eps, tol=tol)
    for name in params64.trainable_names():
        data = params64[name].data
        grad = analytic[name]
        flat = data.reshape(-1)
        gflat = grad.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = forward_value()
            flat[i] = orig - eps
            f_minus = forward_value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(float(gflat[i]), fd))
        report.max_rel_err[name] = worst
    return report
