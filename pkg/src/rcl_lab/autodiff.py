"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a backward closure on its output node; calling
``backward()`` on a scalar root runs the closures in reverse topological
order and accumulates gradients additively on every node that requires
them. Graphs are built fresh per training step and discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(Exception):
    """Base class for graph construction/execution failures."""


class ShapeMismatchError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class RootNotScalarError(GraphError):
    pass


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: "Tensor", b: "Tensor", op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc


class Tensor:
    """A node in the differentiation graph holding a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, _prev=(), op="leaf", name=None):
        self.data = _arr(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = tuple(_prev)
        self._backward = None
        self.op = op
        self.name = name

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root."""
        if self.data.size != 1:
            raise RootNotScalarError(
                f"backward() root must be scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.requires_grad and node.grad is not None:
                node._backward()

    # -- elementwise arithmetic --------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        _broadcast_check(self, other, "add")
        data = self.data + other.data
        out = Tensor(data, self.requires_grad or other.requires_grad,
                     (self, other), op="add")
        _check_finite(out.data, "add")

        def bw():
            self._accum(_unbroadcast(out.grad, self.data.shape))
            other._accum(_unbroadcast(out.grad, other.data.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = Tensor._lift(other)
        _broadcast_check(self, other, "subtract")
        data = self.data - other.data
        out = Tensor(data, self.requires_grad or other.requires_grad,
                     (self, other), op="subtract")
        _check_finite(out.data, "subtract")

        def bw():
            self._accum(_unbroadcast(out.grad, self.data.shape))
            other._accum(_unbroadcast(-out.grad, other.data.shape))

        out._backward = bw
        return out

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = Tensor._lift(other)
        _broadcast_check(self, other, "multiply")
        data = self.data * other.data
        out = Tensor(data, self.requires_grad or other.requires_grad,
                     (self, other), op="multiply")
        _check_finite(out.data, "multiply")

        def bw():
            self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def scale(self, c: float) -> "Tensor":
        out = Tensor(self.data * c, self.requires_grad, (self,), op="scale")
        _check_finite(out.data, "scale")

        def bw():
            self._accum(out.grad * c)

        out._backward = bw
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis), self.requires_grad, (self,), op="sum")

        def bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))

        out._backward = bw
        return out

    def mean(self, axis=None) -> "Tensor":
        out = Tensor(self.data.mean(axis=axis), self.requires_grad, (self,), op="mean")
        n = self.data.size // max(out.data.size, 1)

        def bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape) / n)

        out._backward = bw
        return out

    # -- elementwise nonlinearities ----------------------------------------

    def abs(self) -> "Tensor":
        out = Tensor(np.abs(self.data), self.requires_grad, (self,), op="abs")
        sign = np.sign(self.data)  # subgradient 0 at 0

        def bw():
            self._accum(out.grad * sign)

        out._backward = bw
        return out

    def square(self) -> "Tensor":
        out = Tensor(self.data ** 2, self.requires_grad, (self,), op="square")
        _check_finite(out.data, "square")

        def bw():
            self._accum(out.grad * 2.0 * self.data)

        out._backward = bw
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), self.requires_grad, (self,), op="relu")
        mask = (self.data > 0).astype(np.float64)

        def bw():
            self._accum(out.grad * mask)

        out._backward = bw
        return out

    def exp(self) -> "Tensor":
        data = np.exp(self.data)
        _check_finite(data, "exp")
        out = Tensor(data, self.requires_grad, (self,), op="exp")

        def bw():
            self._accum(out.grad * out.data)

        out._backward = bw
        return out

    def log(self) -> "Tensor":
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(self.data)
        _check_finite(data, "log")
        out = Tensor(data, self.requires_grad, (self,), op="log")

        def bw():
            self._accum(out.grad / self.data)

        out._backward = bw
        return out

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        out = Tensor(self.data.reshape(shape), self.requires_grad, (self,), op="reshape")

        def bw():
            self._accum(out.grad.reshape(src))

        out._backward = bw
        return out

    def __getitem__(self, key) -> "Tensor":
        out = Tensor(self.data[key], self.requires_grad, (self,), op="slice")

        def bw():
            g = np.zeros_like(self.data)
            g[key] += out.grad
            self._accum(g)

        out._backward = bw
        return out

    @staticmethod
    def concat(tensors, axis=0) -> "Tensor":
        tensors = [Tensor._lift(t) for t in tensors]
        data = np.concatenate([t.data for t in tensors], axis=axis)
        out = Tensor(data, any(t.requires_grad for t in tensors), tuple(tensors),
                     op="concat")
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(idx)])

        out._backward = bw
        return out

    # -- ordered statistics -------------------------------------------------

    def sort(self) -> "Tensor":
        """Ascending sort of the flattened tensor.

        The adjoint routes each output gradient back through the sorting
        permutation; ties resolve to the first occurrence (stable sort).
        """
        flat = self.data.ravel()
        perm = np.argsort(flat, kind="stable")
        out = Tensor(flat[perm], self.requires_grad, (self,), op="sort")

        def bw():
            g = np.zeros_like(flat)
            g[perm] = out.grad
            self._accum(g.reshape(self.data.shape))

        out._backward = bw
        return out

    def logsumexp(self) -> "Tensor":
        """log(sum(exp(x))) over all elements, computed stably."""
        flat = self.data.ravel()
        m = flat.max()
        shifted = np.exp(flat - m)
        total = shifted.sum()
        out = Tensor(m + np.log(total), self.requires_grad, (self,), op="logsumexp")
        soft = shifted / total

        def bw():
            self._accum((out.grad * soft).reshape(self.data.shape))

        out._backward = bw
        return out

    # -- spatial ops (NHWC) -------------------------------------------------

    def avg_pool2x(self) -> "Tensor":
        n, h, w, c = self._nhwc("avg_pool2x")
        if h % 2 or w % 2:
            raise ShapeMismatchError(f"avg_pool2x needs even spatial dims, got {h}x{w}")
        data = self.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
        out = Tensor(data, self.requires_grad, (self,), op="avg_pool2x")

        def bw():
            g = np.repeat(np.repeat(out.grad, 2, axis=1), 2, axis=2) / 4.0
            self._accum(g)

        out._backward = bw
        return out

    def upsample2x(self) -> "Tensor":
        n, h, w, c = self._nhwc("upsample2x")
        data = np.repeat(np.repeat(self.data, 2, axis=1), 2, axis=2)
        out = Tensor(data, self.requires_grad, (self,), op="upsample2x")

        def bw():
            g = out.grad.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))
            self._accum(g)

        out._backward = bw
        return out

    def _nhwc(self, op: str):
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"{op} expects NHWC input, got shape {self.shape}")
        return self.data.shape


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 2-D convolution with zero 'same' padding.

    ``x`` is NHWC, ``w`` is (k, k, in_c, out_c) with odd k, ``b`` is (out_c,).

    The forward pass gathers the padded input into an im2col matrix and
    runs one matmul; the matrix is kept so the weight gradient is a single
    matmul too, while the input gradient scatter-adds k*k shifted slabs
    into a padded buffer.
    """
    n, h, ww, c = x._nhwc("conv2d")
    if w.data.ndim != 4 or w.data.shape[0] != w.data.shape[1]:
        raise ShapeMismatchError(f"conv2d kernel must be (k,k,C,O), got {w.shape}")
    k, _, c2, o = w.data.shape
    if c2 != c:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if k % 2 == 0:
        raise ShapeMismatchError(f"conv2d kernel size must be odd, got {k}")
    p = k // 2
    hp, wp = h + 2 * p, ww + 2 * p
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    wk = w.data.reshape(k * k, c, o)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    col = col.reshape(-1, k * k * c)
    data = (col @ w.data.reshape(k * k * c, o)).reshape(n, h, ww, o)
    if b is not None:
        if b.data.shape != (o,):
            raise ShapeMismatchError(f"conv2d bias must be ({o},), got {b.shape}")
        data = data + b.data
    _check_finite(data, "conv2d")
    prev = (x, w) if b is None else (x, w, b)
    req = any(t.requires_grad for t in prev)
    out = Tensor(data, req, prev, op="conv2d")

    def bw():
        g = out.grad.reshape(-1, o)
        if w.requires_grad:
            w._accum((col.T @ g).reshape(k, k, c, o))
        if b is not None and b.requires_grad:
            b._accum(out.grad.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gxp = np.zeros((n, hp, wp, c))
            for i, ws in enumerate(wk):
                u, v = i // k, i % k
                gxp[:, u:u + h, v:v + ww, :] += (g @ ws.T).reshape(n, h, ww, c)
            x._accum(gxp[:, p:p + h, p:p + ww, :])

    out._backward = bw
    return out


# -- gradient verification --------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    tolerance: float
    checked: int = 0
    excluded: int = 0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(build, leaves: dict, step: float = 1e-5, tolerance: float = 1e-4,
               max_elements: int | None = None, rng=None) -> GradCheckReport:
    """Check d(build)/d(leaf) against central finite differences.

    ``build`` maps a dict of leaf Tensors to a scalar Tensor. Elements where
    the one-sided difference quotients disagree (kinks, sort ties) are
    reported as excluded rather than failed. ``max_elements`` caps the number
    of elements probed per leaf (random subset) to bound runtime.

    Raises nothing: failures are collected in the report.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    leaf_ts = {k: Tensor(_arr(v).copy(), requires_grad=True) for k, v in leaves.items()}
    root = build(leaf_ts)
    if root.data.size != 1:
        raise RootNotScalarError("grad_check target must be scalar")
    root.backward()
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaf_ts.items()
    }

    vals = {k: _arr(v).copy() for k, v in leaves.items()}

    def f() -> float:
        ts = {k: Tensor(v) for k, v in vals.items()}
        return float(build(ts).data)

    f0 = f()
    report = GradCheckReport(tolerance=tolerance)
    for name, v in vals.items():
        flat = v.ravel()
        a_flat = analytic[name].ravel()
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idxs = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            central = (fp - fm) / (2 * step)
            fwd = (fp - f0) / step
            bwdd = (f0 - fm) / step
            # One-sided quotients diverge at nondifferentiable points.
            denom_s = max(abs(fwd), abs(bwdd), 1e-3)
            if abs(fwd - bwdd) / denom_s > 0.05:
                report.excluded += 1
                continue
            report.checked += 1
            gap = abs(central - a_flat[i])
            if gap < 1e-8:  # both effectively zero: below fd roundoff noise
                continue
            rel = gap / max(abs(central), abs(a_flat[i]), 1e-6)
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tolerance:
                report.failures.append((name, int(i), float(a_flat[i]), float(central)))
    return report
