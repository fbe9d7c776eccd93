"""Minimal reverse-mode autodiff over dense float32 numpy arrays.

Define-by-run: every op builds a fresh node; backward() walks the graph in
reverse topological order exactly once per call. Accumulation inside one op
is whatever numpy does sequentially, so fixed seeds give reproducible runs.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

# Module-level switch for per-op NaN/Inf detection. On by default; training
# loops may disable it around hot sections without changing numerics.
_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


_grad_enabled = True


class no_grad:
    """Context manager: ops built inside do not record the graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array plus the graph edge that produced it.

    `parents` and `_vjp` are only set on non-leaf nodes. `grad` accumulates
    across backward() calls until cleared.
    """

    __slots__ = ("data", "parents", "_vjp", "grad", "requires_grad", "op")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op="leaf",
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        if _grad_enabled:
            self.parents = parents
            self._vjp = vjp
            self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        else:
            self.parents = ()
            self._vjp = None
            self.requires_grad = False
        self.grad = None
        self.op = op
        _check_finite(arr, op)

    # ---- introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # ---- graph construction helpers ----

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ShapeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), op="const")

    # ---- elementwise arithmetic ----

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data
        return Tensor(out_data, parents=(self, other), op="add",
                      vjp=lambda g: (_unbroadcast(g, self.shape),
                                     _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        return Tensor(self.data - other.data, parents=(self, other), op="sub",
                      vjp=lambda g: (_unbroadcast(g, self.shape),
                                     _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        return Tensor(self.data * other.data, parents=(self, other), op="mul",
                      vjp=lambda g: (_unbroadcast(g * other.data, self.shape),
                                     _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return Tensor(self.data / other.data, parents=(self, other), op="div",
                      vjp=lambda g: (_unbroadcast(g / other.data, self.shape),
                                     _unbroadcast(-g * self.data / (other.data ** 2),
                                                  other.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        return Tensor(-self.data, parents=(self,), op="neg", vjp=lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ShapeError("only constant exponents supported")
        e = float(exponent)
        return Tensor(self.data ** e, parents=(self,), op="pow",
                      vjp=lambda g: (g * e * self.data ** (e - 1.0),))

    # ---- matmul ----

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires >=2-D operands")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        out = np.matmul(a, b)

        def vjp(g):
            ga = np.matmul(g, b.swapaxes(-1, -2))
            gb = np.matmul(a.swapaxes(-1, -2), g)
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor(out, parents=(self, other), op="matmul", vjp=vjp)

    # ---- unary nonlinearities ----

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,), op="tanh",
                      vjp=lambda g: (g * (1.0 - out * out),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), op="exp", vjp=lambda g: (g * out,))

    def log(self):
        return Tensor(np.log(self.data), parents=(self,), op="log",
                      vjp=lambda g: (g / self.data,))

    def clamp(self, lo, hi):
        out = np.clip(self.data, lo, hi)
        mask = ((self.data >= lo) & (self.data <= hi)).astype(self.dtype)
        return Tensor(out, parents=(self,), op="clamp", vjp=lambda g: (g * mask,))

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims, dtype=self.dtype)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).astype(self.dtype, copy=False),)

        return Tensor(out, parents=(self,), op="sum", vjp=vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- shape ops ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor(self.data.reshape(shape), parents=(self,), op="reshape",
                      vjp=lambda g: (g.reshape(old),))

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor(self.data.transpose(axes), parents=(self,), op="transpose",
                      vjp=lambda g: (g.transpose(inv),))

    def swapaxes(self, a, b):
        return Tensor(self.data.swapaxes(a, b), parents=(self,), op="swapaxes",
                      vjp=lambda g: (g.swapaxes(a, b),))

    def __getitem__(self, idx):
        out = self.data[idx]

        def vjp(g):
            full = np.zeros(self.shape, dtype=self.dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(out, parents=(self, ), op="slice", vjp=vjp)

    # ---- backward ----

    def backward(self):
        """Accumulate d(self)/d(node) into .grad of every reachable node.

        Repeated calls without clearing grads add up (two calls -> 2x).
        """
        if self.size != 1:
            raise ShapeError("backward requires a scalar loss")
        topo = _toposort(self)
        local = {id(self): np.ones(self.shape, dtype=self.dtype)}
        for node in reversed(topo):
            g = local.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in local:
                    local[key] = local[key] + pg
                else:
                    local[key] = pg


def _toposort(root: Tensor):
    """Iterative post-order over requires_grad subgraph; each node once."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


# ---- free-function ops ----


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, op="input")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(tensors), op="concat", vjp=vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    b = a._coerce(b)
    mask = (a.data <= b.data).astype(a.dtype)
    return Tensor(np.minimum(a.data, b.data), parents=(a, b), op="minimum",
                  vjp=lambda g: (_unbroadcast(g * mask, a.shape),
                                 _unbroadcast(g * (1.0 - mask), b.shape)))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    b = a._coerce(b)
    mask = (a.data >= b.data).astype(a.dtype)
    return Tensor(np.maximum(a.data, b.data), parents=(a, b), op="maximum",
                  vjp=lambda g: (_unbroadcast(g * mask, a.shape),
                                 _unbroadcast(g * (1.0 - mask), b.shape)))


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, parents=(x,), op="softmax", vjp=vjp)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True, dtype=x.dtype)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    out = centered * inv
    n = x.shape[-1]

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True, dtype=x.dtype)
        gy_mean = (g * out).mean(axis=-1, keepdims=True, dtype=x.dtype)
        return ((g - g_mean - out * gy_mean) * inv,)

    return Tensor(out, parents=(x,), op="layer_norm", vjp=vjp)


# ---- parameters and optimization ----


class ParameterSet:
    """Named parameter tensors with gradient access and Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True,
                   op="param")
        self._params[name] = t
        self._m[name] = np.zeros(t.shape, dtype=DEFAULT_DTYPE)
        self._v[name] = np.zeros(t.shape, dtype=DEFAULT_DTYPE)
        return t

    def adopt(self, name: str, t: Tensor) -> Tensor:
        """Register an existing parameter tensor (shared across sets)."""
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        self._m[name] = np.zeros(t.shape, dtype=DEFAULT_DTYPE)
        self._v[name] = np.zeros(t.shape, dtype=DEFAULT_DTYPE)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> np.ndarray:
        """Accumulated gradient; zeros if the parameter was unreachable."""
        t = self._params[name]
        if t.grad is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return t.grad

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def set_requires_grad(self, flag: bool):
        for t in self._params.values():
            t.requires_grad = flag

    def clip_global_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so the global L2 norm is <= max_norm.

        Returns the applied scale factor min(1, max_norm / norm).
        """
        total = 0.0
        for name, t in self._params.items():
            if t.grad is not None:
                g = t.grad.ravel()
                total += float(np.dot(g, g))
        norm = float(np.sqrt(total))
        if norm <= max_norm or norm == 0.0:
            return 1.0
        scale = max_norm / norm
        for t in self._params.values():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.dtype)
        return scale

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        """Standard bias-corrected Adam update over all parameters."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for name, p in self._params.items():
            g = p.grad
            if g is None:
                g = np.zeros(p.shape, dtype=p.dtype)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = (p.data - np.asarray(lr, dtype=p.dtype) * m_hat
                      / (np.sqrt(v_hat) + eps)).astype(p.dtype)

    def state_arrays(self):
        """(name -> value, m, v) views for checkpointing."""
        return {name: (p.data, self._m[name], self._v[name])
                for name, p in self._params.items()}

    def load_value(self, name: str, data: np.ndarray):
        p = self._params[name]
        if p.shape != data.shape:
            raise ShapeError(f"shape mismatch loading {name!r}: "
                             f"{p.shape} vs {data.shape}")
        p.data = data.astype(p.dtype, copy=True)
