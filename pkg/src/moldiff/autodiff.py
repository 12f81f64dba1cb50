"""Minimal dense-tensor reverse-mode autodiff on numpy.

A :class:`Tensor` wraps one ndarray and records the op that produced it.
``backward()`` walks the graph in iterative topological order (no recursion,
deep chains are fine) and accumulates gradients into every tensor with
``requires_grad``. Gradient arrays are never mutated in place, so aliasing
between closures is harmless.

Also here: the parameter store (dotted names, deterministic iteration),
small layer helpers (Linear, LayerNorm, MLP), Adam with global-norm
clipping, and an EMA of the parameters.
"""

import contextlib
import math

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """One ndarray plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    # keep numpy from broadcasting over Tensors elementwise; with this unset,
    # ndarray + Tensor silently builds an object array instead of calling
    # the reflected op
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        """Build an op output; records the graph only if grads are needed."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def _acc(t, g):
        if not t.requires_grad:
            return
        t.grad = g if t.grad is None else t.grad + g

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        data = self.data + other.data

        def bw(g):
            Tensor._acc(self, _unbroadcast(g, self.data.shape))
            Tensor._acc(other, _unbroadcast(g, other.data.shape))

        return Tensor._node(data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        data = self.data - other.data

        def bw(g):
            Tensor._acc(self, _unbroadcast(g, self.data.shape))
            Tensor._acc(other, _unbroadcast(-g, other.data.shape))

        return Tensor._node(data, (self, other), bw)

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other
        data = a.data * b.data

        def bw(g):
            Tensor._acc(a, _unbroadcast(g * b.data, a.data.shape))
            Tensor._acc(b, _unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other
        data = a.data / b.data

        def bw(g):
            Tensor._acc(a, _unbroadcast(g / b.data, a.data.shape))
            Tensor._acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._node(data, (a, b), bw)

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __neg__(self):
        data = -self.data

        def bw(g):
            Tensor._acc(self, -g)

        return Tensor._node(data, (self,), bw)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** p

        def bw(g):
            Tensor._acc(self, g * p * self.data ** (p - 1))

        return Tensor._node(data, (self,), bw)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)

        def bw(g):
            Tensor._acc(self, g.reshape(old))

        return Tensor._node(data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        data = self.data.transpose(axes)

        def bw(g):
            Tensor._acc(self, g.transpose(inv))

        return Tensor._node(data, (self,), bw)

    def broadcast_to(self, shape):
        old = self.data.shape
        data = np.broadcast_to(self.data, shape)

        def bw(g):
            Tensor._acc(self, _unbroadcast(g, old))

        return Tensor._node(data, (self,), bw)

    def __getitem__(self, key):
        data = self.data[key]
        shape, dtype = self.data.shape, self.data.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, key, g)
            Tensor._acc(self, full)

        return Tensor._node(data, (self,), bw)

    def astype(self, dtype):
        src = self.data.dtype
        data = self.data.astype(dtype)

        def bw(g):
            Tensor._acc(self, g.astype(src))

        return Tensor._node(data, (self,), bw)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            Tensor._acc(self, np.broadcast_to(g, shape).copy())

        return Tensor._node(data, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise functions --------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def bw(g):
            Tensor._acc(self, g * data)

        return Tensor._node(data, (self,), bw)

    def log(self):
        data = np.log(self.data)

        def bw(g):
            Tensor._acc(self, g / self.data)

        return Tensor._node(data, (self,), bw)

    def sqrt(self):
        data = np.sqrt(self.data)

        def bw(g):
            # floor the denominator so sqrt(0) does not poison the graph
            Tensor._acc(self, g * 0.5 / np.maximum(data, 1e-30))

        return Tensor._node(data, (self,), bw)

    def tanh(self):
        data = np.tanh(self.data)

        def bw(g):
            Tensor._acc(self, g * (1.0 - data * data))

        return Tensor._node(data, (self,), bw)

    def sigmoid(self):
        data = _sigmoid(self.data)

        def bw(g):
            Tensor._acc(self, g * data * (1.0 - data))

        return Tensor._node(data, (self,), bw)

    def silu(self):
        s = _sigmoid(self.data)
        data = self.data * s

        def bw(g):
            Tensor._acc(self, g * s * (1.0 + self.data * (1.0 - s)))

        return Tensor._node(data, (self,), bw)

    def relu(self):
        data = np.maximum(self.data, 0.0)

        def bw(g):
            Tensor._acc(self, g * (self.data > 0.0))

        return Tensor._node(data, (self,), bw)

    def arccos(self, clip=1e-7):
        """arccos with the argument clamped to [-1+clip, 1-clip].

        The derivative is evaluated at the clamped value, so collinear
        geometry yields large-but-finite gradients instead of NaN.
        """
        c = np.clip(self.data, -1.0 + clip, 1.0 - clip)
        data = np.arccos(c)

        def bw(g):
            Tensor._acc(self, -g / np.sqrt(1.0 - c * c))

        return Tensor._node(data, (self,), bw)

    # -- matmul / einsum ------------------------------------------------------

    def matmul(self, other):
        """(..., k) @ (k, m) -> (..., m)."""
        other = _wrap(other, self.dtype)
        a, b = self, other
        if b.data.ndim != 2:
            raise ValueError("matmul rhs must be 2D; use einsum2 otherwise")
        if a.data.ndim < 1 or a.data.shape[-1] != b.data.shape[0]:
            raise ValueError(
                f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
            )
        data = a.data @ b.data

        def bw(g):
            Tensor._acc(a, g @ b.data.T)
            ga = a.data.reshape(-1, a.data.shape[-1])
            gg = g.reshape(-1, g.shape[-1])
            Tensor._acc(b, ga.T @ gg)

        return Tensor._node(data, (a, b), bw)

    def __matmul__(self, other):
        return self.matmul(other)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _axis_size(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors, axis=-1):
    """Concatenate along one axis; backward splits by the source sizes."""
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            Tensor._acc(t, g[tuple(idx)])

    return Tensor._node(data, tuple(tensors), bw)


def stack(tensors, axis=0):
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            Tensor._acc(t, np.take(g, i, axis=axis))

    return Tensor._node(data, tuple(tensors), bw)


def einsum2(spec, a, b):
    """Binary einsum with the swap-rule backward.

    Valid when no label repeats inside one operand and every operand label
    appears in the output or in the other operand (checked at call time).
    """
    lhs, out_spec = spec.replace(" ", "").split("->")
    a_spec, b_spec = lhs.split(",")
    for s, arr in ((a_spec, a), (b_spec, b)):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated label within operand: {spec!r}")
        if len(s) != arr.data.ndim:
            raise ValueError(f"spec {spec!r} does not match operand rank")
    if not set(a_spec) <= set(out_spec) | set(b_spec):
        raise ValueError(f"label of first operand unrecoverable in backward: {spec!r}")
    if not set(b_spec) <= set(out_spec) | set(a_spec):
        raise ValueError(f"label of second operand unrecoverable in backward: {spec!r}")
    data = np.einsum(spec, a.data, b.data)

    def bw(g):
        Tensor._acc(a, np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data))
        Tensor._acc(b, np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, a.data))

    return Tensor._node(data, (a, b), bw)


def softmax(x, axis=-1, mask=None):
    """Softmax over `axis`; `mask` (bool ndarray) marks valid entries.

    Rows with no valid entry produce zeros, so fully masked attention
    reduces to the residual path.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        neg = np.where(mask, z, -np.inf)
        mx = np.max(neg, axis=axis, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(mask, np.exp(z - mx), 0.0)
    else:
        e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    denom = e.sum(axis=axis, keepdims=True)
    y = e / np.where(denom > 0.0, denom, 1.0)

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        Tensor._acc(x, y * (g - dot))

    return Tensor._node(y, (x,), bw)


def layer_norm(x, weight, bias, eps=1e-5):
    """LayerNorm over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * weight.data + bias.data
    n = x.data.shape[-1]

    def bw(g):
        red = tuple(range(g.ndim - 1))
        Tensor._acc(weight, np.sum(g * xhat, axis=red))
        Tensor._acc(bias, np.sum(g, axis=red))
        gxh = g * weight.data
        s1 = gxh.sum(axis=-1, keepdims=True)
        s2 = np.sum(gxh * xhat, axis=-1, keepdims=True)
        Tensor._acc(x, (inv / n) * (n * gxh - s1 - xhat * s2))

    return Tensor._node(y, (x, weight, bias), bw)


def dropout(x, p, rng, training):
    """Inverted dropout using the given Generator; identity in eval mode."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def bw(g):
        Tensor._acc(x, g * keep)

    return Tensor._node(data, (x,), bw)


# ---------------------------------------------------------------------------
# parameters, layers, optimizer
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter registry with a seeded RNG for initialization.

    Names are dotted paths ("dtn.layers.0.pair.q.weight"); iteration follows
    insertion order so optimizer updates are deterministic.
    """

    def __init__(self, seed=0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._params = {}

    def param(self, name, shape, init):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init[0] == "uniform":
            data = self.rng.uniform(-init[1], init[1], size=shape).astype(self.dtype)
        elif init[0] == "normal":
            data = (self.rng.standard_normal(shape) * init[1]).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def num_params(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)


class Linear:
    """y = x @ W + b with W shaped (fan_in, fan_out)."""

    def __init__(self, store, name, fan_in, fan_out, bias=True, zero_init=False):
        bound = 1.0 / math.sqrt(fan_in)
        w_init = "zeros" if zero_init else ("uniform", bound)
        self.weight = store.param(f"{name}.weight", (fan_in, fan_out), w_init)
        self.bias = None
        if bias:
            b_init = "zeros" if zero_init else ("uniform", bound)
            self.bias = store.param(f"{name}.bias", (fan_out,), b_init)

    def __call__(self, x):
        y = x.matmul(self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm:
    def __init__(self, store, name, dim, eps=1e-5):
        self.weight = store.param(f"{name}.weight", (dim,), "ones")
        self.bias = store.param(f"{name}.bias", (dim,), "zeros")
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class MLP:
    """Stacked Linear layers with SiLU between; optional zero-init last layer."""

    def __init__(self, store, name, dims, zero_init_last=False):
        self.layers = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(store, f"{name}.{i}", din, dout, zero_init=zero_init_last and last)
            )

    def __call__(self, x):
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = x.silu()
        return x


def clip_grad_norm(store, max_norm):
    """Scale all grads so the global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


class Adam:
    def __init__(self, store, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        state = {"t": self.t}
        for k in self.m:
            state[f"m.{k}"] = self.m[k].copy()
            state[f"v.{k}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state[f"m.{k}"])
            self.v[k] = np.asarray(state[f"v.{k}"])


class EMA:
    """Exponential moving average of the parameters."""

    def __init__(self, store, decay=0.999):
        self.store = store
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in store.items()}
        self._backup = None

    def update(self):
        d = self.decay
        for k, p in self.store.items():
            self.shadow[k] = d * self.shadow[k] + (1.0 - d) * p.data

    def store_params(self):
        self._backup = {k: p.data.copy() for k, p in self.store.items()}

    def copy_to_params(self):
        for k, p in self.store.items():
            p.data = self.shadow[k].copy()

    def restore_params(self):
        if self._backup is None:
            raise RuntimeError("no stored parameters to restore")
        for k, p in self.store.items():
            p.data = self._backup[k]
        self._backup = None
