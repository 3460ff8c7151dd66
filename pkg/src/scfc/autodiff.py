"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model component in this package is built from the ops here, so one
finite-difference checker (`grad_check`) can cover the whole pipeline.
The design follows the usual closure-tape approach: each op records its
parents and a backward closure on the output tensor; `backward()` walks the
graph in reverse topological order and accumulates gradients additively.

Float64 everywhere: gradient checks are the primary acceptance mechanism
and need the headroom.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block. Forward values are unchanged."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d float64 array with an optional gradient buffer and tape node.

    Tensors are treated as immutable values once created; the only sanctioned
    mutations are gradient accumulation during backward() and in-place
    parameter updates by the optimizer (which never touch recorded tapes).
    A tape may be backward()-ed once; parameter .grad buffers accumulate
    across tapes until explicitly zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _op(cls, data, parents, backward):
        """Build an op output; records the tape only if grad is live."""
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- graph walk ---------------------------------------------------------

    def backward(self):
        """Populate grads of every reachable tensor with d(self)/d(tensor)."""
        if self.data.size != 1:
            raise ValueError("backward root must be a scalar, got shape %r" % (self.shape,))
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:  # iterative DFS; graphs get deep along timesteps
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    # -- conveniences -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_operand(other):
    """Tensor operand or a plain numeric constant (kept off the tape)."""
    if isinstance(other, Tensor):
        return other, None
    arr = np.asarray(other, dtype=np.float64)
    return None, arr


def _check_same_shape(a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b):
    bt, bc = _as_operand(b)
    if bt is None:
        return Tensor._op(a.data + bc, (a,), lambda g, a=a: a._accum(_unbroadcast(g, a.shape)))
    _check_same_shape(a.data, bt.data)

    def back(g, a=a, bt=bt):
        a._accum(_unbroadcast(g, a.data.shape))
        bt._accum(_unbroadcast(g, bt.data.shape))

    return Tensor._op(a.data + bt.data, (a, bt), back)


def sub(a: Tensor, b):
    bt, bc = _as_operand(b)
    if bt is None:
        return Tensor._op(a.data - bc, (a,), lambda g, a=a: a._accum(_unbroadcast(g, a.shape)))
    _check_same_shape(a.data, bt.data)

    def back(g, a=a, bt=bt):
        a._accum(_unbroadcast(g, a.data.shape))
        bt._accum(_unbroadcast(-g, bt.data.shape))

    return Tensor._op(a.data - bt.data, (a, bt), back)


def mul(a: Tensor, b):
    bt, bc = _as_operand(b)
    if bt is None:
        return Tensor._op(a.data * bc, (a,), lambda g, a=a, bc=bc: a._accum(_unbroadcast(g * bc, a.shape)))
    _check_same_shape(a.data, bt.data)

    def back(g, a=a, bt=bt):
        a._accum(_unbroadcast(g * bt.data, a.data.shape))
        bt._accum(_unbroadcast(g * a.data, bt.data.shape))

    return Tensor._op(a.data * bt.data, (a, bt), back)


def _unbroadcast(g, shape):
    """Reduce a gradient back to `shape` after scalar broadcasting."""
    if g.shape == tuple(shape):
        return g
    if np.prod(shape, dtype=int) == 1:
        return np.sum(g).reshape(shape)
    raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        def back(g, a=a, b=b):
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)
    elif ad.ndim == 2 and bd.ndim == 1:
        def back(g, a=a, b=b):
            a._accum(np.outer(g, b.data))
            b._accum(a.data.T @ g)
    elif ad.ndim == 1 and bd.ndim == 1:
        def back(g, a=a, b=b):
            a._accum(g * b.data)
            b._accum(g * a.data)
    else:
        raise ValueError(f"unsupported matmul ranks: {ad.ndim} @ {bd.ndim}")
    return Tensor._op(ad @ bd, (a, b), back)


def transpose(a: Tensor):
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return Tensor._op(a.data.T, (a,), lambda g, a=a: a._accum(g.T))


def scale_rows(m: Tensor, v: Tensor):
    """out[i, j] = m[i, j] * v[i] (column-broadcast elementwise product)."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[0] != v.data.shape[0]:
        raise ValueError(f"scale_rows shapes: {m.shape} vs {v.shape}")

    def back(g, m=m, v=v):
        m._accum(g * v.data[:, None])
        v._accum(np.sum(g * m.data, axis=1))

    return Tensor._op(m.data * v.data[:, None], (m, v), back)


def add_rowvec(m: Tensor, v: Tensor):
    """out[i, j] = m[i, j] + v[j] (per-row bias add)."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ValueError(f"add_rowvec shapes: {m.shape} vs {v.shape}")

    def back(g, m=m, v=v):
        m._accum(g)
        v._accum(np.sum(g, axis=0))

    return Tensor._op(m.data + v.data[None, :], (m, v), back)


# -- nonlinearities ---------------------------------------------------------

def tanh(a: Tensor):
    out_data = np.tanh(a.data)
    return Tensor._op(out_data, (a,), lambda g, a=a, y=out_data: a._accum(g * (1.0 - y * y)))


def sigmoid(a: Tensor):
    x = a.data
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))  # exponent is never positive -> no overflow
    out_data = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._op(out_data, (a,), lambda g, a=a, y=out_data: a._accum(g * y * (1.0 - y)))


def relu(a: Tensor):
    mask = a.data > 0
    return Tensor._op(a.data * mask, (a,), lambda g, a=a, m=mask: a._accum(g * m))


def exp(a: Tensor):
    out_data = np.exp(a.data)
    return Tensor._op(out_data, (a,), lambda g, a=a, y=out_data: a._accum(g * y))


def log(a: Tensor):
    return Tensor._op(np.log(a.data), (a,), lambda g, a=a: a._accum(g / a.data))


def power(a: Tensor, p: float):
    """Elementwise a**p for a constant exponent."""
    out_data = a.data ** p
    return Tensor._op(out_data, (a,), lambda g, a=a, p=p: a._accum(g * p * a.data ** (p - 1.0)))


def clamp(a: Tensor, lo, hi):
    """Clip values into [lo, hi]; gradient is identity inside, zero outside."""
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._op(out_data, (a,), lambda g, a=a, m=mask: a._accum(g * m))


def smooth_l1(a: Tensor):
    """Elementwise smooth-L1: 0.5*x^2 for |x|<1, |x|-0.5 otherwise."""
    x = a.data
    inner = np.abs(x) < 1.0
    out_data = np.where(inner, 0.5 * x * x, np.abs(x) - 0.5)
    return Tensor._op(out_data, (a,),
                      lambda g, a=a, x=x, m=inner: a._accum(g * np.where(m, x, np.sign(x))))


# -- softmax family (vectors) ------------------------------------------------

def softmax(a: Tensor):
    """Stable softmax of a vector: max-subtraction, output sums to 1.

    The denominator sums sorted addends, so the output is bitwise equivariant
    under permutations of the input (needed for permutation-invariance
    guarantees downstream).
    """
    x = a.data
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax expects a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax input contains NaN/Inf")
    e = np.exp(x - np.max(x))
    s = e / np.sum(np.sort(e))

    def back(g, a=a, s=s):
        a._accum(s * (g - np.dot(g, s)))

    return Tensor._op(s, (a,), back)


def log_softmax(a: Tensor):
    x = a.data
    if x.ndim != 1 or x.size == 0:
        raise ValueError("log_softmax expects a non-empty vector")
    shifted = x - np.max(x)
    lse = np.log(np.sum(np.exp(shifted)))
    out_data = shifted - lse

    def back(g, a=a, y=out_data):
        a._accum(g - np.exp(y) * np.sum(g))

    return Tensor._op(out_data, (a,), back)


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None):
    if axis is None:
        return Tensor._op(np.sum(a.data).reshape(()), (a,),
                          lambda g, a=a: a._accum(np.broadcast_to(g, a.data.shape)))
    out_data = np.sum(a.data, axis=axis)

    def back(g, a=a, axis=axis):
        a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return Tensor._op(out_data, (a,), back)


def mean(a: Tensor, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def sorted_sum(a: Tensor, axis: int = 0):
    """Column/row sum over pre-sorted addends.

    The result depends only on the multiset of values along the reduced axis,
    which makes reductions over region rows bitwise invariant to row order.
    Gradient is the ordinary sum gradient.
    """
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ValueError(f"sorted_sum expects a matrix and axis 0/1, got {a.shape}")
    out_data = np.sum(np.sort(a.data, axis=axis), axis=axis)

    def back(g, a=a, axis=axis):
        a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return Tensor._op(out_data, (a,), back)


def prod(a: Tensor, axis=None):
    """Product reduction; 1-D to scalar, 2-D along axis 0 or 1.

    The gradient uses exclusive left/right cumulative products, which stays
    exact even when entries are 0.
    """
    if a.data.ndim == 1:
        x = a.data.reshape(1, -1)
        restore = lambda full: full.reshape(a.data.shape)
        finish = lambda out: out.reshape(())
    elif a.data.ndim == 2 and axis in (0, 1):
        x = a.data if axis == 1 else a.data.T
        restore = (lambda full: full) if axis == 1 else (lambda full: full.T)
        finish = lambda out: out
    else:
        raise ValueError(f"prod: unsupported shape {a.shape} with axis {axis}")
    n = x.shape[1]
    left = np.ones_like(x)
    right = np.ones_like(x)
    if n > 1:
        np.cumprod(x[:, :-1], axis=1, out=left[:, 1:])
        right[:, :-1] = np.cumprod(x[:, :0:-1], axis=1)[:, ::-1]
    partial = left * right  # partial[i, j] = product of row i excluding column j

    def back(g, a=a, partial=partial, restore=restore):
        a._accum(restore(np.asarray(g).reshape(-1, 1) * partial))

    return Tensor._op(finish(np.prod(x, axis=1)), (a,), back)


# -- shape ops -----------------------------------------------------------------

def reshape(a: Tensor, shape):
    return Tensor._op(a.data.reshape(shape), (a,),
                      lambda g, a=a: a._accum(g.reshape(a.data.shape)))


def concat(parts):
    """Concatenate 1-D tensors."""
    parts = list(parts)
    if not parts or any(p.data.ndim != 1 for p in parts):
        raise ValueError("concat expects a non-empty list of vectors")
    sizes = [p.data.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g, parts=parts, offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[lo:hi])

    return Tensor._op(np.concatenate([p.data for p in parts]), tuple(parts), back)


def slice1d(a: Tensor, start: int, stop: int):
    if a.data.ndim != 1:
        raise ValueError("slice1d expects a vector")

    def back(g, a=a, start=start, stop=stop):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accum(full)

    return Tensor._op(a.data[start:stop].copy(), (a,), back)


def pick(a: Tensor, index: int):
    """Scalar element of a vector, differentiable."""
    if a.data.ndim != 1:
        raise ValueError("pick expects a vector")

    def back(g, a=a, index=index):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accum(full)

    return Tensor._op(np.asarray(a.data[index]), (a,), back)


def take_columns(m: Tensor, ids):
    """Gather columns m[:, ids]; duplicate ids accumulate gradients."""
    ids = np.asarray(ids, dtype=np.intp)
    out_data = m.data[:, ids]

    def back(g, m=m, ids=ids):
        gm = np.zeros_like(m.data)
        np.add.at(gm.T, ids, g.T)
        m._accum(gm)

    return Tensor._op(out_data, (m,), back)


def take_rows(m: Tensor, ids):
    ids = np.asarray(ids, dtype=np.intp)
    out_data = m.data[ids]

    def back(g, m=m, ids=ids):
        gm = np.zeros_like(m.data)
        np.add.at(gm, ids, g)
        m._accum(gm)

    return Tensor._op(out_data, (m,), back)


def column(m: Tensor, j: int):
    """Single column of a matrix as a vector."""
    return reshape(take_columns(m, [j]), (m.data.shape[0],))


def dropout(a: Tensor, rate: float, rng: np.random.Generator):
    """Seeded inverted-scaling dropout; caller disables it during evaluation."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return Tensor._op(a.data * mask, (a,), lambda g, a=a, m=mask: a._accum(g * m))


def conv3x3(fmap: Tensor, weight: Tensor, bias: Tensor):
    """3x3 same-padding convolution over an HxWxC map; weight is (3,3,C,M)."""
    x = fmap.data
    w = weight.data
    if x.ndim != 3 or w.shape[:3] != (3, 3, x.shape[2]):
        raise ValueError(f"conv3x3 shapes: map {x.shape}, weight {w.shape}")
    hgt, wid, _ = x.shape
    m = w.shape[3]
    padded = np.zeros((hgt + 2, wid + 2, x.shape[2]))
    padded[1:-1, 1:-1] = x
    out_data = np.broadcast_to(bias.data, (hgt, wid, m)).copy()
    for dy in range(3):
        for dx in range(3):
            out_data += padded[dy:dy + hgt, dx:dx + wid] @ w[dy, dx]

    def back(g, fmap=fmap, weight=weight, bias=bias, padded=padded, hgt=hgt, wid=wid):
        gw = np.zeros_like(weight.data)
        gp = np.zeros_like(padded)
        for dy in range(3):
            for dx in range(3):
                patch = padded[dy:dy + hgt, dx:dx + wid]
                gw[dy, dx] = np.einsum("hwc,hwm->cm", patch, g)
                gp[dy:dy + hgt, dx:dx + wid] += g @ weight.data[dy, dx].T
        weight._accum(gw)
        bias._accum(np.sum(g, axis=(0, 1)))
        fmap._accum(gp[1:-1, 1:-1])

    return Tensor._op(out_data, (fmap, weight, bias), back)


# -- parameters, init, optimizer ---------------------------------------------


def uniform_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator):
    """Symmetric uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Ordered name -> trainable Tensor map; iteration order is insertion order."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def tensors(self):
        return self._entries.values()

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None

    def value_count(self) -> int:
        return sum(t.data.size for t in self._entries.values())


class Adam:
    """Bias-corrected Adam over a ParameterStore; grads are zeroed after a step."""

    def __init__(self, store: ParameterStore, learning_rate=1e-4,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.store = store
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.second_moment = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self):
        for name, t in self.store.items():
            if t.grad is None:
                raise ValueError(f"adam step with missing grad for parameter {name!r}")
        self.step_count += 1
        t_cnt = self.step_count
        bc1 = 1.0 - self.beta1 ** t_cnt
        bc2 = 1.0 - self.beta2 ** t_cnt
        for name, p in self.store.items():
            g = p.grad
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
        self.store.zero_grads()


def clip_global_norm(store: ParameterStore, max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm; returns the factor."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive: {max_norm}")
    total = 0.0
    for name, t in store.items():
        if t.grad is None:
            raise ValueError(f"clip_global_norm with missing grad for parameter {name!r}")
        total += float(np.sum(t.grad * t.grad))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for t in store.tensors():
        t.grad = t.grad * factor
    return factor


def grad_check(f, store: ParameterStore, eps: float = 1e-5) -> float:
    """Max relative error between backward() grads and central differences.

    `f` must be a deterministic scalar-Tensor-valued callable of the current
    store contents (no unseeded randomness); each coordinate is perturbed by
    +/-eps in turn and restored exactly.
    """
    if not (1e-8 <= eps <= 1e-3):
        raise ValueError(f"eps out of range [1e-8, 1e-3]: {eps}")
    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise ValueError("grad_check requires a deterministic objective "
                         "(two evaluations differed; is unseeded dropout active?)")
    store.zero_grads()
    loss = f()
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in store.items()}
    worst = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            with no_grad():
                fp = f().item()
            flat[k] = orig - eps
            with no_grad():
                fm = f().item()
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[k] - numeric) / max(1.0, abs(gflat[k]), abs(numeric))
            if err > worst:
                worst = err
    store.zero_grads()
    return worst
