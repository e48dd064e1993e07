"""Dense numeric core: seeded streams, a reverse-mode tape, small tanh MLPs,
an AdamW optimizer and a finite-difference gradient checker.

Everything runs in float64.  A :class:`Tape` records every operation that
involves at least one tracked :class:`Var`; nodes are appended in creation
order, so reverse iteration is already a valid topological order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class StateError(RuntimeError):
    """Raised when an object is used in a state that does not allow it."""


class DivergenceError(FloatingPointError):
    """Raised when an iterate or a loss becomes non-finite."""


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Seeded normal/uniform stream with named, deterministic children."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, purpose: str) -> "Rng":
        return Rng(self.seed, self.key + (zlib.crc32(purpose.encode()),))

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


# ---------------------------------------------------------------------------
# stable reductions


def logsumexp(v, axis=None):
    """``log(sum(exp(v)))`` with max subtraction.

    Works on plain arrays; see :func:`lse` for the tape-aware version.
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("logsumexp requires finite inputs")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=DTYPE)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# reverse-mode tape


class Tape:
    """Records operations for a single backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._leaves: list[tuple[Var, ParamStore, str]] = []
        self.done = False

    def _record(self, node: "Var") -> "Var":
        if self.done:
            raise StateError("tape already consumed by backward()")
        self.nodes.append(node)
        return node

    def param(self, store: "ParamStore", name: str) -> "Var":
        """Track parameter ``name``; its gradient lands in ``store``."""
        v = Var(store.value(name), self)
        self._record(v)
        self._leaves.append((v, store, name))
        return v

    def var(self, value) -> "Var":
        """Track an input array whose gradient should be readable afterwards."""
        return self._record(Var(np.asarray(value, dtype=DTYPE), self))

    def backward(self, loss: "Var") -> None:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise StateError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if self.done:
            raise StateError("tape already consumed by backward()")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        for v, store, name in self._leaves:
            if v.grad is not None:
                store.grad(name)[...] += v.grad
        self.done = True


def backward(loss: "Var") -> None:
    """Reverse-accumulate ``d loss / d param`` into the owning ParamStores."""
    if not isinstance(loss, Var) or loss.tape is None:
        raise StateError("loss is not on a tape")
    loss.tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Var:
    """A value on a tape; accumulates ``grad`` during backward."""

    __array_priority__ = 100
    __slots__ = ("value", "tape", "grad", "_backward")

    def __init__(self, value, tape: Tape | None = None, backward_fn=None):
        self.value = value
        self.tape = tape
        self.grad = None
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, reciprocal(o) if isinstance(o, Var) else 1.0 / np.asarray(o, dtype=DTYPE))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _node(value, parents_fn, *inputs) -> Var | np.ndarray:
    """Wrap ``value`` as a taped node if any input is tracked."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    out = Var(value, tape)
    out._backward = parents_fn
    return tape._record(out)


def detach(x) -> np.ndarray:
    return np.array(value_of(x), copy=True)


def add(a, b):
    av, bv = value_of(a), value_of(b)

    def bw(g):
        if isinstance(a, Var):
            a._acc(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._acc(_unbroadcast(g, bv.shape))

    return _node(av + bv, bw, a, b)


def sub(a, b):
    av, bv = value_of(a), value_of(b)

    def bw(g):
        if isinstance(a, Var):
            a._acc(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._acc(_unbroadcast(-g, bv.shape))

    return _node(av - bv, bw, a, b)


def mul(a, b):
    av, bv = value_of(a), value_of(b)

    def bw(g):
        if isinstance(a, Var):
            a._acc(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            b._acc(_unbroadcast(g * av, bv.shape))

    return _node(av * bv, bw, a, b)


def reciprocal(a):
    av = value_of(a)
    out = 1.0 / av

    def bw(g):
        a._acc(-g * out * out)

    return _node(out, bw, a)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes."""
    av, bv = value_of(a), value_of(b)
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def bw(g):
        if isinstance(a, Var):
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv)
            else:
                ga = g @ np.swapaxes(bv, -1, -2)
            a._acc(_unbroadcast(ga, av.shape))
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            elif bv.ndim == 1:
                gb = np.swapaxes(av, -1, -2) @ g[..., None]
                gb = gb[..., 0]
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            b._acc(_unbroadcast(gb, bv.shape))

    return _node(av @ bv, bw, a, b)


def einsum(spec: str, a, b):
    """Two-operand einsum; every index of an operand must appear elsewhere."""
    av, bv = value_of(a), value_of(b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")

    def bw(g):
        if isinstance(a, Var):
            a._acc(np.einsum(f"{out},{sb}->{sa}", g, bv))
        if isinstance(b, Var):
            b._acc(np.einsum(f"{out},{sa}->{sb}", g, av))

    return _node(np.einsum(spec, av, bv), bw, a, b)


def tanh(a):
    out = np.tanh(value_of(a))

    def bw(g):
        a._acc(g * (1.0 - out * out))

    return _node(out, bw, a)


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * value_of(a)))

    def bw(g):
        a._acc(g * out * (1.0 - out))

    return _node(out, bw, a)


def exp(a):
    out = np.exp(value_of(a))

    def bw(g):
        a._acc(g * out)

    return _node(out, bw, a)


def log(a):
    av = value_of(a)

    def bw(g):
        a._acc(g / av)

    return _node(np.log(av), bw, a)


def square(a):
    av = value_of(a)

    def bw(g):
        a._acc(2.0 * g * av)

    return _node(av * av, bw, a)


def clip(a, lo, hi):
    """Clamp; gradient passes only where the input is strictly inside."""
    av = value_of(a)
    inside = (av > lo) & (av < hi)

    def bw(g):
        a._acc(g * inside)

    return _node(np.clip(av, lo, hi), bw, a)


def total(a, axis=None, keepdims=False):
    av = value_of(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, av.shape))

    return _node(np.sum(av, axis=axis, keepdims=keepdims), bw, a)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(total(a, axis=axis, keepdims=keepdims), 1.0 / n)


def lse(a, axis=-1):
    """Tape-aware logsumexp along ``axis`` (keepdims=False)."""
    av = value_of(a)
    m = np.max(av, axis=axis, keepdims=True)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = np.exp(av - m) / s

    def bw(g):
        a._acc(np.expand_dims(g, axis) * w)

    return _node(out, bw, a)


def log_softmax(a, axis=-1):
    return sub(a, reshape(lse(a, axis=axis), value_of(a).shape[:-1] + (1,)))


def reshape(a, shape):
    av = value_of(a)

    def bw(g):
        a._acc(g.reshape(av.shape))

    return _node(av.reshape(shape), bw, a)


def concat(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            if isinstance(x, Var):
                x._acc(part)

    return _node(np.concatenate(vals, axis=axis), bw, *xs)


def take(a, idx):
    """Basic or advanced indexing; repeated indices accumulate."""
    av = value_of(a)

    def bw(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        a._acc(full)

    return _node(av[idx], bw, a)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 arrays with matching gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE, copy=True)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite initial value for {name!r}")
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._values if n.startswith(prefix)]

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=DTYPE)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape}")
        self._values[name][...] = arr

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def flat(self, names=None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([self._values[n].ravel() for n in names]) if names else np.zeros(0)

    def flat_grad(self, names=None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([self._grads[n].ravel() for n in names]) if names else np.zeros(0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self._values.items():
            out.add(n, v)
        return out


# ---------------------------------------------------------------------------
# small networks


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths ``sizes[0] -> ... -> sizes[-1]``; tanh between layers."""

    sizes: tuple[int, ...]
    out_act: str = "linear"  # "linear" or "tanh"

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]


def init_mlp(store: ParamStore, prefix: str, spec: MLPSpec, rng: Rng, scale: float = 1.0) -> None:
    for i, (m, n) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        store.add(f"{prefix}.W{i}", rng.normal((m, n)) * scale / np.sqrt(m))
        store.add(f"{prefix}.b{i}", np.zeros(n))


def mlp_forward(params, prefix: str, x, spec: MLPSpec):
    """Forward pass on a single vector or a batch (leading axes).

    ``params`` is either a ParamStore (values used as constants) or a
    mapping ``name -> Var | ndarray`` (as produced by :func:`bind`).
    """
    if value_of(x).shape[-1] != spec.n_in:
        raise ValueError(f"{prefix}: expected input width {spec.n_in}, got {value_of(x).shape[-1]}")
    get = params.value if isinstance(params, ParamStore) else params.__getitem__
    h = x
    last = len(spec.sizes) - 2
    for i in range(last + 1):
        h = add(matmul(h, get(f"{prefix}.W{i}")), get(f"{prefix}.b{i}"))
        if i < last or spec.out_act == "tanh":
            h = tanh(h)
    return h


def mlp_input_grad(store: ParamStore, prefix: str, x: np.ndarray, spec: MLPSpec, gout: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product ``gout^T d f(x)/dx`` for a batch, without a tape."""
    hs = [x]
    pre = []
    last = len(spec.sizes) - 2
    h = x
    for i in range(last + 1):
        a = h @ store.value(f"{prefix}.W{i}") + store.value(f"{prefix}.b{i}")
        pre.append(a)
        h = np.tanh(a) if (i < last or spec.out_act == "tanh") else a
        hs.append(h)
    g = gout
    for i in range(last, -1, -1):
        if i < last or spec.out_act == "tanh":
            g = g * (1.0 - hs[i + 1] ** 2)
        g = g @ store.value(f"{prefix}.W{i}").T
    return g


def bind(tape: Tape, store: ParamStore, names, frozen=False) -> dict:
    """Map parameter names to tape leaves (or raw arrays when ``frozen``)."""
    if frozen:
        return {n: store.value(n) for n in names}
    return {n: tape.param(store, n) for n in names}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    """Adam with decoupled weight decay over a fixed set of parameter names."""

    names: list[str]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, store: ParamStore, lr: float, names=None) -> None:
        """One update of ``names`` (default: every name in the group)."""
        if lr == 0.0:
            return
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n in self.names if names is None else names:
            g = store.grad(n)
            if n not in self.m:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = store.value(n)
            p -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    ok: bool
    max_rel_error: float
    worst: tuple[str, int] | None
    n_checked: int
    failures: list = field(default_factory=list)


def finite_diff_check(f, store: ParamStore, names=None, step=1e-5, tol=1e-4, floor=1e-6) -> GradCheckReport:
    """Compare ``backward`` gradients with central differences.

    ``f(tape, store)`` must build the loss on ``tape`` (binding parameters
    through ``tape.param``) and return the scalar Var.  The relative error
    per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    names = store.names() if names is None else list(names)
    store.zero_grad()
    tape = Tape()
    loss = f(tape, store)
    tape.backward(loss)
    analytic = {n: store.grad(n).copy() for n in names}

    def evaluate():
        return float(value_of(f(Tape(), store)))

    worst, worst_err, checked, failures = None, 0.0, 0, []
    for n in names:
        val = store.value(n)
        flat = val.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = evaluate()
            flat[i] = old - step
            fm = evaluate()
            flat[i] = old
            num = (fp - fm) / (2 * step)
            a = analytic[n].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (n, i)
            if err > tol:
                failures.append((n, i, a, num))
    store.zero_grad()
    return GradCheckReport(not failures, worst_err, worst, checked, failures)
