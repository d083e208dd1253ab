"""Dense float64 tensors with reverse-mode autodiff and FLOP instrumentation.

Every forward operation optionally records its cost into the active
``OpCounter``.  The counting convention is fixed and mirrored exactly by the
closed forms in :mod:`jarfuse.costmodel`:

* ``matmul`` of [m,k] @ [k,n]  ->  2*m*k*n   (one multiply-add = 2 FLOPs)
* ``softmax``                  ->  5 per element
* ``layer_norm``               ->  8 per element
* ``gelu``                     ->  8 per element
* ``cross_entropy``            ->  5 per logit

All remaining arithmetic (residual adds, bias adds, gate scalings, reshapes,
lookups) is below measurement resolution and is deliberately not recorded,
so architectures that differ only in such bookkeeping report identical FLOPs.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

SOFTMAX_FLOPS_PER_ELEM = 5
LAYER_NORM_FLOPS_PER_ELEM = 8
GELU_FLOPS_PER_ELEM = 8
CROSS_ENTROPY_FLOPS_PER_ELEM = 5
LN_EPS = 1e-5

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented operation precondition was violated."""


class DeterminismError(RuntimeError):
    """A function under check returned different values on repeat evaluation."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator used for every initialization in the package."""
    return np.random.default_rng(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------

_state = threading.local()


def _counter_stack() -> list["OpCounter"]:
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = []
        _state.counters = stack
    return stack


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (value-only evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class OpCounter:
    """Accumulates exact FLOP counts for the forward passes it encloses.

    A counter is owned by one pass; use it as a context manager.  Counters
    nest: an op records into every counter currently active on this thread,
    so a per-forward counter and a whole-run counter can coexist.
    """

    def __init__(self):
        self.total_flops = 0
        self.per_op_kind: dict[str, int] = {}

    def record(self, kind: str, flops: int) -> None:
        self.total_flops += flops
        self.per_op_kind[kind] = self.per_op_kind.get(kind, 0) + flops

    def __enter__(self) -> "OpCounter":
        _counter_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _counter_stack().pop()

    def __repr__(self) -> str:
        return f"OpCounter(total={self.total_flops}, per_op={self.per_op_kind})"


def _record(kind: str, flops: int) -> None:
    stack = getattr(_state, "counters", None)
    if stack:
        for counter in stack:
            counter.record(kind, flops)


# Test hook: when set to one of {"matmul", "softmax", "layer_norm", "gelu"},
# that op's backward scales its incoming gradient, so gradient checks must
# fail (negative control for the checking machinery itself).
_backward_fault: str | None = None


def set_backward_fault(op: str | None) -> None:
    global _backward_fault
    _backward_fault = op


def _faulted(g: np.ndarray, kind: str) -> np.ndarray:
    if _backward_fault == kind:
        return g * 1.01
    return g


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense float64 array node in a reverse-mode autodiff graph.

    Data is immutable by convention after construction; only ``grad`` is
    accumulated in place during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all shapes must match exactly (no silent broadcasting).
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return mul_const(self, -1.0)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        The receiver must hold a single value.  Gradients accumulate (sum)
        over fan-out.  Traversal is an iterative reverse topological order;
        recursion is avoided because fused models chain thousands of nodes.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    # `owned` marks a freshly allocated array that may be adopted without a
    # defensive copy (aliasing a shared buffer into two grads would corrupt
    # later accumulations).
    if t.requires_grad or t._parents:
        if t.grad is None:
            t.grad = g if owned else g.copy()
        else:
            t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if getattr(_state, "grad_enabled", True):
        for p in parents:
            if p.requires_grad or p._parents:
                out._parents = parents
                out._backprop = backprop
                return out
    out._parents = ()
    out._backprop = None
    return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; records 2*m*n*k FLOPs."""
    ash, bsh = a.data.shape, b.data.shape
    if len(ash) != 2 or len(bsh) != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {ash} and {bsh}")
    if ash[1] != bsh[0]:
        raise DimensionError(f"matmul shape mismatch: {ash} @ {bsh}")
    m, k = ash
    n = bsh[1]
    _record("matmul", 2 * m * n * k)
    out_data = a.data @ b.data

    def backprop(g):
        g = _faulted(g, "matmul")
        _accumulate(a, g @ b.data.T, owned=True)
        _accumulate(b, a.data.T @ g, owned=True)

    return _make(out_data, (a, b), backprop)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backprop(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backprop(g):
        _accumulate(a, g)
        _accumulate(b, -g, owned=True)

    return _make(a.data - b.data, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backprop(g):
        _accumulate(a, g * b.data, owned=True)
        _accumulate(b, g * a.data, owned=True)

    return _make(a.data * b.data, (a, b), backprop)


def mul_const(x: Tensor, c: float) -> Tensor:
    def backprop(g):
        _accumulate(x, g * c, owned=True)

    return _make(x.data * c, (x,), backprop)


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of x by a single-value tensor s."""
    if s.data.size != 1:
        raise DimensionError(f"scale gate must hold one value, got shape {s.shape}")
    sval = s.data.reshape(-1)[0]

    def backprop(g):
        _accumulate(x, g * sval, owned=True)
        _accumulate(s, np.array([(g * x.data).sum()]).reshape(s.shape), owned=True)

    return _make(x.data * sval, (x, s), backprop)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backprop(g):
        _accumulate(x, g * (1.0 - y * y), owned=True)

    return _make(y, (x,), backprop)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU; records 8 FLOPs per element."""
    _record("gelu", GELU_FLOPS_PER_ELEM * x.data.size)
    xd = x.data
    sq = xd * xd
    t = np.tanh(_SQRT_2_OVER_PI * (xd + _GELU_CUBIC * sq * xd))
    y = 0.5 * xd * (1.0 + t)

    def backprop(g):
        g = _faulted(g, "gelu")
        sech2 = 1.0 - t * t
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * sq)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner), owned=True)

    return _make(y, (x,), backprop)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {x.data.shape}")
    _record("softmax", SOFTMAX_FLOPS_PER_ELEM * x.data.size)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backprop(g):
        g = _faulted(g, "softmax")
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, y * (g - dot), owned=True)

    return _make(y, (x,), backprop)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias.

    Epsilon is fixed at 1e-5.  Records 8 FLOPs per element.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm needs a 2-D tensor, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine mismatch: x {x.data.shape}, gain {gain.data.shape}, "
            f"bias {bias.data.shape}"
        )
    _record("layer_norm", LAYER_NORM_FLOPS_PER_ELEM * x.data.size)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backprop(g):
        g = _faulted(g, "layer_norm")
        dxhat = g * gain.data
        dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv**3
        dmu = -(dxhat.sum(axis=1, keepdims=True)) * inv + dvar * (
            -2.0
        ) * xc.mean(axis=1, keepdims=True)
        dx = dxhat * inv + dvar * (2.0 / d) * xc + dmu / d
        _accumulate(x, dx, owned=True)
        _accumulate(gain, (g * xhat).sum(axis=0), owned=True)
        _accumulate(bias, g.sum(axis=0), owned=True)

    return _make(y, (x, gain, bias), backprop)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.data.shape}")

    def backprop(g):
        _accumulate(x, g.T)

    return _make(np.ascontiguousarray(x.data.T), (x,), backprop)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backprop(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backprop)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise DimensionError(
                f"concat_rows column mismatch: {[p.shape for p in parts]}"
            )
    sizes = [p.shape[0] for p in parts]

    def backprop(g):
        offset = 0
        for p, rows in zip(parts, sizes):
            _accumulate(p, g[offset : offset + rows])
            offset += rows

    return _make(
        np.concatenate([p.data for p in parts], axis=0), tuple(parts), backprop
    )


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {[p.shape for p in parts]}"
            )
    sizes = [p.shape[1] for p in parts]

    def backprop(g):
        offset = 0
        for p, cols in zip(parts, sizes):
            _accumulate(p, g[:, offset : offset + cols])
            offset += cols

    return _make(
        np.concatenate([p.data for p in parts], axis=1), tuple(parts), backprop
    )


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.data.shape[1]):
        raise DimensionError(f"slice_cols[{lo}:{hi}] invalid for shape {x.data.shape}")

    def backprop(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accumulate(x, full, owned=True)

    return _make(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backprop)


def embedding_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table by integer id (scatter-add backward)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ContractError(f"token id out of range for table {table.shape}")

    def backprop(g):
        if table.requires_grad or table._parents:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(table.data[ids], (table,), backprop)


def add_row_vector(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-D vector to every row of a [q, D] tensor."""
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise DimensionError(f"add_row_vector mismatch: {x.shape} + {v.shape}")

    def backprop(g):
        _accumulate(x, g)
        _accumulate(v, g.sum(axis=0), owned=True)

    return _make(x.data + v.data, (x, v), backprop)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows of a [q, D] tensor, keeping a [1, D] result."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-D tensor, got {x.shape}")
    q = x.shape[0]

    def backprop(g):
        _accumulate(x, np.repeat(g, q, axis=0) / q, owned=True)

    return _make(x.data.mean(axis=0, keepdims=True), (x,), backprop)


def sum_all(x: Tensor) -> Tensor:
    def backprop(g):
        _accumulate(x, np.full_like(x.data, g.reshape(-1)[0]), owned=True)

    return _make(np.array([x.data.sum()]), (x,), backprop)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; closed-form softmax-onehot backward."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, a = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= a:
        raise ContractError(f"label out of range for {a} classes")
    _record("cross_entropy", CROSS_ENTROPY_FLOPS_PER_ELEM * logits.size)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    # log-sum-exp form: the sum is >= 1, so the log never sees zero.
    nll = np.log(e.sum(axis=1)) - shifted[np.arange(b), labels]
    loss = np.array([nll.mean()])

    def backprop(g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        _accumulate(logits, d * (g.reshape(-1)[0] / b), owned=True)

    return _make(loss, (logits,), backprop)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors with unique names and deterministic order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def value_count(self) -> int:
        return sum(t.size for t in self._params.values())


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class GradCheckEntry:
    __slots__ = ("name", "max_rel_err", "worst_index")

    def __init__(self, name: str, max_rel_err: float, worst_index: int):
        self.name = name
        self.max_rel_err = max_rel_err
        self.worst_index = worst_index


class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric grads."""

    def __init__(self, entries: list[GradCheckEntry], tol: float):
        self.entries = entries
        self.tol = tol

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]


def grad_check(
    f,
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` to central differences.

    ``f`` must be deterministic (verified by repeat evaluation) and close over
    the parameters in ``store``.  Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) per element.
    """
    if not (0.0 < h <= 1e-2):
        raise ContractError(f"finite-difference step must be in (0, 1e-2], got {h}")
    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise DeterminismError(
            f"function returned {v1!r} then {v2!r} on repeat evaluation"
        )

    store.zero_grad()
    loss = f()
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in store.items()
    }

    check = names if names is not None else store.names()
    entries = []
    for name in check:
        t = store[name]
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        max_err = 0.0
        worst = 0
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                denom = max(abs(a[i]), abs(numeric), 1e-8)
                err = abs(a[i] - numeric) / denom
                if err > max_err:
                    max_err = err
                    worst = i
        entries.append(GradCheckEntry(name, max_err, worst))
    return GradCheckReport(entries, tol)
