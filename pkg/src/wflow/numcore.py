"""Dense float64 tensors, a recording tape, and reverse-mode gradients.

Eager numpy evaluation with optional recording onto an explicit tape. The
primitive set is deliberately closed and small (add, mul, matmul, affine,
tanh, softplus, sum, mean, square, exp, log, concat, slice); every primitive
carries its own local partials, so one reverse sweep over a frozen tape
yields exactly one gradient per watched parameter. Any non-finite primitive
output aborts immediately -- silent NaN propagation is treated as a bug.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "ShapeError",
    "GradCheckReport",
    "add",
    "mul",
    "matmul",
    "affine",
    "tanh",
    "softplus",
    "tsum",
    "tmean",
    "square",
    "exp",
    "log",
    "concat",
    "slice_",
    "sigmoid",
    "record_forward",
    "grad",
    "check_gradient_fd",
    "check_loss_gradient_fd",
]


class NumericError(RuntimeError):
    """A primitive produced a NaN/Inf output, or a tape contract was violated."""

    def __init__(self, message, op=None, index=None):
        if op is not None:
            message = f"{message} (op '{op}' at tape index {index})"
        super().__init__(message)
        self.op = op
        self.index = index


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive; carries the op index."""

    def __init__(self, message, op=None, index=None):
        if op is not None:
            message = f"{message} (op '{op}' at tape index {index})"
        super().__init__(message)
        self.op = op
        self.index = index


def _as_c_array(value) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d, so go through asarray first
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense row-major float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data):
        self.data = _as_c_array(data)
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar. Subtraction and negation are expressed through the
    # closed primitive set (add + mul by -1) so the tape stays auditable.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class Node:
    """One primitive-operation record: op code, input node ids, output value."""

    op: str
    inputs: tuple
    value: np.ndarray
    meta: tuple


class Tape:
    """Append-only record of primitive ops, frozen before the reverse sweep.

    Nodes are stored in execution (hence topological) order. ``watch`` marks
    a leaf tensor as a parameter slot; ``grad`` later returns one gradient
    per slot, in watch order. A tape is single-writer while recording and
    immutable afterwards, so concurrent reverse sweeps are safe.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_slots: list[int] = []
        self.outputs: list[int] = []
        self.frozen = False
        self._prev = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None
        return False

    def _append(self, op, inputs, value, meta=()) -> int:
        if self.frozen:
            raise NumericError("tape is frozen; cannot record new ops")
        self.nodes.append(Node(op, inputs, value, meta))
        return len(self.nodes) - 1

    def _leaf(self, tensor: Tensor, kind: str) -> int:
        idx = self._append(kind, (), tensor.data)
        tensor.tape = self
        tensor.node = idx
        return idx

    def watch(self, tensor) -> Tensor:
        """Register a leaf tensor as a parameter slot requiring gradients."""
        tensor = as_tensor(tensor)
        if tensor.tape is self and tensor.node is not None:
            if tensor.node not in self.param_slots:
                self.param_slots.append(tensor.node)
            return tensor
        idx = self._leaf(tensor, "param")
        self.param_slots.append(idx)
        return tensor

    def mark_output(self, tensor: Tensor):
        if tensor.tape is not self or tensor.node is None:
            raise NumericError("output tensor was not produced on this tape")
        self.outputs.append(tensor.node)

    def freeze(self):
        self.frozen = True

    def ensure_index(self, tensor: Tensor) -> int:
        """Node id of ``tensor`` on this tape, registering a constant leaf if new."""
        if tensor.tape is self and tensor.node is not None:
            return tensor.node
        return self._leaf(tensor, "const")

    def replay(self, param_values=None):
        """Re-execute the recorded program, optionally with new parameter values.

        Returns the output values. With identical inputs the replay is
        bit-identical to the original run: same ops, same order, same dtypes.
        """
        values = [None] * len(self.nodes)
        new = dict(zip(self.param_slots, param_values)) if param_values else {}
        for i, node in enumerate(self.nodes):
            if node.op in ("param", "const"):
                values[i] = _as_c_array(new.get(i, node.value))
            else:
                args = [values[j] for j in node.inputs]
                values[i] = _FORWARD[node.op](args, node.meta)
        return [values[i] for i in self.outputs]


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


# ---------------------------------------------------------------------------
# primitive registry

_FORWARD = {}
_BACKWARD = {}


def _primitive(name, forward, backward):
    _FORWARD[name] = forward
    _BACKWARD[name] = backward


def _apply(op, tensors, meta=()) -> Tensor:
    tape = _ACTIVE
    index = len(tape.nodes) if tape is not None else None
    args = [t.data for t in tensors]
    try:
        with np.errstate(all="ignore"):
            value = _FORWARD[op](args, meta)
    except ValueError as err:
        raise ShapeError(str(err), op=op, index=index) from err
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite output", op=op, index=index)
    out = Tensor(value)
    if tape is not None:
        ids = tuple(tape.ensure_index(t) for t in tensors)
        out.node = tape._append(op, ids, out.data, meta)
        out.tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.reshape(g, shape)


def _expand(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


# add -----------------------------------------------------------------------

def _add_fwd(args, meta):
    return args[0] + args[1]


def _add_bwd(node, inputs, g):
    return (_unbroadcast(g, inputs[0].shape), _unbroadcast(g, inputs[1].shape))


_primitive("add", _add_fwd, _add_bwd)


# mul -----------------------------------------------------------------------

def _mul_fwd(args, meta):
    return args[0] * args[1]


def _mul_bwd(node, inputs, g):
    return (
        _unbroadcast(g * inputs[1], inputs[0].shape),
        _unbroadcast(g * inputs[0], inputs[1].shape),
    )


_primitive("mul", _mul_fwd, _mul_bwd)


# matmul (strictly 2-D) ------------------------------------------------------

def _matmul_fwd(args, meta):
    a, b = args
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(node, inputs, g):
    a, b = inputs
    return (g @ b.T, a.T @ g)


_primitive("matmul", _matmul_fwd, _matmul_bwd)


# affine: x @ w + b ----------------------------------------------------------

def _affine_fwd(args, meta):
    x, w, b = args
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"affine expects (m,k)@(k,n)+(n,), got {x.shape}, {w.shape}, {b.shape}")
    return x @ w + b


def _affine_bwd(node, inputs, g):
    x, w, _ = inputs
    return (g @ w.T, x.T @ g, g.sum(axis=0))


_primitive("affine", _affine_fwd, _affine_bwd)


# elementwise nonlinearities --------------------------------------------------

def _tanh_fwd(args, meta):
    return np.tanh(args[0])


def _tanh_bwd(node, inputs, g):
    return (g * (1.0 - node.value * node.value),)


_primitive("tanh", _tanh_fwd, _tanh_bwd)


def _softplus_fwd(args, meta):
    x = args[0]
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_bwd(node, inputs, g):
    return (g * _sigmoid_np(np.asarray(inputs[0], dtype=np.float64)),)


_primitive("softplus", _softplus_fwd, _softplus_bwd)


def _square_fwd(args, meta):
    return args[0] * args[0]


def _square_bwd(node, inputs, g):
    return (2.0 * inputs[0] * g,)


_primitive("square", _square_fwd, _square_bwd)


def _exp_fwd(args, meta):
    return np.exp(args[0])


def _exp_bwd(node, inputs, g):
    return (g * node.value,)


_primitive("exp", _exp_fwd, _exp_bwd)


def _log_fwd(args, meta):
    return np.log(args[0])


def _log_bwd(node, inputs, g):
    return (g / inputs[0],)


_primitive("log", _log_fwd, _log_bwd)


# reductions ------------------------------------------------------------------

def _sum_fwd(args, meta):
    return np.sum(args[0], axis=meta[0])


def _sum_bwd(node, inputs, g):
    return (_expand(np.asarray(g), inputs[0].shape, meta_axis(node)),)


def meta_axis(node):
    return node.meta[0]


_primitive("sum", _sum_fwd, _sum_bwd)


def _mean_fwd(args, meta):
    return np.mean(args[0], axis=meta[0])


def _mean_bwd(node, inputs, g):
    axis = meta_axis(node)
    count = inputs[0].size if axis is None else inputs[0].shape[axis]
    return (_expand(np.asarray(g) / count, inputs[0].shape, axis),)


_primitive("mean", _mean_fwd, _mean_bwd)


# concat / slice ---------------------------------------------------------------

def _concat_fwd(args, meta):
    return np.concatenate(args, axis=meta[0])


def _concat_bwd(node, inputs, g):
    axis = node.meta[0]
    splits = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


_primitive("concat", _concat_fwd, _concat_bwd)


def _slice_fwd(args, meta):
    axis, start, stop = meta
    index = [slice(None)] * args[0].ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(args[0][tuple(index)])


def _slice_bwd(node, inputs, g):
    axis, start, stop = node.meta
    out = np.zeros_like(inputs[0])
    index = [slice(None)] * out.ndim
    index[axis] = slice(start, stop)
    out[tuple(index)] = g
    return (out,)


_primitive("slice", _slice_fwd, _slice_bwd)


# ---------------------------------------------------------------------------
# public op wrappers

def add(a, b) -> Tensor:
    return _apply("add", (as_tensor(a), as_tensor(b)))


def mul(a, b) -> Tensor:
    return _apply("mul", (as_tensor(a), as_tensor(b)))


def matmul(a, b) -> Tensor:
    return _apply("matmul", (as_tensor(a), as_tensor(b)))


def affine(x, w, b) -> Tensor:
    """x @ w + b with a row-broadcast bias; the single dense-layer primitive."""
    return _apply("affine", (as_tensor(x), as_tensor(w), as_tensor(b)))


def tanh(x) -> Tensor:
    return _apply("tanh", (as_tensor(x),))


def softplus(x) -> Tensor:
    return _apply("softplus", (as_tensor(x),))


def tsum(x, axis=None) -> Tensor:
    return _apply("sum", (as_tensor(x),), (axis,))


def tmean(x, axis=None) -> Tensor:
    return _apply("mean", (as_tensor(x),), (axis,))


def square(x) -> Tensor:
    return _apply("square", (as_tensor(x),))


def exp(x) -> Tensor:
    return _apply("exp", (as_tensor(x),))


def log(x) -> Tensor:
    return _apply("log", (as_tensor(x),))


def concat(parts, axis=0) -> Tensor:
    return _apply("concat", tuple(as_tensor(p) for p in parts), (axis,))


def slice_(x, axis, start, stop) -> Tensor:
    return _apply("slice", (as_tensor(x),), (axis, start, stop))


def sigmoid(x) -> Tensor:
    """exp(-softplus(-x)): numerically stable and built from closed primitives."""
    return exp(mul(softplus(mul(x, -1.0)), -1.0))


# ---------------------------------------------------------------------------
# recording, reverse sweep, finite-difference check

def record_forward(program, inputs):
    """Run ``program`` on watched copies of ``inputs``, recording every primitive.

    Returns ``(outputs, tape)`` where outputs equal eager evaluation of the
    program and the frozen tape replays to bit-identical outputs.
    """
    tape = Tape()
    with tape:
        watched = [tape.watch(as_tensor(x)) for x in inputs]
        outs = program(*watched)
    if isinstance(outs, Tensor):
        outs = (outs,)
    for out in outs:
        tape.mark_output(out)
    tape.freeze()
    return list(outs), tape


def grad(tape: Tape, seed=None):
    """One reverse sweep: returns d(output)/d(slot) for every parameter slot.

    ``seed`` is the adjoint of the tape's single marked output and must match
    its shape (defaults to all-ones). Deterministic: accumulation follows
    fixed tape order.
    """
    if len(tape.outputs) != 1:
        raise NumericError(f"grad expects exactly one marked output, tape has {len(tape.outputs)}")
    out_id = tape.outputs[0]
    out_shape = tape.nodes[out_id].value.shape
    if seed is None:
        seed_val = np.ones(out_shape)
    else:
        seed_val = as_tensor(seed).data
        if seed_val.shape != out_shape:
            raise ShapeError(f"seed shape {seed_val.shape} != output shape {out_shape}")
    adjoints: list = [None] * len(tape.nodes)
    adjoints[out_id] = seed_val
    for i in range(out_id, -1, -1):
        node = tape.nodes[i]
        g = adjoints[i]
        if g is None or node.op in ("param", "const"):
            continue
        inputs = [tape.nodes[j].value for j in node.inputs]
        contribs = _BACKWARD[node.op](node, inputs, g)
        for j, contrib in zip(node.inputs, contribs):
            if adjoints[j] is None:
                adjoints[j] = contrib
            else:
                adjoints[j] = adjoints[j] + contrib
    results = []
    for slot in tape.param_slots:
        g = adjoints[slot]
        if g is None:
            g = np.zeros_like(tape.nodes[slot].value)
        results.append(Tensor(np.asarray(g, dtype=np.float64)))
    return results


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: int
    worst_coord: int
    rel_tol: float

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {state}: max rel err {self.max_rel_err:.3e} "
            f"(param {self.worst_param}, coord {self.worst_coord}, tol {self.rel_tol:.1e})"
        )


def check_gradient_fd(loss, params, rel_tol=1e-4) -> GradCheckReport:
    """Compare the tape gradient of a scalar loss against central differences.

    ``loss`` maps a list of Tensors to a scalar Tensor and must be evaluable
    at perturbed parameters. Central step is h = 1e-5 * (1 + |p|) per
    coordinate. Relative error uses a small floor so exactly-zero analytic
    and FD gradients agree instead of dividing by zero.
    """
    params = [as_tensor(p) for p in params]
    tape = Tape()
    with tape:
        watched = [tape.watch(Tensor(p.data.copy())) for p in params]
        out = loss(*watched)
    if out.data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {out.data.shape}")
    tape.mark_output(out)
    tape.freeze()
    analytic = [g.data for g in grad(tape)]

    work = [p.data.copy() for p in params]

    def eval_loss():
        value = loss(*[Tensor(w) for w in work])
        if not np.isfinite(value.data):
            raise NumericError("non-finite loss at perturbed point")
        return float(value.data)

    max_err, worst = 0.0, (0, 0)
    for pi, p in enumerate(work):
        flat = p.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            h = 1e-5 * (1.0 + abs(orig))
            flat[ci] = orig + h
            up = eval_loss()
            flat[ci] = orig - h
            down = eval_loss()
            flat[ci] = orig
            fd = (up - down) / (2.0 * h)
            a = analytic[pi].reshape(-1)[ci]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-2)
            if err > max_err:
                max_err, worst = err, (pi, ci)
    return GradCheckReport(max_err <= rel_tol, max_err, worst[0], worst[1], rel_tol)


def check_loss_gradient_fd(loss_fn, params, rel_tol=1e-4) -> GradCheckReport:
    """FD-check a loss that reports its own gradients.

    ``loss_fn() -> (value, grads)`` reads the current contents of the
    ``params`` arrays (e.g. a model's live parameter arrays), which are
    perturbed in place, coordinate by coordinate, with the same central
    scheme as check_gradient_fd.
    """
    value, analytic = loss_fn()
    if not np.isfinite(value):
        raise NumericError("non-finite loss at the base point")
    max_err, worst = 0.0, (0, 0)
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            h = 1e-5 * (1.0 + abs(orig))
            flat[ci] = orig + h
            up, _ = loss_fn()
            flat[ci] = orig - h
            down, _ = loss_fn()
            flat[ci] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite loss at perturbed point")
            fd = (up - down) / (2.0 * h)
            a = analytic[pi].reshape(-1)[ci]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-2)
            if err > max_err:
                max_err, worst = err, (pi, ci)
    return GradCheckReport(max_err <= rel_tol, max_err, worst[0], worst[1], rel_tol)
