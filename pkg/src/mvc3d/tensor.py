"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record backward rules while a :class:`Tape` is active::

    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
    grads = backward(tape, loss)

Outside a tape every op is a plain numpy computation, which keeps inference
cheap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_MAGIC = b"MVT1"
_DTYPE_TAGS = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "name")

    _next_id = 0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        Tensor._next_id += 1
        self._id = Tensor._next_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Skips the defensive copy for op outputs.
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        # ascontiguousarray would promote 0-d arrays to 1-d
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        Tensor._next_id += 1
        t._id = Tensor._next_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar. Broadcasting rules are those of the named ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str = ""


@dataclass
class Tape:
    """Append-only record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, rule) -> None:
        self._produced[output._id] = len(self.nodes)
        self.nodes.append(Node(tuple(inputs), output, rule, op))

    def __contains__(self, t: Tensor) -> bool:
        return t._id in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []
_KINK_STACK: list[list] = []


def note_branch(pattern: np.ndarray) -> None:
    """Record a piecewise op's branch pattern (relu mask, pool argmax)
    while a finite-difference check is watching."""
    if _KINK_STACK:
        _KINK_STACK[-1].append(pattern.tobytes())


def _branch_signature(f, x: "Tensor") -> tuple:
    _KINK_STACK.append([])
    try:
        value = float(f(x).data)
    finally:
        sig = tuple(_KINK_STACK.pop())
    return value, sig


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule) -> Tensor:
    """Wrap ``out_data`` and register ``rule`` if any input needs a gradient.

    ``rule(grad_out)`` returns one gradient array (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, rule)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse pass of ``tape`` from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf tensor (one not
    produced on the tape) that requires one; the returned dict maps tensor
    ids to those gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss tensor was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    stop = tape._produced[loss._id]
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(node.output._id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            prev = grads.get(t._id)
            grads[t._id] = gi if prev is None else prev + gi
    # Whatever remains belongs to leaves (tensors not produced on the tape).
    leaves: dict[int, np.ndarray] = {}
    for node in tape.nodes[: stop + 1]:
        for t in node.inputs:
            if t._id in grads and t._id not in leaves:
                g = grads[t._id]
                t.grad = g.copy() if t.grad is None else t.grad + g
                leaves[t._id] = t.grad
    return leaves


# --------------------------------------------------------------------------
# Elementwise ops
# --------------------------------------------------------------------------


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("add_scalar", (a,), a.data + float(b), lambda g: (g,))
    _check_same("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("sub_scalar", (a,), a.data - float(b), lambda g: (g,))
    _check_same("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # derivative at exactly 0 is 0
    note_branch(mask)
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if op_kind == "relu":
        return relu(a)
    if op_kind not in ops:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return ops[op_kind](a, b)


# --------------------------------------------------------------------------
# Linear algebra and shape ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def reshape(t: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"reshape: cannot view {t.shape} ({t.size} elements) as {new_shape}")
    old = t.shape
    return record("reshape", (t,), t.data.reshape(new_shape), lambda g: (g.reshape(old),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (t,), np.transpose(t.data, axes), lambda g: (np.transpose(g, inv),))


def reduce_sum(t: Tensor, axes=None) -> Tensor:
    shape = t.shape
    if axes is None:
        axes = tuple(range(t.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % t.ndim for a in axes) if t.ndim else ()
    out = t.data.sum(axis=axes) if axes else t.data.copy()

    def rule(g):
        g = np.asarray(g)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return record("reduce_sum", (t,), np.asarray(out, dtype=t.data.dtype), rule)


def sum_squares(t: Tensor) -> Tensor:
    d = t.data
    return record("sum_squares", (t,), np.asarray(np.vdot(d, d)), lambda g: (2.0 * float(g) * d,))


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between the taped gradient and central differences.

    Error per coordinate is ``|a - n| / max(1e-12, |a|, |n|)``. A coordinate
    is skipped as a kink when nudging it by ``+-eps`` changes the branch
    taken by any relu or max-pool inside ``f``. ``coords`` restricts the
    check to a subset of flat indices.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    _KINK_STACK.append([])
    try:
        with Tape() as tape:
            out = f(probe)
    finally:
        base_sig = tuple(_KINK_STACK.pop())
    if out.size != 1:
        raise ShapeError(f"f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise ValueError("f(x) is not finite")
    if out in tape:
        backward(tape, out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.reshape(-1)
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp, sig_p = _branch_signature(f, Tensor(base))
        flat[i] = orig - eps
        fm, sig_m = _branch_signature(f, Tensor(base))
        flat[i] = orig
        if sig_p != base_sig or sig_m != base_sig:
            continue
        num = (fp - fm) / (2 * eps)
        an = float(analytic[i])
        err = abs(an - num) / max(1e-12, abs(num), abs(an))
        if not np.isfinite(err):
            return float("inf")
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Encode as ``MVT1 | dtype u8 | rank u32 | extents u64... | raw data`` (little-endian)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    head = _MAGIC + struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one block starting at ``offset``; returns (tensor, next offset)."""
    if buf[offset : offset + 4] != _MAGIC:
        raise ValueError(f"bad tensor magic at byte {offset}")
    tag, rank = struct.unpack_from("<BI", buf, offset + 4)
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    pos = offset + 9
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _TAG_DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64))
    nbytes = n * dtype.itemsize
    if pos + nbytes > len(buf):
        raise ValueError("truncated tensor block")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(shape)
    return Tensor(arr, dtype=dtype.newbyteorder("=")), pos + nbytes
