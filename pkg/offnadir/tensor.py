"""
Dense tensors with reverse-mode gradients, seeded sampling and the ``.ten``
file format.

Every differentiable operation records its parents and a vector-Jacobian
product closure on the output tensor; :meth:`Tensor.backward` walks that tape
in reverse topological order.  Operations never broadcast: operands must have
identical shapes (python scalars excepted).
"""
from __future__ import annotations

import contextlib
import io
import logging
import pathlib
import struct
import threading
from collections.abc import Callable, Iterable, Sequence
from typing import Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

AnyPath = Union[pathlib.Path, str]
Operand = Union["Tensor", np.ndarray, float, int]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

TEN_MAGIC = b"TENS"
TEN_VERSION = 1
_TEN_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TEN_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where only finite values are allowed."""


class FormatError(ValueError):
    """A serialized file does not follow its declared format."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _as_float_array(data) -> np.ndarray:
    array = np.asarray(data)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float32)
    return array


class Tensor:
    """
    A dense N-dimensional float array that can take part in differentiation.

    Parameters
    ----------
    data : array-like
        The values; integer and boolean input is converted to float32.
    requires_grad : bool, optional
        Accumulate a gradient in :attr:`grad` during :meth:`backward`.
    name : str, optional
        Used in error messages and by :class:`offnadir.model.ParameterStore`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_float_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None

    @classmethod
    def from_op(
        cls, data: np.ndarray, parents: Iterable[Tensor], backward: Backward
    ) -> Tensor:
        """Create the output of an operation, recording it on the tape if needed."""
        out = cls(data)
        parents = tuple(parents)
        if is_grad_enabled() and any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{name})"

    def backward(self, grad: Optional[np.ndarray] = None):
        """
        Accumulate gradients of this tensor into every leaf that requires them.

        Parameters
        ----------
        grad : np.ndarray, optional
            Upstream gradient.  Defaults to ones, which is only allowed for
            single-element tensors.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without a gradient needs a scalar, got {self.shape}"
                )
            grad = np.ones_like(self.data)
        elif grad.shape != self.shape:
            raise ShapeError(f"Gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue

            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    # Elementwise arithmetic
    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Operand) -> Tensor:
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other: Operand) -> Tensor:
        return add(neg(self), other)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Union[float, int]) -> Tensor:
        if isinstance(other, (Tensor, np.ndarray)):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return mul(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return mul(total(self), 1.0 / self.size)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def clip(self, low: float, high: float) -> Tensor:
        return clip(self, low, high)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _check_same_shape(op: str, a: Tensor, b: Union[Tensor, np.ndarray]):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Operand) -> Tensor:
    """Elementwise sum of equally-shaped tensors (or a tensor and a scalar)."""
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))
    if isinstance(b, np.ndarray) and b.ndim:
        _check_same_shape("add", a, b)
    return Tensor.from_op(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,))


def mul(a: Tensor, b: Operand) -> Tensor:
    """Elementwise product of equally-shaped tensors (or with a constant)."""
    if isinstance(b, Tensor):
        _check_same_shape("mul", a, b)
        a_data, b_data = a.data, b.data
        return Tensor.from_op(
            a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data)
        )
    if isinstance(b, np.ndarray) and b.ndim:
        _check_same_shape("mul", a, b)
    constant = np.asarray(b, dtype=a.dtype)
    return Tensor.from_op(a.data * constant, (a,), lambda g: (g * constant,))


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        return (np.full(shape, g, dtype=dtype),)

    return Tensor.from_op(np.asarray(a.data.sum(dtype=dtype)), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    data = a.data
    return Tensor.from_op(np.log(data), (a,), lambda g: (g / data,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp into ``[low, high]``; the gradient is zero where clamping applied."""
    inside = (a.data >= low) & (a.data <= high)
    out = np.clip(a.data, low, high)
    return Tensor.from_op(out, (a,), lambda g: (g * inside,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return Tensor.from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(original),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    reference = list(tensors[0].shape)
    for tensor in tensors[1:]:
        other = list(tensor.shape)
        if len(other) != len(reference) or any(
            r != o for dim, (r, o) in enumerate(zip(reference, other)) if dim != axis
        ):
            raise ShapeError(
                f"concat: shape mismatch {tensors[0].shape} vs {tensor.shape} "
                f"along axis {axis}"
            )
    sizes = [tensor.shape[axis] for tensor in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(
        np.concatenate([tensor.data for tensor in tensors], axis=axis),
        tensors,
        backward,
    )


def check_finite(tensor: Union[Tensor, np.ndarray], what: str):
    data = tensor.data if isinstance(tensor, Tensor) else tensor
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values in {what}")


class Rng:
    """
    Seeded random stream over a counter-based (Philox) bit generator.

    Streams are addressed by ``(seed, *key)``: :meth:`spawn` derives an
    independent child stream, so work can be split across threads while the
    draws stay identical to a serial run.

    Parameters
    ----------
    seed : int
        Non-negative 64-bit seed.
    key : tuple of int, optional
        Stream address below ``seed``.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0:
            raise ValueError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed) % 2**64
        self.key = tuple(int(k) for k in key)
        # Key length is mixed in: SeedSequence pads short entropy with zeros.
        sequence = np.random.SeedSequence([self.seed, len(self.key), *self.key])
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"

    def spawn(self, *key: int) -> Rng:
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, shape: Sequence[int], dtype=np.float64) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._generator.random(tuple(shape)).astype(dtype, copy=False)

    def normal(self, shape: Sequence[int], dtype=np.float64) -> np.ndarray:
        """Standard-normal draws by the Box-Muller transform of uniform pairs."""
        shape = tuple(shape)
        u1 = 1.0 - self._generator.random(shape)
        u2 = self._generator.random(shape)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.astype(dtype, copy=False)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers drawn uniformly from ``[0, high)``."""
        return self._generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


def encode_ten(array: np.ndarray) -> bytes:
    """
    Serialize an array as a ``.ten`` record.

    The layout is ``TENS``, u8 version, u8 dtype (0 = f32, 1 = f64), u16 rank,
    rank x u32 dims, then the little-endian row-major payload.
    """
    array = np.asarray(array)
    try:
        code = _TEN_CODES[np.dtype(array.dtype.type)]
    except KeyError:
        raise FormatError(f"Unsupported .ten dtype: {array.dtype}") from None

    header = struct.pack("<4sBBH", TEN_MAGIC, TEN_VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_TEN_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_ten(buffer: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """
    Decode one ``.ten`` record starting at ``offset``.

    Returns
    -------
    array : np.ndarray
    offset : int
        The position just after the record.
    """
    try:
        magic, version, code, rank = struct.unpack_from("<4sBBH", buffer, offset)
    except struct.error:
        raise FormatError("Truncated .ten header") from None
    if magic != TEN_MAGIC:
        raise FormatError(f"Bad .ten magic: {magic!r}")
    if version != TEN_VERSION:
        raise FormatError(f"Unsupported .ten version: {version}")
    if code not in _TEN_DTYPES:
        raise FormatError(f"Unknown .ten dtype code: {code}")

    offset += 8
    try:
        dims = struct.unpack_from(f"<{rank}I", buffer, offset)
    except struct.error:
        raise FormatError("Truncated .ten dimensions") from None
    offset += 4 * rank

    dtype = _TEN_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buffer):
        raise FormatError(
            f"Truncated .ten payload: need {nbytes} bytes, "
            f"have {len(buffer) - offset}"
        )
    array = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset)
    array = array.reshape(dims).astype(dtype.newbyteorder("="))
    return array, offset + nbytes


def write_ten(path_or_file: Union[AnyPath, io.IOBase], array: np.ndarray):
    """Write ``array`` to a ``.ten`` file (or an open binary file object)."""
    data = encode_ten(array)
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
        return
    with open(path_or_file, "wb") as f:
        f.write(data)


def read_ten(path: AnyPath) -> np.ndarray:
    """Read a single-record ``.ten`` file."""
    with open(path, "rb") as f:
        buffer = f.read()
    array, offset = decode_ten(buffer)
    if offset != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - offset} trailing bytes")
    return array
