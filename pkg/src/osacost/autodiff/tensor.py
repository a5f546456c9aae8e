"""Dense tensors with reverse-mode differentiation.

Each differentiable op builds an output :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per
parent. :func:`backward` walks the graph (or an explicit :class:`Tape`)
in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype):
    """Set the thread-local floating dtype used for new tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype.type


@contextlib.contextmanager
def default_dtype(dtype):
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled():
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference)."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended at creation time, so the record is already in
    topological order. Use as a context manager to capture every op
    created on the current thread::

        with Tape() as tape:
            loss = f(x)
        backward(loss, tape=tape)
    """

    def __init__(self):
        self.nodes = []
        self._outer = None

    def record(self, node):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._outer = _get("tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._outer
        self._outer = None


class Tensor:
    """A dense array plus optional gradient bookkeeping.

    Values are immutable after construction by convention; only ``grad``
    is written to, and only by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, values, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(values)
        if dtype is None:
            dtype = get_default_dtype()
        self.data = np.array(arr, dtype=dtype, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward_fn
            tape = _get("tape", None)
            if tape is not None:
                tape.record(out)
        else:
            out._parents = ()
            out._backward = None
        return out

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; definitions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, grad=None, tape=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf.

    Args:
        root: Output tensor; must be scalar unless ``grad`` is given.
        grad: Seed gradient, same shape as ``root``.
        tape: Optional :class:`Tape` that recorded ``root``. When omitted the
            graph is sorted by depth-first search from ``root``.
    """
    if not root.requires_grad:
        raise ValueError("root does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise ValueError("grad must be given for non-scalar roots")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=root.dtype)
        if grad.shape != root.shape:
            raise ValueError(f"seed grad shape {grad.shape} != root shape {root.shape}")

    if tape is not None:
        try:
            end = max(i for i, n in enumerate(tape.nodes) if n is root)
        except ValueError:
            raise ValueError("root was not recorded on this tape") from None
        order = tape.nodes[: end + 1]
    else:
        order = _topological(root)

    grads = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate_leaf(node, g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                _accumulate_leaf(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _accumulate_leaf(leaf, g):
    g = np.asarray(g, dtype=leaf.dtype)
    if g.shape != leaf.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {leaf.shape}")
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g
