"""
Minimal reverse-mode differentiation.

Computation is recorded on a Tape as a flat, ordered list of entries (a Wengert list). Each entry remembers
which op produced which node from which inputs, together with a backward closure holding whatever activations
the op needs to compute its input gradients. Backward simply walks the list in reverse.

A Tape becomes the active tape of the current thread when used as a context manager:

    with Tape() as tape:
        loss = F.mean(F.square(F.conv1d(x, w)))
        tape.backward(loss)

Ops executed while no tape is active (or with no input that requires a gradient) only compute values.
Tapes are never shared between threads, but separate threads may each run their own.
"""
import logging
import threading
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from sepprune.core.errors import InvalidArgumentError, NumericFailureError

log = logging.getLogger("root")

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["TensorNode", np.ndarray, float, int]

_THREAD_STATE = threading.local()


class TensorNode(object):
    """
    A dense array taking part in differentiable computation.

    Leaf nodes are created by the user (parameters, inputs, mask logits). Non-leaf nodes are created by the ops
    in sepprune.core.functional. Only leaves that require a gradient receive a `grad` during backward.
    """

    def __init__(self, values: Union[np.ndarray, float, int], requires_grad: bool = False, name: str = None) -> None:
        values = np.asarray(values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float32)
        self.values = values
        self.requires_grad = requires_grad
        self.grad = None  # type: Optional[np.ndarray]
        self.name = name
        self.tape_id = None  # type: Optional[int]
        self._tape = None  # type: Optional[Tape]
        self._is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return "<TensorNode{} shape={} dtype={}{}>".format(
            " " + self.name if self.name else "",
            self.shape,
            self.dtype,
            " requires_grad" if self.requires_grad else "",
        )


def as_node(value: ArrayLike) -> TensorNode:
    if isinstance(value, TensorNode):
        return value
    return TensorNode(value)


class TapeEntry(NamedTuple):
    op: str
    input_ids: Tuple[Optional[int], ...]
    output_id: int
    backward: BackwardFn


class Tape(object):
    def __init__(self) -> None:
        self._entries = []  # type: List[TapeEntry]
        self._leaves = {}  # type: Dict[int, TensorNode]
        self._next_id = 0

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> List[TapeEntry]:
        return self._entries

    def _new_id(self) -> int:
        tape_id = self._next_id
        self._next_id += 1
        return tape_id

    def _id_of(self, node: TensorNode) -> Optional[int]:
        if not node.requires_grad:
            return None
        if node._tape is not self:
            if not node.is_leaf:
                raise InvalidArgumentError("Node {} was recorded on a different tape".format(node))
            node._tape = self
            node.tape_id = self._new_id()
            self._leaves[node.tape_id] = node
        return node.tape_id

    def record(
        self, op: str, inputs: Sequence[TensorNode], values: np.ndarray, backward: BackwardFn
    ) -> TensorNode:
        input_ids = tuple(self._id_of(node) for node in inputs)
        output = TensorNode(values, requires_grad=True)
        output._is_leaf = False
        output._tape = self
        output.tape_id = self._new_id()
        self._entries.append(TapeEntry(op, input_ids, output.tape_id, backward))
        return output

    def backward(self, loss: TensorNode) -> None:
        if loss.values.size != 1 or loss.ndim != 0:
            raise InvalidArgumentError("backward() needs a scalar loss, got shape {}".format(loss.shape))
        if not self._entries:
            raise InvalidArgumentError("backward() called on an empty tape")
        if loss._tape is not self:
            raise InvalidArgumentError("Loss was not recorded on this tape")

        grads = {loss.tape_id: np.ones_like(loss.values)}  # type: Dict[int, np.ndarray]
        for entry in reversed(self._entries):
            upstream = grads.pop(entry.output_id, None)
            if upstream is None:
                continue
            needs = [input_id is not None for input_id in entry.input_ids]
            input_grads = entry.backward(upstream, needs)
            for input_id, grad in zip(entry.input_ids, input_grads):
                if input_id is None or grad is None:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NumericFailureError(entry.op, "non-finite gradient in backward pass")
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad

        for leaf_id, leaf in self._leaves.items():
            grad = grads.get(leaf_id)
            if grad is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(grad, dtype=leaf.dtype)
            else:
                leaf.grad = leaf.grad + grad

    def clear(self) -> None:
        self._entries = []
        for leaf in self._leaves.values():
            leaf._tape = None
            leaf.tape_id = None
        self._leaves = {}


def _tape_stack() -> List[Tape]:
    stack = getattr(_THREAD_STATE, "stack", None)
    if stack is None:
        stack = []
        _THREAD_STATE.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: TensorNode) -> None:
    """Runs backward on the tape that recorded `loss`."""
    if loss._tape is None:
        raise InvalidArgumentError("Loss {} was not recorded on any tape".format(loss))
    loss._tape.backward(loss)


def gradient_check(
    fn: Callable[..., TensorNode], inputs: Sequence[np.ndarray], step: float = 1e-5, wrt: Optional[int] = None
) -> float:
    """
    Compares tape gradients of the scalar `fn(*inputs)` against central finite differences and returns the
    maximum relative error over all checked input elements. Inputs should be 64-bit.

    :param wrt: check only this input index, all inputs when None
    """
    nodes = [TensorNode(np.array(value, dtype=np.float64), requires_grad=True) for value in inputs]
    with Tape() as tape:
        out = fn(*nodes)
        tape.backward(out)

    worst = 0.0
    indices = range(len(nodes)) if wrt is None else [wrt]
    for idx in indices:
        analytic = nodes[idx].grad if nodes[idx].grad is not None else np.zeros_like(nodes[idx].values)
        base = np.array(inputs[idx], dtype=np.float64)
        numeric = np.zeros_like(base)
        for position in np.ndindex(*base.shape):
            plus = [np.array(value, dtype=np.float64) for value in inputs]
            minus = [np.array(value, dtype=np.float64) for value in inputs]
            plus[idx][position] += step
            minus[idx][position] -= step
            f_plus = fn(*[TensorNode(v) for v in plus]).item()
            f_minus = fn(*[TensorNode(v) for v in minus]).item()
            numeric[position] = (f_plus - f_minus) / (2 * step)
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
        worst = max(worst, float(np.max(np.abs(numeric - analytic)) / scale))
    return worst
