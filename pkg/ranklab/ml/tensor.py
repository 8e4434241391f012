# ranklab/ml/tensor.py
"""
Dense tensors with a define-by-run gradient tape.

Every primitive in `ops` builds its output through `make_result`, which
checks finiteness and, when gradients are enabled and some input requires
them, records the parents and a backward closure on the output. The tape is
rebuilt on every forward pass; nothing is cached between passes.

Precision is a process-wide default (float32 for training, float64 for the
oracle tests). Grad mode is thread-local so read-only evaluation threads can
run under `no_grad()` while another thread trains.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ContractError, NumericError

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

PRECISIONS = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_grad_state = threading.local()


# ── Precision ─────────────────────────────────────────────────────────────────

def set_precision(name: str) -> None:
    global _default_dtype
    if name not in PRECISIONS:
        raise ValueError(f"Unknown precision: {name}")
    _default_dtype = PRECISIONS[name]


def get_dtype():
    return _default_dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


# ── Grad mode ─────────────────────────────────────────────────────────────────

def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# ── Tensor ────────────────────────────────────────────────────────────────────

class Tensor:
    """A dense real array that may participate in the gradient tape."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __array_priority__ = 1000


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data, name: str, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced a non-finite value")


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    data = np.asarray(data)
    check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# ── Backward ──────────────────────────────────────────────────────────────────

class GradientMap(dict):
    """Parameter identifier → gradient Tensor."""

    def array(self, key: str) -> np.ndarray:
        return self[key].data

    def flatten(self, keys: Optional[Sequence[str]] = None) -> np.ndarray:
        keys = list(self.keys()) if keys is None else list(keys)
        if not keys:
            return np.zeros(0, dtype=_default_dtype)
        return np.concatenate([self[k].data.reshape(-1) for k in keys])

    @classmethod
    def from_flat(cls, flat: np.ndarray, like: "GradientMap", keys: Optional[Sequence[str]] = None) -> "GradientMap":
        keys = list(like.keys()) if keys is None else list(keys)
        out = cls()
        offset = 0
        for k in keys:
            shape = like[k].shape
            n = int(np.prod(shape))
            out[k] = Tensor(flat[offset:offset + n].reshape(shape), dtype=flat.dtype)
            offset += n
        return out


def param_key(t: Tensor) -> str:
    return t.name if t.name is not None else f"tensor_{id(t)}"


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> GradientMap:
    """
    Reverse-mode sweep from a scalar loss.

    With `params`, the map holds exactly those parameters (zeros for any not
    reachable from the loss). Without it, every reachable leaf that requires
    grad is reported. Leaf `.grad` fields are overwritten.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    if loss.requires_grad:
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad:
                    leaves[id(node)] = node
                    grads[id(node)] = g if g is not None else np.zeros_like(node.data)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    out = GradientMap()
    targets = list(params) if params is not None else list(leaves.values())
    for p in targets:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
        check_finite(g, f"backward[{param_key(p)}]")
        p.grad = g
        out[param_key(p)] = Tensor(g, dtype=g.dtype)
    return out
