'''
Dense tensor with reverse-mode gradient tracking.

Feature maps are 4-D (N, C, H, W) arrays. Parameters keep whatever shape their layer needs (e.g. a bias is 1-D) and
scalar losses are 0-D. Storage is float32 unless the inputs of an operation are float64, which the gradient checker
uses. The operators themselves live in ops.py and build graph nodes through makeResult().
'''
from __future__ import annotations
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple
import numpy as np
from errors import NumericError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_gradEnabled: bool = True


@contextmanager
def noGrad() -> Iterator[None]:
    '''
    Disables graph construction inside the block (inference and finite-difference evaluations).
    '''
    global _gradEnabled
    previous = _gradEnabled
    _gradEnabled = False
    try:
        yield
    finally:
        _gradEnabled = previous


def isGradEnabled() -> bool:
    return _gradEnabled


class Node:
    '''
    Provenance record of an operator result: the inputs and the function mapping the upstream gradient to one
    gradient per input (None for inputs that need none).
    '''
    def __init__(self, opName: str, parents: Tuple['Tensor', ...], backwardFn: BackwardFn) -> None:
        self.opName = opName
        self.parents = parents
        self.backwardFn = backwardFn


class Tensor:
    def __init__(self, data, requiresGrad: bool = False, dtype=None) -> None:
        array = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if array.dtype == np.float64 else np.float32
        self.data: np.ndarray = np.ascontiguousarray(array, dtype=dtype)
        self.requiresGrad = requiresGrad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f'item() needs a single-element tensor, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def zeroGrad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, parameters: Optional[Iterable['Tensor']] = None) -> None:
        backward(self, parameters)

    def __repr__(self) -> str:
        op = self.node.opName if self.node else 'leaf'
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, op={op})'


class Parameter:
    '''
    Named trainable tensor. Names are path-like, e.g. stage1.block0.b2.pointwise.weight.
    '''
    def __init__(self, name: str, tensor: Tensor, trainable: bool = True) -> None:
        self.name = name
        self.tensor = tensor
        self.tensor.requiresGrad = trainable
        self.trainable = trainable

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def __repr__(self) -> str:
        return f'Parameter({self.name}, shape={self.shape})'


def ensureFinite(values: np.ndarray, opName: str) -> None:
    if not np.all(np.isfinite(values)):
        badCount = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NumericError(f'{opName}: {badCount} non-finite value(s) in the result')


def makeResult(data: np.ndarray, parents: Sequence[Tensor], backwardFn: BackwardFn, opName: str) -> Tensor:
    '''
    Wraps an operator result. The result dtype follows the inputs (float64 if any input is float64).
    A graph node is only recorded when gradients are enabled and some input needs one.
    '''
    ensureFinite(data, opName)
    dtype = np.float64 if any(p.dtype == np.float64 for p in parents) else np.float32
    result = Tensor(data, dtype=dtype)
    if _gradEnabled and any(p.requiresGrad for p in parents):
        result.requiresGrad = True
        result.node = Node(opName, tuple(parents), backwardFn)
    return result


def topologicalOrder(root: Tensor) -> List[Tensor]:
    '''
    Returns the graph below root with every tensor placed after all tensors that consume it (root first).
    Iterative so deep graphs do not hit the recursion limit.
    '''
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.parents):
                if parent.requiresGrad and id(parent) not in visited:
                    stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor, parameters: Optional[Iterable[Tensor]] = None) -> None:
    '''
    Propagates d(loss)/d(x) to every tensor reachable from the scalar loss and accumulates it into .grad.
    Tensors in "parameters" that the loss does not reach get a zero gradient.
    '''
    if loss.data.size != 1:
        raise UsageError(f'backward() needs a scalar loss, got shape {loss.shape}')

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    reached = set()

    if loss.requiresGrad:
        for tensor in topologicalOrder(loss):
            upstream = grads.pop(id(tensor), None)
            if upstream is None:
                continue
            reached.add(id(tensor))
            if tensor.grad is None:
                tensor.grad = upstream.astype(tensor.dtype)
            else:
                tensor.grad = (tensor.grad + upstream).astype(tensor.dtype)

            if tensor.node is None:
                continue
            parentGrads = tensor.node.backwardFn(upstream)
            for parent, parentGrad in zip(tensor.node.parents, parentGrads):
                if parentGrad is None or not parent.requiresGrad:
                    continue
                assert parentGrad.shape == parent.shape, f'{tensor.node.opName}: gradient shape {parentGrad.shape} != {parent.shape}'
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parentGrad
                else:
                    grads[id(parent)] = np.asarray(parentGrad, dtype=np.float64)

    if parameters is not None:
        for tensor in parameters:
            if id(tensor) not in reached and tensor.grad is None:
                tensor.zeroGrad()
