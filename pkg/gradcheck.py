'''
Finite-difference gradient checker.

The inputs are promoted to float64 for the duration of the check, the analytic gradient is taken from backward() and
compared against central differences. Points where the one-sided slopes disagree (ReLU and max-pool kinks) are skipped
and counted instead of being scored.
'''
from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence
import numpy as np
import ops
from tensor import Tensor, backward, noGrad
from errors import UsageError


@dataclass
class GradCheckReport:
    opName: str
    maxRelError: float
    maxAbsError: float
    passed: bool
    tolerance: float
    checked: int = 0
    skipped: int = 0

    def __str__(self) -> str:
        status = 'PASSED' if self.passed else 'FAILED'
        if self.checked == 0:
            return f'{self.opName}: FAILED no point checked ({self.skipped} skipped at kinks)'
        return (f'{self.opName}: {status} max rel error {self.maxRelError:.3e}, max abs error {self.maxAbsError:.3e} '
                f'({self.checked} points checked, {self.skipped} skipped at kinks, tolerance {self.tolerance:g})')


def _evaluate(opClosure: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    return float(opClosure(*inputs).data.astype(np.float64).reshape(-1)[0])


def finite_diff_check(opClosure: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-4,
                      tolerance: float = 1e-3, opName: Optional[str] = None, kinkTolerance: float = 1e-2,
                      samplesPerInput: Optional[int] = None, seed: int = 0,
                      relativeFloor: float = 1e-8) -> GradCheckReport:
    '''
    Compares the analytic gradient of a scalar closure against central differences.

    Parameters
    ----------
    opClosure : callable
        Called as opClosure(*inputs), must return a single-element Tensor.
    inputs : sequence of Tensor
        Tensors to differentiate with respect to. They are modified in place during the check and restored afterwards.
    epsilon : float
        Perturbation step.
    tolerance : float
        The check passes when at least one point was scored and the maximum relative error is strictly below this
        value.
    opName : str, optional
        Name used in the report, defaults to the closure name.
    kinkTolerance : float
        A point is treated as a kink when |forward slope - backward slope| > kinkTolerance * max(|slopes|, 1).
    samplesPerInput : int, optional
        Check only this many seeded random elements per input instead of every element.
    seed : int
        Seed of the element sampling.
    relativeFloor : float
        Gradients smaller than this are scored against the floor instead of their own magnitude.

    Returns
    -------
    GradCheckReport
    '''
    if opName is None:
        opName = getattr(opClosure, '__name__', 'closure')
    saved = [(t.data, t.requiresGrad, t.grad) for t in inputs]
    rng = np.random.default_rng(seed)
    maxRel = 0.0
    maxAbs = 0.0
    checked = 0
    skipped = 0
    try:
        for t in inputs:
            t.data = t.data.astype(np.float64)
            t.requiresGrad = True
            t.grad = None

        loss = opClosure(*inputs)
        if loss.size != 1:
            raise UsageError(f'{opName}: closure must return a scalar, got shape {loss.shape}')
        backward(loss, inputs)
        analytic: List[np.ndarray] = [np.asarray(t.grad, dtype=np.float64).reshape(-1).copy() for t in inputs]

        with noGrad():
            center = _evaluate(opClosure, inputs)
            for index, t in enumerate(inputs):
                flat = t.data.reshape(-1)
                if samplesPerInput is None or samplesPerInput >= flat.size:
                    coordinates = np.arange(flat.size)
                else:
                    coordinates = np.sort(rng.choice(flat.size, size=samplesPerInput, replace=False))
                for c in coordinates:
                    original = flat[c]
                    flat[c] = original + epsilon
                    plus = _evaluate(opClosure, inputs)
                    flat[c] = original - epsilon
                    minus = _evaluate(opClosure, inputs)
                    flat[c] = original

                    forwardSlope = (plus - center) / epsilon
                    backwardSlope = (center - minus) / epsilon
                    if abs(forwardSlope - backwardSlope) > kinkTolerance * max(abs(forwardSlope), abs(backwardSlope), 1.0):
                        skipped += 1
                        continue

                    numeric = (plus - minus) / (2.0 * epsilon)
                    a = analytic[index][c]
                    absError = abs(a - numeric)
                    relError = absError / max(abs(a), abs(numeric), relativeFloor)
                    maxAbs = max(maxAbs, absError)
                    maxRel = max(maxRel, relError)
                    checked += 1
    finally:
        for t, (data, requiresGrad, grad) in zip(inputs, saved):
            t.data = data
            t.requiresGrad = requiresGrad
            t.grad = grad

    return GradCheckReport(opName, maxRel, maxAbs, checked > 0 and maxRel < tolerance, tolerance, checked, skipped)


# Whole-network checks cross many ReLU kinks and use a smaller step
MODEL_EPSILON = 1e-7
MODEL_KINK_TOLERANCE = 1e-5
MODEL_TOLERANCE = 2e-3


def check_model_gradients(model, input: Tensor, target: np.ndarray, samplesPerInput: Optional[int] = None,
                          seed: int = 0, tolerance: float = MODEL_TOLERANCE, relativeFloor: float = 1e-8) -> GradCheckReport:
    '''
    Checks the cross-entropy gradient of every parameter tensor of a model (anything with tensors() and forward()).
    '''
    tensors = list(model.tensors().values())
    return finite_diff_check(lambda *_: ops.cross_entropy_loss(model.forward(input), target), tensors,
                             epsilon=MODEL_EPSILON, tolerance=tolerance, opName='efpn_model',
                             kinkTolerance=MODEL_KINK_TOLERANCE, samplesPerInput=samplesPerInput, seed=seed,
                             relativeFloor=relativeFloor)
