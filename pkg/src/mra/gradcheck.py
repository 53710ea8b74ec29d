"""Finite-difference verification of reverse-mode gradients.

``grad_check`` perturbs the given parameter tensors in place, so they must be
the exact objects appearing in the loss graph. Checks should run in double
precision: either build the graph from float64 tensors directly, or use
``check_model_gradients`` which temporarily promotes a whole model. Relative
error uses a small floor on the denominator so near-zero gradients compare by
absolute error instead of blowing up.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensor import NumericError, Tensor

REL_FLOOR = 1e-3  # denominator floor for the relative-error ratio


@dataclass
class GradCheckReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    step: float
    passed: bool
    checked_elements: int = 0


def _eval_loss(loss_fn, params: dict[str, Tensor], name: str) -> float:
    value = loss_fn(params)
    v = float(value.data)
    if not np.isfinite(v):
        raise NumericError(f"non-finite loss while checking parameter {name!r}")
    return v


def grad_check(loss_fn, params: dict[str, Tensor], step: float = 1e-4,
               tol: float = 1e-3, max_elements: int = 32,
               seed: int = 0) -> list[GradCheckReport]:
    """Compare reverse-mode gradients of ``loss_fn`` against central
    differences for every named parameter.

    ``loss_fn`` takes the name -> Tensor map and must build its graph from
    those tensors; it must be deterministic. At most ``max_elements`` randomly
    chosen elements are checked per tensor (all of them when the tensor is
    smaller).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = loss_fn(params)
    if not np.isfinite(float(loss.data)):
        raise NumericError("non-finite loss at the evaluation point")
    loss.backward()
    rng = np.random.default_rng(seed)
    reports = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        analytic = (np.zeros_like(flat) if p.grad is None
                    else p.grad.reshape(-1))
        n = flat.size
        idx = np.arange(n) if n <= max_elements else \
            rng.choice(n, size=max_elements, replace=False)
        max_abs = 0.0
        max_rel = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = _eval_loss(loss_fn, params, name)
            flat[i] = orig - step
            down = _eval_loss(loss_fn, params, name)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = analytic[i]
            abs_err = abs(a - fd)
            rel_err = abs_err / max(abs(a), abs(fd), REL_FLOOR)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
        reports.append(GradCheckReport(name=name, max_abs_err=max_abs,
                                       max_rel_err=max_rel, step=step,
                                       passed=max_rel <= tol,
                                       checked_elements=len(idx)))
    return reports


@contextmanager
def double_precision(params: dict[str, Tensor]):
    """Temporarily promote parameter tensors to float64 in place."""
    saved = {k: p.data for k, p in params.items()}
    for p in params.values():
        p.data = p.data.astype(np.float64)
    try:
        yield params
    finally:
        for k, p in params.items():
            p.data = saved[k]


def check_model_gradients(model, i_l: np.ndarray, i_h: np.ndarray, sequence,
                          step: float = 1e-4, tol: float = 1e-3,
                          max_elements: int = 32, seed: int = 0,
                          ) -> list[GradCheckReport]:
    """Run grad_check through a full-model forward loss in float64."""
    params = model.named_parameters()
    i_l64 = Tensor(np.asarray(i_l, dtype=np.float64))
    i_h64 = Tensor(np.asarray(i_h, dtype=np.float64))

    def loss_fn(_params):
        return model.forward_loss(i_l64, i_h64, sequence)[0]

    with double_precision(params):
        return grad_check(loss_fn, params, step=step, tol=tol,
                          max_elements=max_elements, seed=seed)
