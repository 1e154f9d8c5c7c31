"""Central finite differences as an independent gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ContractError, OracleInvalidError
from .autograd import Tensor, no_grad
from .params import GradBundle, ParamStore, backward

LossFn = Callable[[dict], Tensor]


def value_and_grad(loss_fn: LossFn, params: ParamStore) -> tuple[float, GradBundle]:
    """Run ``loss_fn(leaves)`` and reverse-mode differentiate it."""
    leaves = params.leaves()
    loss = loss_fn(leaves)
    return float(loss.data), backward(loss, params, leaves)


def _eval(loss_fn: LossFn, params: ParamStore) -> float:
    with no_grad():
        out = loss_fn(params.leaves())
    return float(out.data if isinstance(out, Tensor) else out)


def finite_diff_grad(loss_fn: LossFn, params: ParamStore, step: float = 1e-5) -> GradBundle:
    """Central-difference estimate of every element's partial derivative.

    The base point is evaluated twice; disagreement means ``loss_fn`` is not
    deterministic and the oracle is meaningless.
    """
    if not step > 0:
        raise ContractError("finite-difference step must be positive")
    if _eval(loss_fn, params) != _eval(loss_fn, params):
        raise OracleInvalidError("loss_fn is nondeterministic at the base point")
    grads = {}
    for name, block in params.items():
        g = np.zeros_like(block)
        flat, gflat = block.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _eval(loss_fn, params)
            flat[i] = orig - step
            lo = _eval(loss_fn, params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return GradBundle(params, grads)


@dataclass
class CheckReport:
    max_rel_error: float
    worst_block: str | None
    rel_tol: float
    passed: bool

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} (tol {self.rel_tol:g}, worst {self.worst_block})"


def compare(analytic: GradBundle, numeric: GradBundle, rel_tol: float) -> CheckReport:
    worst, worst_block = 0.0, None
    for name in analytic:
        ga, gn = analytic[name], numeric[name]
        rel = np.abs(ga - gn) / (np.abs(ga) + np.abs(gn) + 1e-12)
        if rel.size and rel.max() > worst:
            worst, worst_block = float(rel.max()), name
    return CheckReport(worst, worst_block, rel_tol, worst <= rel_tol)


def grad_check(
    loss_fn: LossFn,
    params: ParamStore,
    rel_tol: float = 1e-3,
    step: float = 1e-5,
    analytic: GradBundle | None = None,
) -> CheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` with finite differences.

    ``analytic`` overrides the reverse-mode result, which lets a caller
    check a hand-derived gradient against the same oracle.
    """
    if not 0 < rel_tol < 1:
        raise ContractError("rel_tol must lie in (0, 1)")
    if analytic is None:
        _, analytic = value_and_grad(loss_fn, params)
    numeric = finite_diff_grad(loss_fn, params, step)
    return compare(analytic, numeric, rel_tol)
