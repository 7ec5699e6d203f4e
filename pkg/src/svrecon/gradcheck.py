"""Finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, default_dtype


@dataclass
class GradcheckReport:
    max_rel_err: float
    per_input: list[float] = field(default_factory=list)
    worst_index: tuple | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return out.sum()
    return (out * Tensor(weights)).sum()


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    h: float = 1e-6,
    wrt: Sequence[int] | None = None,
    flip_sign: bool = False,
) -> GradcheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` receives one :class:`Tensor` per input. Non-scalar outputs are
    reduced with a fixed random projection. The relative error of an element
    is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``flip_sign`` negates the analytic gradient; it exists so the harness can
    prove it catches a sign bug.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    with default_dtype(np.float64):
        probe = f(*[Tensor(a) for a in arrays])
        weights = None
        if probe.data.size != 1:
            weights = np.random.default_rng(0).uniform(0.5, 1.5, size=probe.shape)

        def evaluate(arrs) -> float:
            return float(_scalarize(f(*[Tensor(a) for a in arrs]), weights).data)

        base_a = evaluate(arrays)
        base_b = evaluate(arrays)
        if base_a != base_b:
            raise ContractError("gradcheck: f is not deterministic (two evaluations differ)")

        leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        _scalarize(f(*leaves), weights).backward()

        per_input = []
        worst = 0.0
        worst_index = None
        for i in wrt:
            analytic = leaves[i].grad
            if analytic is None:
                analytic = np.zeros_like(arrays[i])
            if flip_sign:
                analytic = -analytic
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                fp = evaluate(arrays)
                flat[j] = old - h
                fm = evaluate(arrays)
                flat[j] = old
                numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
            denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
            rel = np.abs(analytic - numeric) / denom
            err = float(rel.max()) if rel.size else 0.0
            per_input.append(err)
            if err > worst or worst_index is None:
                worst = max(worst, err)
                if rel.size:
                    worst_index = (i, int(np.argmax(rel)))
    return GradcheckReport(max_rel_err=max(per_input, default=0.0), per_input=per_input, worst_index=worst_index)
