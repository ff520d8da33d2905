"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, zero_grads


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric grads."""

    per_param: dict[str, float]
    max_rel_err: float
    worst_param: str

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def gradcheck(closure, params, eps: float = 1e-5, max_per_param: int | None = None,
              rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of `closure` against central finite differences.

    `closure` must be a deterministic zero-argument callable returning a
    scalar Tensor (disable dropout). `params` is a mapping or sequence of
    (name, Parameter); frozen parameters are excluded from the report.
    Elements beyond `max_per_param` per tensor are subsampled with `rng`.

    The relative error of one element is |num - ana| / max(|num|, |ana|, 1),
    so sub-unit gradients are compared absolutely.
    """
    named = list(params.items()) if hasattr(params, "items") else list(params)
    checked = [(n, p) for n, p in named if p.trainable]

    zero_grads(p for _, p in checked)
    with Tape() as tape:
        loss = closure()
    tape.backward(loss)
    analytic = {n: p.grad.copy() for n, p in checked}
    zero_grads(p for _, p in checked)

    per_param: dict[str, float] = {}
    for name, p in checked:
        flat = p.data.reshape(-1)
        ana_flat = analytic[name].reshape(-1)
        if max_per_param is not None and flat.size > max_per_param:
            picker = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(picker.choice(flat.size, size=max_per_param, replace=False))
        else:
            indices = range(flat.size)
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = closure().item()
            flat[i] = orig - eps
            f_minus = closure().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            ana = float(ana_flat[i])
            err = abs(num - ana) / max(abs(num), abs(ana), 1.0)
            if err > worst:
                worst = err
        per_param[name] = worst

    if per_param:
        worst_param = max(per_param, key=per_param.get)
        return GradCheckReport(per_param, per_param[worst_param], worst_param)
    return GradCheckReport({}, 0.0, "")
