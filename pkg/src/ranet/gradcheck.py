"""Central-difference verification of analytic gradients."""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, backward, mul, sum_all


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    max_abs_err: float
    checked: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_err:.3e}, max abs err {self.max_abs_err:.3e} over {self.checked} entries"


def _projected(fn, arrays, weights, dtype):
    tensors = [Tensor(a, dtype=dtype) for a in arrays]
    out = fn(*tensors)
    return float(np.sum(out.data.astype(np.float64) * weights))


def finite_diff_check(fn, inputs, h=1e-3, rtol=1e-2, atol=1e-4, tiny=1e-6, seed=0,
                      analytic_dtype=np.float64):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps tensors to a tensor. It is reduced to a scalar through a
    fixed random projection of its output. Central differences are always
    taken in float64; the analytic gradient runs in ``analytic_dtype``
    (float32 exercises the production path, at the cost of rounding noise
    on small entries). Entries whose analytic magnitude is below ``tiny`` are held
    to the absolute tolerance ``atol``; all others to the relative
    tolerance ``rtol`` with denominator ``max(|a|, |n|, 1e-8)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    leaves = [Tensor(a, requires_grad=True, dtype=analytic_dtype) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        loss = sum_all(mul(out, Tensor(weights, dtype=out.data.dtype)))
    backward(tape, loss)

    max_rel = 0.0
    max_abs = 0.0
    passed = True
    checked = 0
    for idx, arr in enumerate(arrays):
        analytic = leaves[idx].grad
        analytic = np.zeros_like(arr) if analytic is None else analytic.astype(np.float64)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = _projected(fn, arrays, weights, np.float64)
            flat[j] = orig - h
            minus = _projected(fn, arrays, weights, np.float64)
            flat[j] = orig
            numeric.reshape(-1)[j] = (plus - minus) / (2 * h)
        abs_err = np.abs(analytic - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel_err = abs_err / denom
        small = np.abs(analytic) < tiny
        ok = np.where(small, abs_err <= atol, rel_err <= rtol)
        passed = passed and bool(ok.all())
        if (~small).any():
            max_rel = max(max_rel, float(rel_err[~small].max()))
        max_abs = max(max_abs, float(abs_err.max()) if abs_err.size else 0.0)
        checked += arr.size
    return GradCheckReport(passed, max_rel, max_abs, checked)
