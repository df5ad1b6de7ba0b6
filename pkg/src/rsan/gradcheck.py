"""Central finite-difference gradient checking at 64-bit precision.

The harness rebuilds the loss graph from scratch for every probe, so ops with
benign side effects (BN running stats) stay consistent: the loss value only
ever depends on the current leaf values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_leaf: int
    worst_index: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def check_gradients(build_loss, leaves, h: float = 1e-5) -> GradCheckResult:
    """Compare reverse-mode grads of a scalar loss against central differences.

    ``build_loss()`` must reconstruct the graph from the current leaf values
    and return a scalar Tensor. Leaves are float64 requires_grad tensors; each
    element is perturbed by +-h in place.
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ValueError("gradient checks run on float64 leaves")
        leaf.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(l.data) if l.grad is None else np.array(l.grad, dtype=np.float64)
                for l in leaves]

    worst = GradCheckResult(0.0, -1, -1)
    with no_grad():  # probe evaluations only need the value, not the graph
        for li, leaf in enumerate(leaves):
            flat = leaf.data.ravel()
            an = analytic[li].ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                f_plus = float(build_loss().data)
                flat[j] = orig - h
                f_minus = float(build_loss().data)
                flat[j] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                err = _rel_error(an[j], fd)
                if err > worst.max_rel_error:
                    worst = GradCheckResult(err, li, j)
    return worst


def random_projection_loss(op, leaves, rng: np.random.Generator):
    """Build a loss closure sum(op(...) * R) with a fixed random projection R.

    A random projection exercises gradient routing (argmax paths, channel
    splits) that a plain sum would leave untested.
    """
    from . import ops

    first = op(*leaves)
    proj = Tensor(rng.standard_normal(first.shape), dtype=np.float64)

    def build_loss():
        return ops.sum_all(ops.mul(op(*leaves), proj))

    return build_loss
