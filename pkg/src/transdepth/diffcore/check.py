"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, branch_log


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)
    skipped: int = 0

    # a probe may be dropped only when it straddles a kink at every step size;
    # more than this share of dropped probes fails the check
    MAX_SKIPPED_SHARE = 0.05

    def passed(self, tol: float) -> bool:
        return (self.checked > 0 and self.max_rel_error < tol
                and self.skipped <= self.MAX_SKIPPED_SHARE * (self.checked + self.skipped))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor is 1e-3 of the largest numeric component (and never below
    1e-10) so that entries which are zero up to round-off do not dominate.
    """
    floor = max(1e-3 * float(np.max(np.abs(numeric), initial=0.0)), 1e-10)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _evaluate(loss_fn) -> tuple[float, list]:
    with branch_log() as log:
        value = float(loss_fn().data)
    return value, log


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], *,
                    name: str = "", step: float = 1e-4, max_elements: int | None = None,
                    rng: np.random.Generator | None = None,
                    labels: Sequence[str] | None = None, refinements: int = 2) -> GradcheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``tensors`` must be tracked leaves (Parameters or tensors built with
    ``requires_grad=True``) that ``loss_fn`` reads. Their data are perturbed
    in place one element at a time and restored afterwards. With
    ``max_elements`` only that many randomly chosen entries per tensor are
    probed.

    A probe whose +-step evaluations take a different branch of some
    piecewise op (relu, abs, max pooling, sampling cell) than the unperturbed
    point is repeated with the step divided by 10, up to ``refinements``
    times, and skipped if it still straddles the kink.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with Tape() as tape, branch_log() as base_branches:
        loss = loss_fn()
    grads = backward(tape, loss, accumulate=False)
    worst, worst_where, checked, skipped = 0.0, "", 0, 0
    per_tensor = {}
    for n, t in enumerate(tensors):
        label = labels[n] if labels else getattr(t, "name", f"input{n}")
        analytic = grads[t].reshape(-1)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)  # so the flat view writes through
        flat = t.data.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            picks = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        else:
            picks = np.arange(flat.size)
        kept, numeric = [], []
        for i in picks:
            orig = flat[i]
            h = step
            for _ in range(refinements + 1):
                flat[i] = orig + h
                up, up_branches = _evaluate(loss_fn)
                flat[i] = orig - h
                down, down_branches = _evaluate(loss_fn)
                flat[i] = orig
                if up_branches == base_branches and down_branches == base_branches:
                    kept.append(i)
                    numeric.append((up - down) / (2 * h))
                    break
                h /= 10
            else:
                skipped += 1
        kept = np.asarray(kept, dtype=np.int64)
        numeric = np.asarray(numeric)
        err = relative_error(analytic[kept], numeric)
        checked += len(kept)
        per_tensor[label] = float(err.max(initial=0.0))
        if err.size and err.max() > worst:
            k = int(err.argmax())
            worst = float(err[k])
            worst_where = (f"{label}[{int(kept[k])}]: analytic {analytic[kept[k]]:.6e} "
                           f"numeric {numeric[k]:.6e}")
    return GradcheckResult(name, worst, checked, worst_where, per_tensor, skipped)
