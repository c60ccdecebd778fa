"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    per_input: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    worst: tuple | None = None  # (input name, flat index, analytic, numeric)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}, {self.n_checked} coords)"


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    n_coords: int = 16,
    seed: int = 0,
    floor: float = 1e-8,
    names: Sequence[str] | None = None,
    pin_branches: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against ``(f(x+eps) - f(x-eps)) / 2eps``.

    ``fn`` must rebuild its computation from the current ``.data`` of
    ``inputs`` on every call. Up to ``n_coords`` random coordinates of each
    input are perturbed in place and restored.

    With ``pin_branches`` every perturbed evaluation reuses the relu, clip and
    max selections of the unperturbed one, so the difference quotient stays on
    the smooth piece whose derivative the tape reports instead of straddling a
    kink.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    pins = ops.BranchPins() if pin_branches else None
    prev = ops.set_branch_pins(pins)
    try:
        with Tape() as tape:
            loss = fn()
        analytic = tape.backward(loss, inputs)
        return _compare(fn, inputs, analytic, epsilon, tolerance, n_coords, rng, floor, names, pins)
    finally:
        ops.set_branch_pins(prev)


def _evaluate(fn, pins) -> float:
    if pins is not None:
        pins.replay()
    with no_grad():
        value = float(fn().data)
    if pins is not None and pins.cursor != len(pins.log):
        raise RuntimeError("pinned replay diverged from the recorded call sequence")
    return value


def _compare(fn, inputs, analytic, epsilon, tolerance, n_coords, rng, floor, names, pins) -> GradCheckReport:
    names = list(names) if names is not None else [t.name or f"input{i}" for i, t in enumerate(inputs)]
    report = GradCheckReport(0.0, True, tolerance)
    for name, t, ga in zip(names, inputs, analytic):
        flat = t.data.reshape(-1)
        count = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False) if count < flat.size else np.arange(flat.size)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            fp = _evaluate(fn, pins)
            flat[idx] = orig - epsilon
            fm = _evaluate(fn, pins)
            flat[idx] = orig
            numeric = (fp - fm) / (2 * epsilon)
            a = float(ga.reshape(-1)[idx])
            err = relative_error(a, numeric, floor)
            worst = max(worst, err)
            if err >= report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(idx), a, numeric)
        report.per_input[name] = worst
        report.n_checked += count
    report.passed = report.max_rel_error < tolerance
    return report
