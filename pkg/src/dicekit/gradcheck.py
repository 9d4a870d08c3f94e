"""Finite-difference verification of the autodiff backward passes.

Everything runs in float64 on both sides: parameters are promoted before the
analytic pass, and the same promoted tensors are perturbed for the numeric
pass.  Coordinates sitting on (or straddling) a non-differentiable point are
detected with a two-scale central difference plus a slope-jump probe and
reported as kinks instead of failures; subgradients at kinks are a modeling
choice, not a bug.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NonScalarLossError, Tensor, no_grad


@dataclass(frozen=True)
class GradCheckResult:
    """Per-parameter comparison of analytic and numeric gradients."""

    name: str
    checked: int
    kinks: int
    max_abs_err: float
    ok: bool


def _promote(params: dict) -> dict[str, Tensor]:
    out = {}
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        out[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    return out


def grad_check(
    fn,
    params: dict,
    n_samples: int = 25,
    delta: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare fn's analytic gradients against central differences.

    ``fn`` maps a parameter dict to a scalar Tensor and must be pure.  Per
    parameter, ``n_samples`` random coordinates are probed; a coordinate is a
    kink when the two finite-difference scales disagree or the slope-jump
    probe fires, and it is then skipped.  ``ok`` means every non-kink
    coordinate satisfied |analytic - numeric| <= atol + rtol * |numeric|.
    """
    p64 = _promote(params)
    loss = fn(p64)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise NonScalarLossError("grad_check needs fn to return a scalar Tensor")
    loss.backward()
    analytic = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in p64.items()
    }

    def value() -> float:
        with no_grad():
            return float(fn(p64).data)

    rng = np.random.default_rng(seed)
    results = []
    for name, p in p64.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        n = min(n_samples, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        kinks = 0
        checked = 0
        max_err = 0.0
        ok = True
        for i in coords:
            x0 = flat[i]
            f0 = value()
            flat[i] = x0 + delta
            fp = value()
            flat[i] = x0 - delta
            fm = value()
            flat[i] = x0 + 0.5 * delta
            fp2 = value()
            flat[i] = x0 - 0.5 * delta
            fm2 = value()
            flat[i] = x0
            fd1 = (fp - fm) / (2.0 * delta)
            fd2 = (fp2 - fm2) / delta
            jump = abs(fp + fm - 2.0 * f0) / delta
            scale = 1.0 + abs(fd1) + abs(fd2)
            if abs(fd1 - fd2) > 1e-3 * scale or jump > 1e-3 * scale:
                kinks += 1
                continue
            checked += 1
            err = abs(gflat[i] - fd1)
            if err > max_err:
                max_err = err
            if err > atol + rtol * abs(fd1):
                ok = False
        results.append(GradCheckResult(name, checked, kinks, max_err, ok))
    return results
