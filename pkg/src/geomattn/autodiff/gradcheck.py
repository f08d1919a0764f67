"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


class GradCheckError(ArithmeticError):
    """The checked function produced a non-finite value."""


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


def _scalar(fn, point) -> float:
    out = fn(point)
    value = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise GradCheckError(f"function value is not finite: {value}")
    return value


def gradient_report(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5,
                    indices: Optional[np.ndarray] = None, floor: float = 1e-8) -> GradCheckResult:
    """Compare the tape gradient of ``fn`` at ``point`` with central differences.

    ``point`` is perturbed in place and restored, so it may be a parameter that
    ``fn`` reads through closure. ``indices`` restricts the check to a subset of
    flat coordinates. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not point.requires_grad:
        raise ValueError("point must have requires_grad=True")
    point.grad = None
    out = fn(point)
    if not np.isfinite(out.item()):
        raise GradCheckError(f"function value is not finite: {out.item()}")
    out.backward()
    analytic_full = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    point.grad = None

    flat = point.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    numeric = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        try:
            flat[i] = orig + step
            fp = _scalar(fn, point)
            flat[i] = orig - step
            fm = _scalar(fn, point)
        except GradCheckError as exc:
            raise GradCheckError(f"coordinate {int(i)}: {exc}") from None
        finally:
            flat[i] = orig
        numeric[n] = (fp - fm) / (2.0 * step)
    analytic = analytic_full.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckResult(analytic, numeric, np.abs(analytic - numeric) / denom)


def check_gradients(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5,
                    **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_report(fn, point, step, **kwargs).max_rel_error
