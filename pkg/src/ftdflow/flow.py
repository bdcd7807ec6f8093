"""Probability paths, conditional velocities, the CFM objective and Euler sampling.

Samples are torch tensors with a leading batch dimension, ``[B, *shape]``.
Times are either Python scalars or 1-D tensors of length ``B``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .errors import DomainError, IntegrationError, ShapeMismatchError

Field = Callable[[torch.Tensor, "float | torch.Tensor"], torch.Tensor]


@dataclass(frozen=True)
class ProbabilityPath:
    """Coefficient schedule x_t = a(t) x0 + b(t) eps with analytic derivatives."""

    a: Callable
    b: Callable
    a_prime: Callable
    b_prime: Callable
    name: str = "custom"

    def check_boundaries(self, tol: float = 1e-12) -> None:
        ok = (
            abs(self.a(0.0) - 1) <= tol
            and abs(self.b(0.0)) <= tol
            and abs(self.a(1.0)) <= tol
            and abs(self.b(1.0) - 1) <= tol
        )
        if not ok:
            raise DomainError(f"path {self.name!r} violates a(0)=1, b(0)=0, a(1)=0, b(1)=1")


REFLOW = ProbabilityPath(
    a=lambda t: 1 - t,
    b=lambda t: t,
    a_prime=lambda t: -1.0 + 0 * t,
    b_prime=lambda t: 1.0 + 0 * t,
    name="reflow",
)

def _elementwise(fn):
    return lambda t: fn(t) if torch.is_tensor(t) else fn(torch.tensor(float(t), dtype=torch.float64)).item()


# Trigonometric path; used to exercise the general conditional velocity.
COSINE = ProbabilityPath(
    a=_elementwise(lambda t: torch.cos(math.pi / 2 * t)),
    b=_elementwise(lambda t: torch.sin(math.pi / 2 * t)),
    a_prime=_elementwise(lambda t: -math.pi / 2 * torch.sin(math.pi / 2 * t)),
    b_prime=_elementwise(lambda t: math.pi / 2 * torch.cos(math.pi / 2 * t)),
    name="cosine",
)


def expand_time(t, like: torch.Tensor):
    """Broadcast a scalar or per-item time vector against a batched sample."""
    if torch.is_tensor(t) and t.ndim > 0:
        if t.ndim != 1 or t.shape[0] != like.shape[0]:
            raise ShapeMismatchError("time vector vs batch", t.shape, like.shape[:1])
        return t.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))
    return float(t)


def _check_same(what: str, x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeMismatchError(what, x.shape, y.shape)


def _check_unit_interval(t) -> None:
    lo, hi = (float(t.min()), float(t.max())) if torch.is_tensor(t) else (float(t), float(t))
    if lo < 0 or hi > 1:
        raise DomainError(f"t must lie in [0, 1], got range [{lo}, {hi}]")


def interpolate(path: ProbabilityPath, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    _check_same("interpolate x0 vs eps", x0, eps)
    _check_unit_interval(t)
    tt = expand_time(t, x0)
    return path.a(tt) * x0 + path.b(tt) * eps


def general_conditional_velocity(path: ProbabilityPath, x_t: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Conditional velocity of an arbitrary path, written in terms of x_t and eps.

    Singular wherever a(t) or b(t) vanishes (the endpoints for ReFlow); those
    points raise DomainError rather than being evaluated as limits.
    """
    _check_same("conditional velocity x_t vs eps", x_t, eps)
    tt = expand_time(t, x_t)
    a, b = path.a(tt), path.b(tt)
    a_min = a.abs().min().item() if torch.is_tensor(a) else abs(a)
    b_min = b.abs().min().item() if torch.is_tensor(b) else abs(b)
    if a_min == 0 or b_min == 0:
        raise DomainError("general conditional velocity is singular where a(t)=0 or b(t)=0")
    ra = path.a_prime(tt) / a
    rb = path.b_prime(tt) / b
    return ra * x_t - eps * b * (ra - rb)


def reflow_conditional_velocity(x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _check_same("reflow velocity x0 vs eps", x0, eps)
    return eps - x0


def conditional_target(path: ProbabilityPath, x0, eps, x_t, t) -> torch.Tensor:
    if path is REFLOW:
        return reflow_conditional_velocity(x0, eps)
    return general_conditional_velocity(path, x_t, eps, t)


def cfm_loss(model: Field, x0: torch.Tensor, eps: torch.Tensor, t, path: ProbabilityPath = REFLOW) -> torch.Tensor:
    """Batch mean of ||model(x_t, t) - u_t(x_t | eps)||^2 (squared norm per item)."""
    if x0.shape[0] == 0:
        raise ValueError("cfm_loss needs a nonempty batch")
    x_t = interpolate(path, x0, eps, t)
    target = conditional_target(path, x0, eps, x_t, t)
    residual = model(x_t, t) - target
    return residual.pow(2).flatten(1).sum(1).mean()


@torch.no_grad()
def euler_sample(
    model: Field,
    eps: torch.Tensor,
    n_steps: int,
    t_start: float = 1.0,
    t_end: float = 0.0,
    keep_trajectory: bool = True,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Integrate dx/dt = model(x, t) from t_start to t_end with uniform Euler steps.

    Returns the endpoint and, when ``keep_trajectory``, all n_steps + 1 states.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not t_start > t_end:
        raise ValueError("t_start must exceed t_end")
    dt = (t_end - t_start) / n_steps
    x = eps
    traj = [x] if keep_trajectory else []
    for k in range(n_steps):
        t = t_start + k * dt
        x = x + dt * model(x, t)
        if not torch.isfinite(x).all():
            raise IntegrationError(k, t)
        if keep_trajectory:
            traj.append(x)
    return x, traj
