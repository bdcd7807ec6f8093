"""Flow trajectory distillation: the noise / LR / HR velocity triangle.

With T_L the time assigned to the degraded sample x_L, the three straight
trajectories eps -> x0, eps -> x_L and x_L -> x0 satisfy

    x0  = eps - u_t
    x_L = eps - (1 - T_L) u_lr
    x_L - x0 = T_L u_sr

so any one velocity is a linear function of the other two. The student
network parameterizes u_sr directly; u_lr is only ever implied.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DomainError, ShapeMismatchError
from .flow import expand_time

T_SAMPLERS = ("uniform", "near-lr")


@dataclass(frozen=True)
class FtdContext:
    t_lr: float = 0.25
    t_sampler: str = "uniform"

    def __post_init__(self):
        if not 0.0 < self.t_lr < 1.0:
            raise DomainError(f"T_L must lie strictly inside (0, 1), got {self.t_lr}")
        if self.t_sampler not in T_SAMPLERS:
            raise DomainError(f"unknown t sampler {self.t_sampler!r}; expected one of {T_SAMPLERS}")

    def sample_t(self, n: int, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
        """Draw n training times on [T_L, 1], one per item."""
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        if self.t_sampler == "near-lr":
            # density 2(1-u) on [0, 1]: concentrates mass near T_L
            u = 1 - torch.sqrt(1 - u)
        return (self.t_lr + (1 - self.t_lr) * u).to(dtype)


def _same(what, x, y):
    if x.shape != y.shape:
        raise ShapeMismatchError(what, x.shape, y.shape)


def lr_velocity_from_sr(u_t: torch.Tensor, u_sr: torch.Tensor, ctx: FtdContext) -> torch.Tensor:
    _same("u_t vs u_sr", u_t, u_sr)
    return (u_t - u_sr * ctx.t_lr) / (1 - ctx.t_lr)


def sr_velocity_from_lr(u_lr: torch.Tensor, u_t: torch.Tensor, ctx: FtdContext) -> torch.Tensor:
    _same("u_lr vs u_t", u_lr, u_t)
    return (u_t - (1 - ctx.t_lr) * u_lr) / ctx.t_lr


def triangle_velocities(eps, x0, x_lr, ctx: FtdContext):
    """Exact (u_t, u_lr, u_sr) for one pair; useful as an oracle."""
    u_t = eps - x0
    u_lr = (eps - x_lr) / (1 - ctx.t_lr)
    u_sr = (x_lr - x0) / ctx.t_lr
    return u_t, u_lr, u_sr


def _check_lr_range(t, t_lr: float) -> None:
    lo, hi = (float(t.min()), float(t.max())) if torch.is_tensor(t) else (float(t), float(t))
    if lo < t_lr or hi > 1:
        raise DomainError(f"t must lie in [T_L, 1] = [{t_lr}, 1], got range [{lo}, {hi}]")


def lr_interpolate(x_lr: torch.Tensor, eps: torch.Tensor, t, ctx: FtdContext) -> torch.Tensor:
    """Point on the straight path that leaves x_L at T_L and reaches eps at 1."""
    _same("x_L vs eps", x_lr, eps)
    _check_lr_range(t, ctx.t_lr)
    tt = expand_time(t, x_lr)
    span = 1 - ctx.t_lr
    return ((1 - tt) / span) * x_lr + ((tt - ctx.t_lr) / span) * eps


def implied_lr_model(model, x_t: torch.Tensor, t, u_t_cond: torch.Tensor, ctx: FtdContext) -> torch.Tensor:
    """LR-flow prediction implied by the student's SR-velocity output."""
    _check_lr_range(t, ctx.t_lr)
    return lr_velocity_from_sr(u_t_cond, model(x_t, t), ctx)


def ftd_loss(model, eps: torch.Tensor, x0: torch.Tensor, x_lr: torch.Tensor, t, ctx: FtdContext) -> torch.Tensor:
    """Mean squared residual of (u_t - v(x_t, t) T_L) - (eps - x_L).

    ``x0`` and ``x_lr`` may equally be latents (z0, z_L); the algebra is the same.
    """
    _same("eps vs x0", eps, x0)
    _same("eps vs x_L", eps, x_lr)
    x_t = lr_interpolate(x_lr, eps, t, ctx)
    u_t = eps - x0
    residual = (u_t - model(x_t, t) * ctx.t_lr) - (eps - x_lr)
    return residual.pow(2).mean()


def one_step_generate(model, x_lr: torch.Tensor, ctx: FtdContext) -> torch.Tensor:
    return x_lr - model(x_lr, ctx.t_lr) * ctx.t_lr
