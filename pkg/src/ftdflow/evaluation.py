"""Distribution distances, trajectory diagnostics and restoration metrics."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PairDataset
from .distill import FtdContext, one_step_generate
from .errors import FormatError, ShapeMismatchError
from .flow import euler_sample
from .losses import adl_loss


def _as_matrix(samples) -> torch.Tensor:
    if isinstance(samples, (list, tuple)):
        samples = torch.stack([torch.as_tensor(s) for s in samples])
    x = torch.as_tensor(samples, dtype=torch.float64)
    return x.reshape(x.shape[0], -1)


def sliced_w2(a, b, n_projections: int = 128, seed: int = 0) -> float:
    """Mean over random unit directions of the 1-D W2 between projected samples.

    Unequal sample counts are compared through their quantile functions on a
    common grid.
    """
    xa, xb = _as_matrix(a), _as_matrix(b)
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        raise ValueError("sliced_w2 needs nonempty sample sets")
    if xa.shape[1] != xb.shape[1]:
        raise ShapeMismatchError("sliced_w2 sample dimension", xa.shape[1:], xb.shape[1:])
    gen = torch.Generator().manual_seed(seed)
    dirs = torch.randn(xa.shape[1], n_projections, generator=gen, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=0, keepdim=True)
    pa = torch.sort(xa @ dirs, dim=0).values
    pb = torch.sort(xb @ dirs, dim=0).values
    if pa.shape[0] != pb.shape[0]:
        m = max(pa.shape[0], pb.shape[0])
        q = (torch.arange(m, dtype=torch.float64) + 0.5) / m
        pa = pa[(q * pa.shape[0]).long()]
        pb = pb[(q * pb.shape[0]).long()]
    return float(torch.sqrt((pa - pb).pow(2).mean(dim=0)).mean())


def straightness(trajectory) -> float:
    """Mean distance of interior states to the endpoint chord, over chord length.

    Accepts a list of ``[B, *shape]`` states (or of unbatched states) and
    averages over the batch. A zero-length chord scores 0.
    """
    if len(trajectory) < 3:
        raise ValueError("straightness needs at least 3 states")
    states = [torch.as_tensor(s, dtype=torch.float64) for s in trajectory]
    if states[0].ndim <= 1:
        states = [s.reshape(1, -1) for s in states]
    x = torch.stack([s.reshape(s.shape[0], -1) for s in states], dim=1)  # [B, T, D]
    start, end = x[:, :1], x[:, -1:]
    chord = end - start
    length = chord.norm(dim=-1)  # [B, 1]
    safe = length.clamp_min(1e-300)
    rel = x[:, 1:-1] - start
    s = ((rel * chord).sum(-1) / safe.pow(2)).clamp(0, 1)
    dist = (rel - s[..., None] * chord).norm(dim=-1).mean(dim=1, keepdim=True)
    score = torch.where(length > 0, dist / safe, torch.zeros_like(dist))
    return float(score.mean())


def gaussian_oracle_velocity(mu, sigma: float, x_t: torch.Tensor, t: float) -> torch.Tensor:
    """Exact marginal velocity E[eps - x0 | x_t] for x0 ~ N(mu, sigma^2 I), eps ~ N(0, I)."""
    mu = torch.as_tensor(mu, dtype=x_t.dtype)
    tt = t.to(x_t.dtype).reshape(-1, *([1] * (x_t.ndim - 1))) if torch.is_tensor(t) and t.ndim else float(t)
    m = (1 - tt) * mu
    var = (1 - tt) ** 2 * sigma**2 + tt**2
    return ((tt - (1 - tt) * sigma**2) / var) * (x_t - m) - mu


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    runtime: float = 0.0

    def add(self, name: str, value: float, count: int, seed: int = 0) -> None:
        self.metrics[name] = float(value)
        self.counts[name] = int(count)
        self.seeds[name] = int(seed)

    def to_text(self) -> str:
        lines = [f"{k}={self.metrics[k]!r} count={self.counts[k]} seed={self.seeds[k]}" for k in self.metrics]
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value", "count", "seed"])
            for k, v in self.metrics.items():
                w.writerow([k, repr(v), self.counts[k], self.seeds[k]])
        return path

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        rep = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            try:
                head, count, seed = line.split(" ")
                name, value = head.split("=", 1)
                rep.add(name, float(value), int(count.split("=")[1]), int(seed.split("=")[1]))
            except ValueError as exc:
                raise FormatError(f"bad report line {line!r}") from exc
        return rep


def restoration_metrics(pred, truth, report: EvalReport | None = None, prefix: str = "") -> EvalReport:
    p, y = _as_matrix(pred), _as_matrix(truth)
    if p.shape[0] != y.shape[0]:
        raise ShapeMismatchError("restoration_metrics sample count", p.shape[:1], y.shape[:1])
    if p.shape != y.shape:
        raise ShapeMismatchError("restoration_metrics sample shape", p.shape, y.shape)
    report = report or EvalReport()
    n = p.shape[0]
    mse = float((p - y).pow(2).mean())
    report.add(prefix + "mse", mse, n)
    report.add(prefix + "mae", float((p - y).abs().mean()), n)
    data_range = float(y.max() - y.min())
    psnr = math.inf if mse == 0 else 10 * math.log10(data_range**2 / mse)
    report.add(prefix + "psnr", psnr, n)
    return report


def tv_energy_error(pred: torch.Tensor, truth: torch.Tensor) -> float:
    from .losses import tv_map

    return float((tv_map(pred) - tv_map(truth)).abs().mean())


@torch.no_grad()
def evaluate_run(student, teacher, holdout: PairDataset, ctx: FtdContext, n_projections: int = 128,
                 seed: int = 0, codec=None) -> EvalReport:
    """Score a distilled student on held-out pairs.

    The held-out x0 are the teacher's own multi-step samples, so they serve as
    the teacher distribution. The teacher is only used for trajectory
    straightness, re-integrated from the held-out noise.
    """
    from .data import codec_from_tag

    codec = codec or codec_from_tag(holdout.codec_tag)
    clock = time.perf_counter()
    rep = EvalReport()
    n = len(holdout)
    z_hat = one_step_generate(student, holdout.z_L, ctx)
    taps = list(getattr(student, "feature_taps", []))
    x_hat = codec.decode(z_hat)
    rep.add("sliced_w2_student_teacher", sliced_w2(x_hat, holdout.x0, n_projections, seed), n, seed)
    rep.add("sliced_w2_degraded_teacher", sliced_w2(holdout.x_L, holdout.x0, n_projections, seed), n, seed)
    restoration_metrics(x_hat, holdout.x0, rep)
    restoration_metrics(holdout.x_L, holdout.x0, rep, prefix="identity_")
    if x_hat.ndim == 4:
        rep.add("tv_energy_error", tv_energy_error(x_hat, holdout.x0), n)
    rep.add("adl", float(adl_loss(taps)) if taps else 0.0, n)
    if teacher is not None:
        _, traj = euler_sample(teacher, holdout.eps, holdout.teacher_steps)
        rep.add("teacher_straightness", straightness(traj), n)
    rep.runtime = time.perf_counter() - clock
    return rep
