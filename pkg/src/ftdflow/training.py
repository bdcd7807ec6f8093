"""Teacher pretraining (CFM on the straight path) and student distillation.

Every iteration draws its randomness from a generator keyed on
``(seed, iteration)``, so a run resumed from a checkpoint replays exactly the
same batches as an uninterrupted run.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .data import IdentityCodec, PairDataset, SyntheticDistribution, index_rng
from .distill import FtdContext
from .errors import DivergenceError, ShapeMismatchError
from .flow import REFLOW, cfm_loss
from .losses import LossWeights, PerceptualExtractor, composite_loss
from .models import Checkpoint, VectorFieldModel

log = logging.getLogger(__name__)

TEACHER_STREAM = 1
STUDENT_STREAM = 2


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    clip: float = 10.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


@dataclass(frozen=True)
class TeacherConfig:
    iters: int = 20000
    batch: int = 64
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig(lr=1e-3)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iteration count must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    ctx: FtdContext = FtdContext()
    weights: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig(lr=1e-4)
    batch: int = 64
    iters: int = 10000
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iteration count must be >= 1")


def config_digest(cfg) -> str:
    return hashlib.sha256(repr(asdict(cfg)).encode()).hexdigest()


@dataclass
class RunManifest:
    """Identity of a training run; checkpoints carry its digest."""

    role: str
    model_family: str
    config_digest: str
    dataset_digest: str = ""
    code_version: str = __version__
    extra: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        items = {
            "role": self.role,
            "model_family": self.model_family,
            "config_digest": self.config_digest,
            "dataset_digest": self.dataset_digest,
            "code_version": self.code_version,
            **{k: str(v) for k, v in sorted(self.extra.items())},
        }
        return [f"{k}={v}" for k, v in items.items()]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        return path


@dataclass
class TrainResult:
    model: VectorFieldModel
    history: list[dict]
    checkpoint: Checkpoint
    manifest: RunManifest


def iteration_generator(seed: int, stream: int, it: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, stream, it]).generate_state(1, np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & (2**63 - 1))


def make_optimizer(model, cfg: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def _optimizer_arrays(model, opt):
    params = list(model.parameters())
    states = [opt.state.get(p, {}) for p in params]
    if not states or "step" not in states[0]:
        return 0, None, None
    step = int(states[0]["step"])
    m = torch.cat([s["exp_avg"].reshape(-1) for s in states]).float().numpy()
    v = torch.cat([s["exp_avg_sq"].reshape(-1) for s in states]).float().numpy()
    return step, m, v


def _restore_optimizer(model, opt, ckpt: Checkpoint):
    if not ckpt.opt_step:
        return
    off = 0
    for p in model.parameters():
        n = p.numel()
        opt.state[p] = {
            "step": torch.tensor(float(ckpt.opt_step)),
            "exp_avg": torch.from_numpy(ckpt.exp_avg[off : off + n].copy()).reshape(p.shape).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(ckpt.exp_avg_sq[off : off + n].copy()).reshape(p.shape).to(p.dtype),
        }
        off += n


def snapshot(model, opt, iteration: int, manifest: RunManifest, **extra) -> Checkpoint:
    step, m, v = _optimizer_arrays(model, opt)
    header = {
        "model": model.hyperparameters(),
        "iteration": iteration,
        "role": manifest.role,
        "manifest": manifest.digest(),
        **extra,
    }
    return Checkpoint(header, model.flat_parameters().float().numpy(), step if m is not None else None, m, v)


def _fit(model, opt_cfg: OptimizerConfig, iters: int, step_fn: Callable, manifest: RunManifest,
         resume: Checkpoint | None, checkpoint_every: int, out_dir, loss_log, extra: dict) -> TrainResult:
    opt = make_optimizer(model, opt_cfg)
    start = 0
    if resume is not None:
        model.load_flat_parameters(torch.from_numpy(resume.params))
        _restore_optimizer(model, opt, resume)
        start = int(resume.header.get("iteration", 0))
    out_dir = Path(out_dir) if out_dir else None
    history = []
    last_good = snapshot(model, opt, start, manifest, **extra)
    last_good_path = None
    params = list(model.parameters())
    for it in range(start, iters):
        opt.zero_grad(set_to_none=True)
        loss, breakdown = step_fn(it)
        if not torch.isfinite(loss):
            if out_dir:
                last_good_path = str(last_good.save(out_dir / f"{manifest.role}_last_good.ftdm"))
            raise DivergenceError(it, last_good_path)
        if loss.requires_grad:
            loss.backward()
            if opt_cfg.clip:
                torch.nn.utils.clip_grad_norm_(params, opt_cfg.clip)
            opt.step()
        record = {"iter": it, **breakdown}
        history.append(record)
        if loss_log is not None:
            loss_log.write(" ".join(f"{k}={v!r}" for k, v in record.items()) + "\n")
        if checkpoint_every and (it + 1) % checkpoint_every == 0:
            last_good = snapshot(model, opt, it + 1, manifest, **extra)
            if out_dir:
                last_good.save(out_dir / f"{manifest.role}_{it + 1:07d}.ftdm")
    final = snapshot(model, opt, iters, manifest, **extra)
    return TrainResult(model, history, final, manifest)


def train_teacher(model: VectorFieldModel, dist: SyntheticDistribution, cfg: TeacherConfig, *,
                  resume: Checkpoint | None = None, out_dir=None, loss_log=None) -> TrainResult:
    """Fit ``model`` with the CFM objective: x0 ~ dist, eps ~ N(0, I), t ~ U[0, 1]."""
    if tuple(model.sample_shape) != tuple(dist.sample_shape):
        raise ShapeMismatchError("teacher model vs distribution", model.sample_shape, dist.sample_shape)
    manifest = RunManifest("teacher", model.family, config_digest(cfg),
                           extra={"distribution": repr(dist)})

    def step(it):
        rng = index_rng(cfg.seed, TEACHER_STREAM, it)
        x0 = torch.from_numpy(dist.draw(rng, cfg.batch).astype(np.float32))
        eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
        t = torch.from_numpy(rng.random(cfg.batch).astype(np.float32))
        loss = cfm_loss(model, x0, eps, t, REFLOW)
        return loss, {"cfm": loss.item()}

    return _fit(model, cfg.optimizer, cfg.iters, step, manifest, resume, cfg.checkpoint_every, out_dir, loss_log, {})


def distill_student(student: VectorFieldModel, dataset: PairDataset, cfg: DistillConfig, *,
                    extractor: PerceptualExtractor | None = None, codec=None,
                    resume: Checkpoint | None = None, out_dir=None, loss_log=None) -> TrainResult:
    """Distill a one-step restorer from precomputed pairs; no teacher is evaluated.

    Per iteration: draw a batch of pairs, draw t on [T_L, 1] per item, and take
    one optimizer step on ftd + rec + mu * adl.
    """
    codec = codec or IdentityCodec()
    if tuple(student.sample_shape) != tuple(dataset.latent_shape):
        raise ShapeMismatchError("student model vs dataset latents", student.sample_shape, dataset.latent_shape)
    if codec.tag != dataset.codec_tag:
        raise ValueError(f"codec {codec.tag!r} does not match dataset codec {dataset.codec_tag!r}")
    if extractor is None and len(dataset.sample_shape) == 3:
        extractor = PerceptualExtractor(dataset.sample_shape[0])
    manifest = RunManifest("student", student.family, config_digest(cfg), dataset.digest(),
                           extra={"t_lr": cfg.ctx.t_lr})
    n = len(dataset)

    def step(it):
        gen = iteration_generator(cfg.seed, STUDENT_STREAM, it)
        idx = torch.randint(n, (cfg.batch,), generator=gen)
        t = cfg.ctx.sample_t(cfg.batch, gen)
        return composite_loss(student, dataset.batch(idx), t, cfg.ctx, extractor, cfg.weights, codec)

    return _fit(student, cfg.optimizer, cfg.iters, step, manifest, resume, cfg.checkpoint_every, out_dir,
                loss_log, {"t_lr": cfg.ctx.t_lr})
