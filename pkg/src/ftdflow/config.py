"""Line-based ``key=value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Every key must appear
in ``KEYS``; ``--set key=value`` on the command line overrides the file.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .data import DegradationConfig, SyntheticDistribution, codec_from_tag
from .distill import FtdContext
from .errors import ConfigError
from .losses import LossWeights, PerceptualExtractor
from .models import MlpField, TokenTransformerField
from .training import DistillConfig, OptimizerConfig, TeacherConfig


def _floats(text: str) -> tuple:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _vectors(text: str) -> tuple:
    text = text.strip()
    return tuple(_floats(part) for part in text.split(";")) if text else ()


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in _floats(text))


# key -> (parser, default, description)
KEYS = {
    "seed": (int, "0", "training / sampling seed (also --seed)"),
    "dist.kind": (str, "gaussian-mixture-2d", "gaussian-mixture-2d | two-moons | checkerboard | tiny-textures"),
    "dist.means": (_vectors, "", "mixture means, components separated by ';' (empty: circle)"),
    "dist.weights": (_floats, "", "mixture weights (empty: uniform)"),
    "dist.scale": (float, "0.1", "component std / point jitter"),
    "dist.components": (int, "8", "number of circle components when dist.means is empty"),
    "dist.radius": (float, "1.0", "circle radius"),
    "dist.size": (int, "16", "texture side length"),
    "dist.band": (_floats, "2,5", "texture frequency band, cycles per image"),
    "dist.waves": (int, "3", "plane waves per texture"),
    "dist.seed": (int, "0", "distribution seed"),
    "model.family": (str, "mlp", "mlp | transformer"),
    "model.hidden": (_ints, "128,128", "MLP hidden widths"),
    "model.patch": (int, "2", "transformer patch size"),
    "model.dim": (int, "64", "transformer token dim"),
    "model.layers": (int, "4", "transformer layers"),
    "model.heads": (int, "4", "transformer heads"),
    "model.seed": (int, "0", "parameter init seed"),
    "teacher.iters": (int, "20000", "teacher iterations"),
    "teacher.lr": (float, "1e-3", "teacher learning rate"),
    "teacher.batch": (int, "0", "teacher batch size (0: 64 points / 16 images)"),
    "pairs.count": (int, "2048", "number of pairs to generate"),
    "pairs.start": (int, "0", "index of the first generated pair"),
    "pairs.steps": (int, "50", "teacher Euler steps per pair"),
    "pairs.seed_base": (int, "0", "noise seed of pair i is seed_base + i"),
    "pairs.chunk": (int, "64", "teacher batch size during generation"),
    "degrade.blur": (float, "0", "Gaussian blur sigma (images)"),
    "degrade.factor": (int, "1", "down/up-sampling factor (images)"),
    "degrade.noise": (float, "0", "additive noise sigma"),
    "degrade.shrink": (float, "0", "convex shrink weight toward degrade.center (points)"),
    "degrade.center": (_floats, "", "shrink center (empty: origin)"),
    "degrade.seed": (int, "0", "degradation noise seed"),
    "codec": (str, "identity", "latent codec tag: identity | scale:<s>"),
    "distill.t_lr": (float, "0.25", "time assigned to the degraded sample"),
    "distill.t_sampler": (str, "uniform", "uniform | near-lr"),
    "distill.iters": (int, "10000", "student iterations"),
    "distill.lr": (float, "1e-4", "student learning rate"),
    "distill.batch": (int, "0", "student batch size (0: 64 points / 16 images)"),
    "loss.ftd": (float, "1.0", "weight of the FTD term"),
    "loss.rec": (float, "1.0", "weight of the reconstruction term"),
    "loss.lambda": (float, "1.0", "perceptual weight inside the reconstruction term"),
    "loss.gamma": (float, "1.0", "TV weight inside the perceptual term"),
    "loss.mu": (float, "0.1", "ADL weight"),
    "loss.adl_epsilon": (float, "1e-8", "cosine norm guard"),
    "opt.beta1": (float, "0.9", "Adam beta1"),
    "opt.beta2": (float, "0.999", "Adam beta2"),
    "opt.weight_decay": (float, "0", "Adam weight decay"),
    "opt.clip": (float, "10.0", "gradient-norm clip (0: off)"),
    "perc.seed": (int, "0", "perceptual extractor seed"),
    "perc.widths": (_ints, "8,16,32", "perceptual extractor stage widths"),
    "train.checkpoint_every": (int, "0", "intermediate checkpoint cadence (0: final only)"),
    "generate.count": (int, "10000", "teacher samples to draw"),
    "generate.steps": (int, "50", "teacher Euler steps"),
    "generate.seed_base": (int, "1000000000", "noise seed base for generate"),
    "eval.projections": (int, "128", "sliced-W2 projections"),
    "eval.seed": (int, "0", "sliced-W2 projection seed"),
    "in.teacher": (str, "", "teacher checkpoint path"),
    "in.student": (str, "", "student checkpoint path"),
    "in.dataset": (str, "", "training pair dataset path"),
    "in.holdout": (str, "", "held-out pair dataset path"),
    "in.inputs": (str, "", "restore inputs: .npy array or pair dataset (uses x_L)"),
    "in.resume": (str, "", "checkpoint to resume training from"),
    "in.plot": (str, "", "comma-separated reports (.txt), sample arrays (.npy) or loss logs (.log)"),
}


class Config:
    def __init__(self, raw: dict[str, str] | None = None):
        self.raw = {k: v[1] for k, v in KEYS.items()}
        for k, v in (raw or {}).items():
            self.set(k, v)

    def set(self, key: str, value: str) -> None:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = KEYS[key][0]
        try:
            parser(value.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        self.raw[key] = value.strip()

    def __getitem__(self, key: str):
        return KEYS[key][0](self.raw[key])

    @classmethod
    def parse(cls, text: str) -> "Config":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            cfg.set(k, v)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in KEYS)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    # builders -------------------------------------------------------------

    def distribution(self) -> SyntheticDistribution:
        return SyntheticDistribution(
            kind=self["dist.kind"], means=self["dist.means"], weights=self["dist.weights"],
            scale=self["dist.scale"], n_components=self["dist.components"], radius=self["dist.radius"],
            size=self["dist.size"], band=self["dist.band"], n_waves=self["dist.waves"], seed=self["dist.seed"],
        )

    def degradation(self) -> DegradationConfig:
        return DegradationConfig(
            blur=self["degrade.blur"], factor=self["degrade.factor"], noise=self["degrade.noise"],
            shrink=self["degrade.shrink"], center=self["degrade.center"], seed=self["degrade.seed"],
        )

    def codec(self):
        return codec_from_tag(self["codec"])

    def model(self, sample_shape):
        family = self["model.family"]
        if family == "mlp":
            return MlpField(sample_shape, hidden=self["model.hidden"], seed=self["model.seed"])
        if family == "transformer":
            return TokenTransformerField(sample_shape, patch=self["model.patch"], dim=self["model.dim"],
                                         layers=self["model.layers"], heads=self["model.heads"], seed=self["model.seed"])
        raise ConfigError(f"unknown model family {family!r}")

    def _optimizer(self, lr: float) -> OptimizerConfig:
        return OptimizerConfig(lr=lr, betas=(self["opt.beta1"], self["opt.beta2"]),
                               weight_decay=self["opt.weight_decay"], clip=self["opt.clip"])

    @staticmethod
    def _auto_batch(value: int, sample_shape) -> int:
        return value or (16 if len(sample_shape) == 3 else 64)

    def teacher(self, sample_shape) -> TeacherConfig:
        return TeacherConfig(iters=self["teacher.iters"], batch=self._auto_batch(self["teacher.batch"], sample_shape),
                             seed=self["seed"], optimizer=self._optimizer(self["teacher.lr"]),
                             checkpoint_every=self["train.checkpoint_every"])

    def ftd_context(self) -> FtdContext:
        return FtdContext(self["distill.t_lr"], self["distill.t_sampler"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(ftd=self["loss.ftd"], rec=self["loss.rec"], lam=self["loss.lambda"],
                           gamma=self["loss.gamma"], mu=self["loss.mu"], adl_epsilon=self["loss.adl_epsilon"])

    def distill(self, sample_shape) -> DistillConfig:
        return DistillConfig(ctx=self.ftd_context(), weights=self.loss_weights(),
                             optimizer=self._optimizer(self["distill.lr"]),
                             batch=self._auto_batch(self["distill.batch"], sample_shape), iters=self["distill.iters"],
                             seed=self["seed"], checkpoint_every=self["train.checkpoint_every"])

    def extractor(self, sample_shape):
        if len(sample_shape) != 3:
            return None
        return PerceptualExtractor(sample_shape[0], widths=self["perc.widths"], seed=self["perc.seed"])
