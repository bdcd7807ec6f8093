"""Command-line entry point.

    ftd <subcommand> [--config PATH] [--set key=value]... [--seed N] [--out DIR]

Precedence: built-in defaults < config file < --set flags < --seed.
``--out`` defaults to ``$FTD_OUT/<subcommand>`` (``$FTD_OUT`` defaults to ``runs``).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import KEYS, Config
from .data import PairDataset, generate_pairs, standard_noise
from .distill import FtdContext, one_step_generate
from .errors import (ConfigError, DivergenceError, DomainError, FormatError, FtdError, IntegrationError,
                     ShapeMismatchError)
from .evaluation import EvalReport, evaluate_run
from .flow import euler_sample
from .models import Checkpoint
from .plotting import plot_inputs
from .training import distill_student, train_teacher

SUBCOMMANDS = ("train-teacher", "gen-pairs", "distill", "generate", "restore", "eval", "plot")

EXIT_CODES = [
    (ConfigError, 2),
    (FileNotFoundError, 3),
    (FormatError, 4),
    (DivergenceError, 5),
    (IntegrationError, 5),
    (FloatingPointError, 5),
    (ShapeMismatchError, 6),
    (DomainError, 7),
    (FtdError, 1),
    (ValueError, 7),
    (OSError, 8),
]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftd", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--list-keys", action="store_true", help="print the config key set and exit")
    return p


def resolve_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    return cfg


def _require(cfg: Config, key: str) -> Path:
    value = cfg[key]
    if not value:
        raise ConfigError(f"{key} must be set for this subcommand")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{key}: no such file {path}")
    return path


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")


def write_manifest(out: Path, sub: str, cfg: Config) -> Path:
    head = f"# subcommand={sub}\n# code_version={__version__}\n# config_digest={cfg.digest()}\n"
    path = out / "run.manifest"
    path.write_text(head + cfg.to_text(), encoding="utf-8")
    return path


def cmd_train_teacher(cfg: Config, out: Path) -> None:
    dist = cfg.distribution()
    model = cfg.model(dist.sample_shape)
    resume = Checkpoint.load(_require(cfg, "in.resume")) if cfg["in.resume"] else None
    with (out / "loss.log").open("w", encoding="utf-8") as fh:
        res = train_teacher(model, dist, cfg.teacher(dist.sample_shape), resume=resume, out_dir=out, loss_log=fh)
    res.manifest.write(out / "train.manifest")
    res.checkpoint.save(out / "teacher.ftdm")


def cmd_gen_pairs(cfg: Config, out: Path) -> None:
    teacher = Checkpoint.load(_require(cfg, "in.teacher")).build()
    teacher.eval()
    ds = generate_pairs(teacher, cfg["pairs.count"], cfg["pairs.steps"], cfg.degradation(), cfg.codec(),
                        seed_base=cfg["pairs.seed_base"], chunk=cfg["pairs.chunk"], start=cfg["pairs.start"])
    path = ds.save(out / "pairs.ftdp")
    keys = [k for k in KEYS if k.split(".")[0] in ("pairs", "degrade", "codec") or k == "in.teacher"]
    side = [f"{k}={cfg.raw[k]}" for k in keys] + [f"dataset_digest={ds.digest()}"]
    (out / "pairs.ftdp.manifest").write_text("\n".join(side) + "\n", encoding="utf-8")
    return path


def cmd_distill(cfg: Config, out: Path) -> None:
    ds = PairDataset.load(_require(cfg, "in.dataset"))
    student = cfg.model(ds.latent_shape)
    resume = Checkpoint.load(_require(cfg, "in.resume")) if cfg["in.resume"] else None
    with (out / "loss.log").open("w", encoding="utf-8") as fh:
        res = distill_student(student, ds, cfg.distill(ds.latent_shape), extractor=cfg.extractor(ds.sample_shape),
                              codec=cfg.codec(), resume=resume, out_dir=out, loss_log=fh)
    res.manifest.write(out / "train.manifest")
    res.checkpoint.save(out / "student.ftdm")


@torch.no_grad()
def cmd_generate(cfg: Config, out: Path) -> None:
    teacher = Checkpoint.load(_require(cfg, "in.teacher")).build()
    n, base, chunk = cfg["generate.count"], cfg["generate.seed_base"], cfg["pairs.chunk"]
    parts = []
    for lo in range(0, n, chunk):
        eps = torch.stack([standard_noise(teacher.sample_shape, base + i) for i in range(lo, min(lo + chunk, n))])
        x, _ = euler_sample(teacher, eps, cfg["generate.steps"], keep_trajectory=False)
        parts.append(x)
    samples = torch.cat(parts)
    _check_finite(samples, "teacher samples")
    np.save(out / "samples.npy", samples.numpy())


def _load_student(cfg: Config):
    ckpt = Checkpoint.load(_require(cfg, "in.student"))
    if "t_lr" not in ckpt.header:
        raise FormatError("student checkpoint does not record T_L")
    return ckpt.build(), FtdContext(float(ckpt.header["t_lr"]), cfg["distill.t_sampler"])


@torch.no_grad()
def cmd_restore(cfg: Config, out: Path) -> None:
    student, ctx = _load_student(cfg)
    src = _require(cfg, "in.inputs")
    codec = cfg.codec()
    if src.suffix == ".npy":
        z_lr = codec.encode(torch.from_numpy(np.load(src).astype(np.float32)))
    else:
        ds = PairDataset.load(src)
        z_lr = ds.z_L
    restored = codec.decode(one_step_generate(student, z_lr, ctx))
    _check_finite(restored, "restored outputs")
    np.save(out / "restored.npy", restored.numpy())


@torch.no_grad()
def cmd_eval(cfg: Config, out: Path) -> None:
    student, ctx = _load_student(cfg)
    holdout = PairDataset.load(_require(cfg, "in.holdout"))
    teacher = Checkpoint.load(_require(cfg, "in.teacher")).build() if cfg["in.teacher"] else None
    rep = evaluate_run(student, teacher, holdout, ctx, cfg["eval.projections"], cfg["eval.seed"])
    if not all(np.isfinite(v) or v == np.inf for v in rep.metrics.values()):
        raise FloatingPointError("non-finite metric in report")
    rep.save(out / "report.txt")
    rep.to_csv(out / "report.csv")


def cmd_plot(cfg: Config, out: Path) -> None:
    if not cfg["in.plot"]:
        raise ConfigError("in.plot must be set for plot")
    paths = [Path(p) for p in cfg["in.plot"].split(",") if p]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"in.plot: no such file {p}")
    plot_inputs(paths, out)


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "gen-pairs": cmd_gen_pairs,
    "distill": cmd_distill,
    "generate": cmd_generate,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if "--list-keys" in argv:
        for k, (_, default, doc) in KEYS.items():
            print(f"{k}={default}\t# {doc}")
        return 0
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = args.out or Path(os.environ.get("FTD_OUT", "runs")) / args.subcommand
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.subcommand, cfg)
        torch.set_num_threads(1)
        COMMANDS[args.subcommand](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = exit_code_for(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ftd {args.subcommand}: error: {msg}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
