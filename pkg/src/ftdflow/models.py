"""Small vector-field networks and their checkpoint format.

Two families share one calling convention, ``model(x, t) -> velocity`` with
``x`` of shape ``[B, *sample_shape]``:

* ``MlpField`` flattens the sample, appends a sinusoidal time embedding and
  runs a SiLU MLP.
* ``TokenTransformerField`` patchifies an image into tokens, adds a projected
  time embedding and runs pre-norm transformer blocks. The output of every
  block is kept in ``feature_taps`` until the next forward pass.

Both zero-initialize their output projection, so a fresh model returns zero
velocity everywhere.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ShapeMismatchError

TIME_EMBED_DIM = 16


def time_embedding(t, batch: int, dtype=torch.float32) -> torch.Tensor:
    """[B, 16] sinusoidal embedding; the lowest frequency is injective on [0, 1]."""
    if torch.is_tensor(t) and t.ndim > 0:
        tt = t.to(dtype).reshape(-1, 1)
    else:
        tt = torch.full((batch, 1), float(t), dtype=dtype)
    freqs = math.pi * 2.0 ** torch.arange(TIME_EMBED_DIM // 2, dtype=dtype)
    ang = tt * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


@contextlib.contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class VectorFieldModel(nn.Module):
    """Common surface: shape checking, flat parameter view, feature taps."""

    family: str = ""

    def __init__(self, sample_shape):
        super().__init__()
        self.sample_shape = tuple(int(s) for s in sample_shape)
        self._taps: list[torch.Tensor] = []

    def hyperparameters(self) -> dict:
        raise NotImplementedError

    @property
    def feature_taps(self) -> list[torch.Tensor]:
        return list(self._taps)

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach()

    def load_flat_parameters(self, flat) -> None:
        flat = torch.as_tensor(flat)
        n = sum(p.numel() for p in self.parameters())
        if flat.numel() != n:
            raise ShapeMismatchError("parameter vector", flat.shape, (n,))
        nn.utils.vector_to_parameters(flat.to(next(self.parameters()).dtype), self.parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_input(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.sample_shape:
            raise ShapeMismatchError(f"{self.family} input", x.shape[1:], self.sample_shape)


class MlpField(VectorFieldModel):
    family = "mlp"

    def __init__(self, sample_shape, hidden=(128, 128), seed=0):
        super().__init__(sample_shape)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed
        d = int(np.prod(self.sample_shape))
        widths = [d + TIME_EMBED_DIM, *self.hidden, d]
        with _seeded(seed):
            self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)
        self.widths = widths

    def hyperparameters(self):
        return {"family": self.family, "sample_shape": list(self.sample_shape), "hidden": list(self.hidden), "seed": self.seed}

    def forward(self, x, t):
        self._check_input(x)
        b = x.shape[0]
        h = torch.cat([x.reshape(b, -1), time_embedding(t, b, x.dtype)], dim=1)
        for layer in self.layers[:-1]:
            h = nn.functional.silu(layer(h))
        return self.layers[-1](h).reshape(x.shape)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(approximate="tanh"), nn.Linear(2 * dim, dim))

    def forward(self, h):
        b, n, d = h.shape
        q, k, v = self.qkv(self.norm1(h)).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads), dim=-1)
        h = h + self.proj((att @ v).transpose(1, 2).reshape(b, n, d))
        return h + self.mlp(self.norm2(h))


class TokenTransformerField(VectorFieldModel):
    family = "transformer"

    def __init__(self, sample_shape, patch=2, dim=64, layers=4, heads=4, seed=0):
        super().__init__(sample_shape)
        if len(self.sample_shape) != 3:
            raise ShapeMismatchError("transformer sample shape (c, h, w)", self.sample_shape, ("c", "h", "w"))
        c, h, w = self.sample_shape
        if h % patch or w % patch:
            raise ShapeMismatchError(f"image extent vs patch {patch}", (h, w), (patch, patch))
        if dim % heads:
            raise ValueError("token dim must be divisible by head count")
        self.patch, self.dim, self.n_layers, self.heads, self.seed = patch, dim, layers, heads, seed
        self.n_tokens = (h // patch) * (w // patch)
        token_in = c * patch * patch
        with _seeded(seed):
            self.embed = nn.Linear(token_in, dim)
            self.time_proj = nn.Linear(TIME_EMBED_DIM, dim)
            self.pos = nn.Parameter(0.02 * torch.randn(self.n_tokens, dim))
            self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(layers))
            self.norm_out = nn.LayerNorm(dim)
            self.out = nn.Linear(dim, token_in)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def hyperparameters(self):
        return {
            "family": self.family,
            "sample_shape": list(self.sample_shape),
            "patch": self.patch,
            "dim": self.dim,
            "layers": self.n_layers,
            "heads": self.heads,
            "seed": self.seed,
        }

    def tokenize(self, x):
        b, c, h, w = x.shape
        p = self.patch
        return x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5).reshape(b, self.n_tokens, c * p * p)

    def untokenize(self, tokens):
        b = tokens.shape[0]
        c, h, w = self.sample_shape
        p = self.patch
        return tokens.reshape(b, h // p, w // p, c, p, p).permute(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)

    def forward(self, x, t):
        self._check_input(x)
        b = x.shape[0]
        h = self.embed(self.tokenize(x)) + self.pos + self.time_proj(time_embedding(t, b, x.dtype))[:, None, :]
        taps = []
        for block in self.blocks:
            h = block(h)
            taps.append(h)
        self._taps = taps
        return self.untokenize(self.out(self.norm_out(h)))


def build_model(hparams: dict) -> VectorFieldModel:
    hp = dict(hparams)
    family = hp.pop("family")
    if family == "mlp":
        return MlpField(hp["sample_shape"], hidden=hp.get("hidden", (128, 128)), seed=hp.get("seed", 0))
    if family == "transformer":
        return TokenTransformerField(
            hp["sample_shape"], patch=hp["patch"], dim=hp["dim"], layers=hp["layers"], heads=hp["heads"], seed=hp.get("seed", 0)
        )
    raise FormatError(f"unknown model family {family!r}")


def gradient(model: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> torch.Tensor:
    """Reverse-mode derivative of ``loss_fn()`` w.r.t. all parameters, flattened."""
    params = list(model.parameters())
    loss = loss_fn()
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params), dtype=params[0].dtype)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])
    if not torch.isfinite(flat).all():
        raise FloatingPointError("non-finite gradient; loss is not differentiable at this point")
    return flat


# ---------------------------------------------------------------------------
# checkpoint format
#
#   b"FTDM" | u32 version | u32 len | header JSON (utf-8, sorted keys)
#   | u64 n | n x f32 parameters
#   [ | b"OPTS" | u64 step | u64 n | n x f32 first moment | n x f32 second moment ]
#
# All integers and floats are little-endian.

CKPT_MAGIC = b"FTDM"
CKPT_VERSION = 1
OPT_MAGIC = b"OPTS"


class Checkpoint:
    """Model hyperparameters, float32 parameters and optional Adam moments."""

    def __init__(self, header: dict, params: np.ndarray, opt_step: int | None = None, exp_avg=None, exp_avg_sq=None):
        self.header = header
        self.params = np.ascontiguousarray(params, dtype="<f4")
        self.opt_step = opt_step
        self.exp_avg = None if exp_avg is None else np.ascontiguousarray(exp_avg, dtype="<f4")
        self.exp_avg_sq = None if exp_avg_sq is None else np.ascontiguousarray(exp_avg_sq, dtype="<f4")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode()
        buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head)
        buf.write(struct.pack("<Q", self.params.size) + self.params.tobytes())
        if self.opt_step is not None:
            buf.write(OPT_MAGIC + struct.pack("<QQ", self.opt_step, self.exp_avg.size))
            buf.write(self.exp_avg.tobytes() + self.exp_avg_sq.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            if data[:4] != CKPT_MAGIC:
                raise FormatError("not a model checkpoint (bad magic)")
            version, hlen = struct.unpack_from("<II", data, 4)
            if version != CKPT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            off = 12
            header = json.loads(data[off : off + hlen].decode())
            off += hlen
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            params = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy()
            off += 4 * n
            step = m = v = None
            if off < len(data):
                if data[off : off + 4] != OPT_MAGIC:
                    raise FormatError("trailing bytes after parameter block")
                step, k = struct.unpack_from("<QQ", data, off + 4)
                off += 20
                m = np.frombuffer(data, dtype="<f4", count=k, offset=off).copy()
                v = np.frombuffer(data, dtype="<f4", count=k, offset=off + 4 * k).copy()
                off += 8 * k
            if off != len(data):
                raise FormatError("checkpoint length does not match its header")
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"corrupt checkpoint: {exc}") from exc
        return cls(header, params, step, m, v)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build(self) -> VectorFieldModel:
        model = build_model(self.header["model"])
        model.load_flat_parameters(torch.from_numpy(self.params.astype(np.float32)))
        return model

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def model_checkpoint(model: VectorFieldModel, **extra) -> Checkpoint:
    header = {"model": model.hyperparameters(), **extra}
    return Checkpoint(header, model.flat_parameters().float().numpy())


def save_model(model: VectorFieldModel, path, **extra) -> Path:
    return model_checkpoint(model, **extra).save(path)


def load_model(path) -> VectorFieldModel:
    return Checkpoint.load(path).build()
