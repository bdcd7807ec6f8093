"""Synthetic distributions, degradation, latent codecs and offline teacher pairs."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, ShapeMismatchError
from .flow import euler_sample

KINDS = ("gaussian-mixture-2d", "two-moons", "checkerboard", "tiny-textures")
BLOCK = 256


def index_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


@dataclass(frozen=True)
class SyntheticDistribution:
    """Parametric toy data distribution.

    ``gaussian-mixture-2d`` takes explicit ``means``/``weights``/``scale`` or,
    when ``means`` is empty, ``n_components`` means evenly spaced on a circle of
    ``radius``. Any number of coordinates per mean is accepted, so a single
    component gives an isotropic Gaussian oracle distribution.
    ``tiny-textures`` emits ``[1, size, size]`` images built from a few random
    plane waves with frequencies in ``band`` (cycles per image).
    """

    kind: str = "gaussian-mixture-2d"
    means: tuple = ()
    weights: tuple = ()
    scale: float = 0.1
    n_components: int = 8
    radius: float = 1.0
    size: int = 16
    band: tuple = (2.0, 5.0)
    n_waves: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        if self.scale < 0:
            raise ValueError("scale must be non-negative")
        if self.kind == "gaussian-mixture-2d":
            w = self.component_weights()
            if (w < 0).any() or abs(w.sum() - 1) > 1e-9:
                raise ValueError(f"mixture weights must be non-negative and sum to 1, got {w.tolist()}")
            if len(w) != len(self.component_means()):
                raise ValueError("number of weights does not match number of means")

    def component_means(self) -> np.ndarray:
        if self.means:
            return np.asarray(self.means, dtype=np.float64).reshape(len(self.means), -1)
        ang = 2 * np.pi * np.arange(self.n_components) / self.n_components
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def component_weights(self) -> np.ndarray:
        if self.weights:
            return np.asarray(self.weights, dtype=np.float64)
        k = len(self.component_means())
        return np.full(k, 1.0 / k)

    @property
    def sample_shape(self) -> tuple:
        if self.kind == "tiny-textures":
            return (1, self.size, self.size)
        if self.kind == "gaussian-mixture-2d":
            return (self.component_means().shape[1],)
        return (2,)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n float64 samples from an explicit generator."""
        if self.kind == "gaussian-mixture-2d":
            means, w = self.component_means(), self.component_weights()
            comp = rng.choice(len(w), size=n, p=w)
            return means[comp] + self.scale * rng.standard_normal((n, means.shape[1]))
        if self.kind == "two-moons":
            upper = rng.random(n) < 0.5
            ang = np.pi * rng.random(n)
            x = np.where(upper, np.cos(ang), 1 - np.cos(ang))
            y = np.where(upper, np.sin(ang), 0.5 - np.sin(ang))
            pts = np.stack([x - 0.5, y - 0.25], axis=1)
            return pts + self.scale * rng.standard_normal((n, 2))
        if self.kind == "checkerboard":
            u = rng.random((n, 2)) * 2 - 1
            cell = np.floor(u * 2).astype(int)
            flip = (cell.sum(1) % 2) == 1
            # shift by one cell with wrap-around
            u[flip, 0] = (u[flip, 0] + 1.5) % 2 - 1
            return u * 1.5
        return self._textures(rng, n)

    def _textures(self, rng, n):
        s = self.size
        yy, xx = np.meshgrid(np.arange(s) / s, np.arange(s) / s, indexing="ij")
        out = np.zeros((n, 1, s, s))
        lo, hi = self.band
        for i in range(n):
            img = np.zeros((s, s))
            for _ in range(self.n_waves):
                f = rng.uniform(lo, hi)
                th = rng.uniform(0, np.pi)
                ph = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.5, 1.0)
                img += amp * np.sin(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy) + ph)
            out[i, 0] = img / np.sqrt(self.n_waves / 2)
        return out


def sample_distribution(dist: SyntheticDistribution, n: int, start: int = 0) -> torch.Tensor:
    """Samples ``start .. start+n-1``; sample i depends only on (dist.seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    first, last = start // BLOCK, (start + n - 1) // BLOCK
    blocks = [dist.draw(index_rng(dist.seed, b), BLOCK) for b in range(first, last + 1)]
    allx = np.concatenate(blocks)
    off = start - first * BLOCK
    return torch.from_numpy(allx[off : off + n].astype(np.float32))


def standard_noise(shape, seed: int) -> torch.Tensor:
    return torch.from_numpy(index_rng(seed).standard_normal(shape).astype(np.float32))


# ---------------------------------------------------------------------------
# degradation


@dataclass(frozen=True)
class DegradationConfig:
    """blur -> downsample -> upsample -> noise for images; shrink -> noise for points.

    ``shrink`` is the convex weight pulling each point toward ``center``. With
    every strength zero and ``factor`` 1 the operator is the identity.
    """

    blur: float = 0.0
    factor: int = 1
    noise: float = 0.0
    shrink: float = 0.0
    center: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.blur < 0 or self.noise < 0 or self.factor < 1 or not 0 <= self.shrink <= 1:
            raise ValueError(f"invalid degradation config {self}")

    def digest(self) -> bytes:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).digest()


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(np.ceil(3 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[1]
    pad = F.pad(img, (radius, radius, radius, radius), mode="replicate")
    h = F.conv2d(pad, k.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(h, k.reshape(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def degrade(x0: torch.Tensor, cfg: DegradationConfig, indices=None) -> torch.Tensor:
    """Degrade a batch; the noise for row k is keyed on (cfg.seed, indices[k])."""
    x = x0
    if x0.ndim == 4:
        h, w = x0.shape[-2:]
        if h % cfg.factor or w % cfg.factor:
            raise ShapeMismatchError(f"image extent not divisible by factor {cfg.factor}", (h, w), (cfg.factor,))
        if cfg.blur > 0:
            x = gaussian_blur(x, cfg.blur)
        if cfg.factor > 1:
            x = F.avg_pool2d(x, cfg.factor)
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    elif cfg.shrink > 0:
        center = torch.tensor(cfg.center or [0.0] * x0.shape[-1], dtype=x0.dtype)
        x = (1 - cfg.shrink) * x + cfg.shrink * center
    if cfg.noise > 0:
        if indices is None:
            indices = range(x0.shape[0])
        noise = np.stack([index_rng(cfg.seed, int(i)).standard_normal(x0.shape[1:]) for i in indices])
        x = x + cfg.noise * torch.from_numpy(noise).to(x0.dtype)
    return x


# ---------------------------------------------------------------------------
# latent codecs


class IdentityCodec:
    tag = "identity"

    def encode(self, x):
        return x

    def decode(self, z):
        return z


@dataclass(frozen=True)
class ScaleCodec:
    """z = scale * x; a minimal non-trivial codec to keep x and z honest."""

    scale: float = 0.5

    @property
    def tag(self) -> str:
        return f"scale:{self.scale!r}"

    def encode(self, x):
        return x * self.scale

    def decode(self, z):
        return z / self.scale


def codec_from_tag(tag: str):
    if tag == "identity":
        return IdentityCodec()
    if tag.startswith("scale:"):
        return ScaleCodec(float(tag.split(":", 1)[1]))
    raise FormatError(f"unknown codec tag {tag!r}")


# ---------------------------------------------------------------------------
# pairs and the dataset file

FIELDS = ("eps", "x0", "z0", "x_L", "z_L")


@dataclass
class PairDataset:
    """Column-oriented store of FlowPair records (one row per pair)."""

    eps: torch.Tensor
    x0: torch.Tensor
    z0: torch.Tensor
    x_L: torch.Tensor
    z_L: torch.Tensor
    seeds: np.ndarray
    teacher_steps: int
    codec_tag: str = "identity"
    degradation_digest: bytes = field(default=b"\0" * 32)

    def __len__(self):
        return len(self.seeds)

    @property
    def sample_shape(self):
        return tuple(self.x0.shape[1:])

    @property
    def latent_shape(self):
        return tuple(self.z0.shape[1:])

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return {name: getattr(self, name)[idx] for name in FIELDS}

    def record(self, i: int) -> dict:
        return {**{k: v[0] for k, v in self.batch([i]).items()}, "seed": int(self.seeds[i])}

    def subset(self, idx) -> "PairDataset":
        b = self.batch(idx)
        return PairDataset(**b, seeds=self.seeds[np.asarray(idx)], teacher_steps=self.teacher_steps,
                           codec_tag=self.codec_tag, degradation_digest=self.degradation_digest)

    def to_bytes(self) -> bytes:
        parts = [DATA_MAGIC, struct.pack("<I", DATA_VERSION)]
        for shape in (self.sample_shape, self.latent_shape):
            parts.append(struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        tag = self.codec_tag.encode()
        parts.append(struct.pack("<QI", len(self), self.teacher_steps))
        parts.append(struct.pack("<I", len(tag)) + tag + self.degradation_digest)
        n = len(self)
        cols = [getattr(self, f).reshape(n, -1).numpy().astype("<f4") for f in FIELDS]
        rec = np.concatenate(cols, axis=1)
        dt = np.dtype([("f", "<f4", rec.shape[1]), ("seed", "<i8")])
        arr = np.empty(n, dtype=dt)
        arr["f"] = rec
        arr["seed"] = self.seeds
        parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PairDataset":
        if data[:4] != DATA_MAGIC:
            raise FormatError("not a pair dataset (bad magic)")
        try:
            (version,) = struct.unpack_from("<I", data, 4)
            if version != DATA_VERSION:
                raise FormatError(f"unsupported dataset version {version}")
            off = 8
            shapes = []
            for _ in range(2):
                (nd,) = struct.unpack_from("<I", data, off)
                shapes.append(struct.unpack_from(f"<{nd}I", data, off + 4))
                off += 4 + 4 * nd
            count, steps = struct.unpack_from("<QI", data, off)
            off += 12
            (tlen,) = struct.unpack_from("<I", data, off)
            tag = data[off + 4 : off + 4 + tlen].decode()
            off += 4 + tlen
            digest = data[off : off + 32]
            off += 32
            ds, dl = int(np.prod(shapes[0])), int(np.prod(shapes[1]))
            width = 2 * ds + 3 * dl
            dt = np.dtype([("f", "<f4", width), ("seed", "<i8")])
            if len(data) - off != count * dt.itemsize:
                raise FormatError("dataset length does not match its header")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        except struct.error as exc:
            raise FormatError(f"corrupt dataset: {exc}") from exc
        f = torch.from_numpy(arr["f"].astype(np.float32).reshape(count, width))
        sizes = [ds, ds, dl, ds, dl]
        shp = [shapes[0], shapes[0], shapes[1], shapes[0], shapes[1]]
        cols = torch.split(f, sizes, dim=1)
        kw = {name: c.reshape(count, *s).clone() for name, c, s in zip(FIELDS, cols, shp)}
        return cls(**kw, seeds=arr["seed"].copy(), teacher_steps=steps, codec_tag=tag, degradation_digest=digest)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "PairDataset":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


DATA_MAGIC = b"FTDP"
DATA_VERSION = 1


def _teacher_chunk(teacher, shape, seeds, steps, cfg, codec, indices):
    eps = torch.stack([standard_noise(shape, s) for s in seeds])
    x0, _ = euler_sample(teacher, eps, steps, keep_trajectory=False)
    if not torch.isfinite(x0).all():
        raise FloatingPointError("teacher produced non-finite samples")
    x_lr = degrade(x0, cfg, indices=indices)
    return eps, x0, codec.encode(x0), x_lr, codec.encode(x_lr)


def generate_pairs(teacher, n_pairs: int, steps: int = 50, cfg: DegradationConfig | None = None,
                   codec=None, seed_base: int = 0, chunk: int = 64, start: int = 0) -> PairDataset:
    """Run the teacher once per noise draw and store (eps, x0, z0, x_L, z_L).

    Pair i uses noise seeded by ``seed_base + i``. Teacher evaluation is batched
    in fixed, index-aligned chunks so that any single pair can be regenerated
    bit-identically by ``regenerate_pair``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    cfg = cfg or DegradationConfig()
    codec = codec or IdentityCodec()
    shape = tuple(teacher.sample_shape)
    cols = {k: [] for k in FIELDS}
    lo, hi = start, start + n_pairs
    c0 = lo // chunk
    with torch.no_grad():
        for c in range(c0, (hi - 1) // chunk + 1):
            idx = list(range(c * chunk, (c + 1) * chunk))
            out = _teacher_chunk(teacher, shape, [seed_base + i for i in idx], steps, cfg, codec, idx)
            keep = slice(max(lo - c * chunk, 0), min(hi - c * chunk, chunk))
            for k, v in zip(FIELDS, out):
                cols[k].append(v[keep])
    data = {k: torch.cat(v) for k, v in cols.items()}
    seeds = np.arange(seed_base + lo, seed_base + hi, dtype=np.int64)
    return PairDataset(**data, seeds=seeds, teacher_steps=steps, codec_tag=codec.tag, degradation_digest=cfg.digest())


def regenerate_pair(teacher, index: int, steps: int, cfg: DegradationConfig, codec=None,
                    seed_base: int = 0, chunk: int = 64) -> dict:
    ds = generate_pairs(teacher, 1, steps, cfg, codec, seed_base=seed_base, chunk=chunk, start=index)
    return ds.record(0)
