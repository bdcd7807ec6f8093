"""Reconstruction and regularization losses used during distillation."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .distill import FtdContext, ftd_loss
from .errors import ShapeMismatchError


def _check_image(img: torch.Tensor) -> None:
    if img.ndim < 3:
        raise ShapeMismatchError("tv_map expects [..., c, h, w]", img.shape, ("c", "h", "w"))


def tv_map(img: torch.Tensor) -> torch.Tensor:
    """|I[i+1,j] - I[i,j]| + |I[i,j+1] - I[i,j]| with replicate padding at the far edges."""
    _check_image(img)
    dh = F.pad(img[..., 1:, :] - img[..., :-1, :], (0, 0, 0, 1))
    dw = F.pad(img[..., :, 1:] - img[..., :, :-1], (0, 1))
    return dh.abs() + dw.abs()


class PerceptualExtractor:
    """Frozen stack of random-orthogonal 3x3 stride-2 convolutions with tanh.

    A stand-in for a pretrained perceptual network: the features are fixed by
    ``seed`` and never trained. ``distance`` averages, over stages, the mean
    squared difference of the feature maps.
    """

    def __init__(self, in_channels: int = 1, widths=(8, 16, 32), seed: int = 0):
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.kernels = []
        c = in_channels
        for w in self.widths:
            k = torch.empty(w, c * 9, dtype=torch.float64)
            torch.nn.init.orthogonal_(k, gain=1.0, generator=gen)
            # unit-norm rows keep every stage O(1) regardless of fan-in
            k = k / k.norm(dim=1, keepdim=True)
            self.kernels.append(k.reshape(w, c, 3, 3))
            c = w

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        if img.ndim != 4 or img.shape[1] != self.in_channels:
            raise ShapeMismatchError("perceptual extractor input", img.shape, ("B", self.in_channels, "h", "w"))
        feats = []
        h = img
        for k in self.kernels:
            h = torch.tanh(F.conv2d(F.pad(h, (1, 1, 1, 1), mode="replicate"), k.to(img.dtype), stride=2))
            feats.append(h)
        return feats

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ShapeMismatchError("perceptual distance", a.shape, b.shape)
        fa, fb = self.features(a), self.features(b)
        return torch.stack([(x - y).pow(2).mean() for x, y in zip(fa, fb)]).mean()


def tv_perceptual_loss(pred, target, extractor: PerceptualExtractor, gamma: float) -> torch.Tensor:
    """Perceptual distance on the images plus gamma times the distance on their TV maps."""
    if pred.shape != target.shape:
        raise ShapeMismatchError("tv_perceptual_loss", pred.shape, target.shape)
    loss = extractor.distance(pred, target)
    if gamma:
        loss = loss + gamma * extractor.distance(tv_map(pred), tv_map(target))
    return loss


def adl_loss(taps, epsilon: float = 1e-8) -> torch.Tensor:
    """Mean cosine similarity between each token and its layer's mean token.

    Each tap is ``[N, d]`` or ``[B, N, d]``; batched taps are averaged over B.
    A cosine whose token or mean-token norm falls below ``epsilon`` counts as 0.
    """
    if not taps:
        raise ValueError("adl_loss needs at least one feature tap")
    per_layer = []
    for a in taps:
        if a.ndim == 2:
            a = a[None]
        if a.shape[-2] < 1:
            raise ValueError("feature tap has no tokens")
        mean = a.mean(dim=-2, keepdim=True)
        sq_a = a.pow(2).sum(-1)
        sq_m = mean.pow(2).sum(-1)
        live = (sq_a >= epsilon**2) & (sq_m >= epsilon**2)
        denom = torch.sqrt(sq_a.clamp_min(epsilon**2) * sq_m.clamp_min(epsilon**2))
        cos = torch.where(live, (a * mean).sum(-1) / denom, torch.zeros_like(denom))
        per_layer.append(cos.mean())
    return torch.stack(per_layer).mean()


def mse_loss(pred, target) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError("mse_loss", pred.shape, target.shape)
    return (pred - target).pow(2).mean()


@dataclass(frozen=True)
class LossWeights:
    ftd: float = 1.0
    rec: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0
    mu: float = 0.1
    adl_epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("ftd", "rec", "lam", "gamma", "mu", "adl_epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def is_image(x: torch.Tensor) -> bool:
    return x.ndim == 4


def composite_loss(model, batch, t, ctx: FtdContext, extractor, weights: LossWeights, codec):
    """Total objective ftd + rec * (mse + lam * tv_perceptual) + mu * adl.

    ``batch`` maps eps, x0, z0, z_L to batched tensors. The FTD term is
    evaluated in latent space at time ``t``; the reconstruction and ADL terms
    come from the one-step generator pass at T_L. Terms are combined in
    float64 so the returned breakdown adds up exactly.
    """
    eps, x0, z0, z_lr = batch["eps"], batch["x0"], batch["z0"], batch["z_L"]
    zero = torch.zeros((), dtype=torch.float64)

    ftd = ftd_loss(model, eps, z0, z_lr, t, ctx) if weights.ftd else zero

    need_gen = weights.rec or weights.mu
    mse = perc = adl = zero
    if need_gen:
        z_hat = z_lr - model(z_lr, ctx.t_lr) * ctx.t_lr
        taps = getattr(model, "feature_taps", [])
        x_hat = codec.decode(z_hat)
        if weights.rec:
            mse = mse_loss(x_hat, x0)
            if weights.lam and is_image(x_hat) and extractor is not None:
                perc = tv_perceptual_loss(x_hat, x0, extractor, weights.gamma)
        if weights.mu and taps:
            adl = adl_loss(taps, weights.adl_epsilon)

    ftd, mse, perc, adl = (v.double() for v in (ftd, mse, perc, adl))
    rec = mse + weights.lam * perc
    total = weights.ftd * ftd + weights.rec * rec + weights.mu * adl
    terms = {"ftd": ftd, "mse": mse, "tv_perceptual": perc, "rec": rec, "adl": adl, "total": total}
    breakdown = {k: v.item() for k, v in terms.items()}
    return total, breakdown
