import numpy as np
import torch

from ftdflow.models import gradient


def fd_relative_error(model, loss_fn, n_coords=16, h=1e-4, seed=0):
    """Compare reverse-mode and central-difference gradients on random coordinates.

    The model must already be in float64. Returns ||g_fd - g_ad|| / max(||g_ad||, ||g_fd||).
    """
    g = gradient(model, loss_fn).numpy()
    params = list(model.parameters())
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)
    fd = []
    with torch.no_grad():
        for c in coords:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = params[k].view(-1)
            j = int(c - offsets[k])
            orig = flat[j].item()
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
            fd.append((up - down) / (2 * h))
    fd = np.array(fd)
    ad = g[coords]
    denom = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-300)
    return float(np.linalg.norm(fd - ad) / denom), ad, fd


def randomize(model, scale=0.3, seed=0):
    """Give every parameter (including zero-initialized heads) random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model
