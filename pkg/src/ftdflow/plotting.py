"""Minimal SVG scatter plots and curves; read-only over its inputs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import EvalReport

W, H, PAD = 480, 480, 30


def _frame(xs, ys):
    lo_x, hi_x = float(np.min(xs)), float(np.max(xs))
    lo_y, hi_y = float(np.min(ys)), float(np.max(ys))
    sx = (W - 2 * PAD) / ((hi_x - lo_x) or 1.0)
    sy = (H - 2 * PAD) / ((hi_y - lo_y) or 1.0)
    return lambda x: PAD + (x - lo_x) * sx, lambda y: H - PAD - (y - lo_y) * sy


def _svg(body: list[str], title: str) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">'
    return "\n".join([head, f"<title>{title}</title>", '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>\n"])


def scatter_svg(points: np.ndarray, title: str = "samples") -> str:
    fx, fy = _frame(points[:, 0], points[:, 1])
    dots = [f'<circle cx="{fx(x):.2f}" cy="{fy(y):.2f}" r="1.2" fill="#1f77b4"/>' for x, y in points[:, :2]]
    return _svg(dots, title)


def curve_svg(xs, ys, title: str = "curve") -> str:
    fx, fy = _frame(xs, ys)
    pts = " ".join(f"{fx(x):.2f},{fy(y):.2f}" for x, y in zip(xs, ys))
    return _svg([f'<polyline points="{pts}" fill="none" stroke="#d62728" stroke-width="1"/>'], title)


def read_loss_log(path) -> tuple[list[int], dict[str, list[float]]]:
    iters, series = [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        fields = dict(item.split("=", 1) for item in line.split())
        iters.append(int(fields.pop("iter")))
        for k, v in fields.items():
            series.setdefault(k, []).append(float(v))
    return iters, series


def plot_inputs(paths, out: Path) -> list[Path]:
    written = []
    for i, path in enumerate(paths):
        stem = f"{i:02d}_{path.stem}"
        if path.suffix == ".txt":
            written.append(EvalReport.load(path).to_csv(out / f"{stem}.csv"))
        elif path.suffix == ".npy":
            pts = np.load(path)
            if pts.ndim != 2 or pts.shape[1] < 2:
                raise FormatError(f"{path}: scatter needs 2-D samples")
            (out / f"{stem}.svg").write_text(scatter_svg(pts, path.name), encoding="utf-8")
            with (out / f"{stem}.csv").open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["x", "y"])
                w.writerows([repr(float(a)), repr(float(b))] for a, b in pts[:, :2])
            written += [out / f"{stem}.svg", out / f"{stem}.csv"]
        elif path.suffix == ".log":
            iters, series = read_loss_log(path)
            key = "total" if "total" in series else next(iter(series))
            (out / f"{stem}.svg").write_text(curve_svg(iters, series[key], f"{path.name}: {key}"), encoding="utf-8")
            with (out / f"{stem}.csv").open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iter", *series])
                for j, it in enumerate(iters):
                    w.writerow([it, *(repr(series[k][j]) for k in series)])
            written += [out / f"{stem}.svg", out / f"{stem}.csv"]
        else:
            raise FormatError(f"{path}: cannot plot files of type {path.suffix!r}")
    return written
