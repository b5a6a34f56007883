"""Dependency-free field rendering: binary PPM heatmaps and SVG gradient plots."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .field import CellState, PotentialField

GOAL_RGB = (40, 170, 60)
UNSAFE_RGB = (200, 40, 40)
TRAJ_RGB = (30, 30, 30)

# viridis-like ramp, low V dark blue, high V yellow
_RAMP = np.array([
    (68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37),
], dtype=float)


def colormap(V: np.ndarray) -> np.ndarray:
    v = np.clip(V, 0.0, 1.0) * (len(_RAMP) - 1)
    k = np.minimum(v.astype(int), len(_RAMP) - 2)
    f = (v - k)[..., None]
    return ((1 - f) * _RAMP[k] + f * _RAMP[k + 1]).round().astype(np.uint8)


def field_image(fld: PotentialField, occupancy: np.ndarray | None = None) -> np.ndarray:
    """RGB image of shape (H, W, 3); the top row is the largest y."""
    occ = fld.occupancy if occupancy is None else occupancy
    rgb = colormap(fld.V)
    rgb[occ == CellState.GOAL] = GOAL_RGB
    rgb[occ == CellState.UNSAFE] = UNSAFE_RGB
    return np.ascontiguousarray(rgb.transpose(1, 0, 2)[::-1])


def write_ppm(path: str | Path, rgb: np.ndarray, scale: int = 1) -> None:
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    body = parts[4]
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def _hex(rgb) -> str:
    return "#%02x%02x%02x" % tuple(int(c) for c in rgb)


def write_svg(path: str | Path, fld: PotentialField, every: int = 2, cell_px: int = 10,
              trajectories: Sequence[Sequence[tuple[float, float]]] = ()) -> None:
    """Heatmap cells with arrows along -grad V every ``every`` cells."""
    tf = fld.transform
    W, H = tf.width, tf.height
    img = field_image(fld)  # (H, W, 3), top row = j = H-1
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * cell_px}" height="{H * cell_px}" '
        f'viewBox="0 0 {W} {H}">',
        '<defs><marker id="head" markerWidth="4" markerHeight="4" refX="2" refY="2" orient="auto">'
        '<path d="M0,0 L4,2 L0,4 z" fill="white"/></marker></defs>',
        '<g shape-rendering="crispEdges">',
    ]
    for r in range(H):
        for i in range(W):
            out.append(f'<rect x="{i}" y="{r}" width="1" height="1" fill="{_hex(img[r, i])}"/>')
    out.append("</g>")

    def to_px(i: float, j: float) -> tuple[float, float]:
        return i + 0.5, (H - 1 - j) + 0.5

    out.append('<g stroke="white" stroke-width="0.08" marker-end="url(#head)">')
    occ = fld.occupancy
    for i in range(0, W, every):
        for j in range(0, H, every):
            if occ[i, j] != CellState.FREE:
                continue
            # -grad in grid units
            di, dj = -fld.gx[i, j] * tf.hx, -fld.gy[i, j] * tf.hy
            n = float(np.hypot(di, dj))
            if n == 0.0:
                continue
            L = 0.4 * every
            x0, y0 = to_px(i, j)
            x1, y1 = to_px(i + L * di / n, j + L * dj / n)
            out.append(f'<line x1="{x0:.3f}" y1="{y0:.3f}" x2="{x1:.3f}" y2="{y1:.3f}"/>')
    out.append("</g>")
    for pts in trajectories:
        coords = []
        for x, y in pts:
            gi, gj = tf.world_to_grid(x, y)
            px, py = to_px(gi, gj)
            coords.append(f"{px:.3f},{py:.3f}")
        out.append(f'<polyline fill="none" stroke="{_hex(TRAJ_RGB)}" stroke-width="0.15" '
                   f'points="{" ".join(coords)}"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
