"""Decision-boundary grids over a 2-D view of the input space, as CSV and SVG."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelParams, forward

SVG_SIZE = 400


@dataclass(frozen=True)
class BoundaryGrid:
    """Logits on a ``res x res`` grid; ``logit[r, c]`` sits at ``(xs[c], ys[r])``."""

    xs: np.ndarray
    ys: np.ndarray
    logit: np.ndarray
    dims: tuple[int, int]

    @property
    def score(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit))

    def rows(self):
        """``(x, y, logit, score)`` tuples, y-major."""
        score = self.score
        for r, y in enumerate(self.ys):
            for c, x in enumerate(self.xs):
                yield float(x), float(y), float(self.logit[r, c]), float(score[r, c])


def bounding_box(points: np.ndarray, margin: float = 0.1) -> tuple[float, float, float, float]:
    """``(x_lo, x_hi, y_lo, y_hi)`` padded by ``margin`` of each side's range."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - margin * span, hi + margin * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def boundary_grid(
    model: ModelParams,
    X: np.ndarray,
    res: int = 50,
    dims: tuple[int, int] | None = None,
    output: int = 0,
    margin: float = 0.1,
) -> BoundaryGrid:
    """Evaluate one logit of ``model`` over the data's bounding box.

    Inputs wider than 2 need ``dims``: the two coordinates that vary; the
    others are held at the data mean.
    """
    X = np.asarray(X, dtype=np.float64)
    if res < 2:
        raise ValueError("grid resolution must be at least 2")
    if model.uses_tokens:
        raise ValueError("boundary grids need a feature-vector model")
    width = model.input_width
    if dims is None:
        if width != 2:
            raise ValueError(f"model input width is {width}; pass two projection dims")
        dims = (0, 1)
    dims = (int(dims[0]), int(dims[1]))
    if dims[0] == dims[1] or not all(0 <= d < width for d in dims):
        raise ValueError(f"projection dims {dims} invalid for width {width}")
    if not 0 <= output < model.n_outputs:
        raise ValueError(f"output {output} out of range for {model.n_outputs} logits")
    x_lo, x_hi, y_lo, y_hi = bounding_box(X[:, dims], margin)
    xs = np.linspace(x_lo, x_hi, res)
    ys = np.linspace(y_lo, y_hi, res)
    gx, gy = np.meshgrid(xs, ys)
    inputs = np.tile(X.mean(axis=0), (res * res, 1))
    inputs[:, dims[0]] = gx.ravel()
    inputs[:, dims[1]] = gy.ravel()
    z = forward(model, inputs)[:, output].reshape(res, res)
    return BoundaryGrid(xs, ys, z, dims)


def write_grid_csv(grid: BoundaryGrid, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "logit", "score"])
        for row in grid.rows():
            writer.writerow([repr(v) for v in row])


def read_grid_csv(path) -> np.ndarray:
    """Rows of ``(x, y, logit, score)`` as an ``n x 4`` array."""
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def level_crossings(x: np.ndarray, y: np.ndarray, value: np.ndarray, level: float = 0.0) -> np.ndarray:
    """Points where ``value`` crosses ``level`` along rows of constant ``y``.

    Inputs are flat, y-major columns as written by :func:`write_grid_csv`;
    crossings are linearly interpolated between horizontal neighbours.
    """
    out = []
    for y0 in np.unique(y):
        row = np.flatnonzero(y == y0)
        row = row[np.argsort(x[row], kind="stable")]
        v = value[row] - level
        for a, b in zip(row[:-1], row[1:]):
            va, vb = value[a] - level, value[b] - level
            if va == 0:
                out.append((x[a], y0))
            elif va * vb < 0:
                t = va / (va - vb)
                out.append((x[a] + t * (x[b] - x[a]), y0))
        if len(v) and v[-1] == 0:
            out.append((x[row[-1]], y0))
    return np.array(out).reshape(-1, 2)


def contour_segments(grid: BoundaryGrid, level: float = 0.0) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Marching-squares segments of the ``level`` set of the logit."""
    z = grid.logit - level
    xs, ys = grid.xs, grid.ys
    segments = []
    for r in range(len(ys) - 1):
        for c in range(len(xs) - 1):
            corners = [
                (xs[c], ys[r], z[r, c]),
                (xs[c + 1], ys[r], z[r, c + 1]),
                (xs[c + 1], ys[r + 1], z[r + 1, c + 1]),
                (xs[c], ys[r + 1], z[r + 1, c]),
            ]
            hits = []
            for (xa, ya, va), (xb, yb, vb) in zip(corners, corners[1:] + corners[:1]):
                if (va < 0) != (vb < 0):
                    t = va / (va - vb)
                    hits.append((xa + t * (xb - xa), ya + t * (yb - ya)))
            for k in range(0, len(hits) - 1, 2):
                segments.append((hits[k], hits[k + 1]))
    return segments


def _blend(score: float) -> str:
    # blue (score 0) to red (score 1) through white
    if score < 0.5:
        t = score / 0.5
        r, g, b = 60 + 195 * t, 110 + 145 * t, 255
    else:
        t = (score - 0.5) / 0.5
        r, g, b = 255, 255 - 170 * t, 255 - 170 * t
    return f"#{int(round(r)):02x}{int(round(g)):02x}{int(round(b)):02x}"


def render_svg(grid: BoundaryGrid, X: np.ndarray, labels: np.ndarray, pairs=()) -> str:
    """Heat map of the score, the 0.5 contour, data points and pair segments."""
    xs, ys = grid.xs, grid.ys
    x_lo, x_hi, y_lo, y_hi = xs[0], xs[-1], ys[0], ys[-1]
    size = SVG_SIZE

    def px(x, y):
        return (x - x_lo) / (x_hi - x_lo) * size, size - (y - y_lo) / (y_hi - y_lo) * size

    cw = size / (len(xs) - 1)
    ch = size / (len(ys) - 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<g id="scores">',
    ]
    score = grid.score
    for r in range(len(ys)):
        for c in range(len(xs)):
            cx, cy = px(xs[c], ys[r])
            parts.append(
                f'<rect x="{cx - cw / 2:.3f}" y="{cy - ch / 2:.3f}" width="{cw:.3f}" height="{ch:.3f}" '
                f'fill="{_blend(float(score[r, c]))}"/>'
            )
    parts.append('</g>\n<g id="contour" stroke="black" stroke-width="1.5">')
    for (xa, ya), (xb, yb) in contour_segments(grid):
        (pa, qa), (pb, qb) = px(xa, ya), px(xb, yb)
        parts.append(f'<line x1="{pa:.3f}" y1="{qa:.3f}" x2="{pb:.3f}" y2="{qb:.3f}"/>')
    parts.append("</g>")
    P = np.asarray(X, dtype=np.float64)[:, list(grid.dims)]
    if len(pairs):
        parts.append('<g id="pairs" stroke="#444444" stroke-width="0.8">')
        for a, b in pairs:
            (pa, qa), (pb, qb) = px(*P[a]), px(*P[b])
            parts.append(f'<line x1="{pa:.3f}" y1="{qa:.3f}" x2="{pb:.3f}" y2="{qb:.3f}"/>')
        parts.append("</g>")
    parts.append('<g id="points" stroke="black" stroke-width="0.5">')
    for (x, y), lab in zip(P, labels):
        cx, cy = px(x, y)
        fill = "#d62728" if lab else "#1f77b4"
        parts.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="2.5" fill="{fill}"/>')
    parts.append("</g>\n</svg>")
    return "\n".join(parts) + "\n"
