"""Closed polygons: area, rasterization, IoU, resampling and initialization.

Coordinates follow the image convention ``u`` = column, ``v`` = row, origin at
the top-left pixel center.  Pixel ``(row=v, col=u)`` has its center at the
integer point ``(u, v)``.  A contour is an ``(L, 2)`` float array of
``(u, v)`` nodes; the closing edge from the last node to the first is implicit.

Raster masks and maps are ``(V, U)`` arrays (rows first), so ``mask[v, u]``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

MIN_NODES = 4


def as_contour(nodes) -> np.ndarray:
    c = np.asarray(nodes, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ValueError(f"contour must have shape (L, 2), got {c.shape}")
    if c.shape[0] < 3:
        raise ValueError(f"contour needs at least 3 nodes, got {c.shape[0]}")
    return c


def clamp(c: np.ndarray, U: int, V: int) -> np.ndarray:
    """Clamp node coordinates into ``[0, U-1] x [0, V-1]``."""
    out = np.empty_like(c)
    np.clip(c[:, 0], 0.0, U - 1, out=out[:, 0])
    np.clip(c[:, 1], 0.0, V - 1, out=out[:, 1])
    return out


def signed_area(c: np.ndarray) -> float:
    """Shoelace area; positive when the node order is counter-clockwise in
    the ``(u, v)`` axes, i.e. ``(0,0) -> (1,0) -> (1,1) -> (0,1)``."""
    u, v = c[:, 0], c[:, 1]
    return 0.5 * float(np.dot(u, np.roll(v, -1)) - np.dot(np.roll(u, -1), v))


def perimeter(c: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(c, -1, axis=0) - c, axis=1).sum())


def orient_positive(c: np.ndarray) -> np.ndarray:
    """Return ``c`` reordered so that its signed area is non-negative."""
    return c[::-1].copy() if signed_area(c) < 0 else c


def centroid(c: np.ndarray) -> np.ndarray:
    """Area centroid; falls back to the vertex mean for degenerate polygons."""
    u, v = c[:, 0], c[:, 1]
    un, vn = np.roll(u, -1), np.roll(v, -1)
    cross = u * vn - un * v
    a = cross.sum() / 2.0
    if abs(a) < 1e-12:
        return c.mean(axis=0)
    return np.array([((u + un) * cross).sum(), ((v + vn) * cross).sum()]) / (6.0 * a)


def rasterize(c: np.ndarray, U: int, V: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers.

    A pixel is inside when a ray from its center towards ``+u`` crosses the
    boundary an odd number of times.  An edge crosses row ``v`` when exactly
    one endpoint lies strictly below ``v``; a crossing at ``x`` covers the
    centers ``u < x``.  The rule is total, so self-intersecting contours are
    accepted.
    """
    c = np.asarray(c, dtype=np.float64)
    p0 = c
    p1 = np.roll(c, -1, axis=0)
    rows = np.arange(V, dtype=np.float64)
    # (E, V) crossing table
    above0 = p0[:, 1:2] > rows[None, :]
    above1 = p1[:, 1:2] > rows[None, :]
    crosses = above0 != above1
    e_idx, r_idx = np.nonzero(crosses)
    mask_counts = np.zeros((V, U + 1), dtype=np.int32)
    if e_idx.size:
        a, b = p0[e_idx], p1[e_idx]
        # orient every edge upwards so reversed contours round identically
        flip = a[:, 1] > b[:, 1]
        a, b = np.where(flip[:, None], b, a), np.where(flip[:, None], a, b)
        y = rows[r_idx]
        x = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
        # centers u with u < x, i.e. u in [0, ceil(x) - 1]
        k = np.clip(np.ceil(x), 0, U).astype(np.int64)
        np.add.at(mask_counts, (r_idx, k), 1)
    # number of crossings strictly to the right of each center
    right = np.cumsum(mask_counts[:, ::-1], axis=1)[:, ::-1][:, 1:]
    return (right % 2).astype(bool)


def iou_masks(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def iou(a: np.ndarray, b: np.ndarray, U: int, V: int) -> float:
    """Raster IoU of two contours; two empty masks count as perfect agreement."""
    return iou_masks(rasterize(a, U, V), rasterize(b, U, V))


def init_circle(seed, radius: float, L: int, U: int | None = None, V: int | None = None) -> np.ndarray:
    """``L`` counter-clockwise nodes on a circle around ``seed``.

    Node 0 sits at angle 0 (``+u``); nodes are clamped to the image when a
    size is given.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if L < MIN_NODES:
        raise ValueError(f"L must be >= {MIN_NODES}")
    t = 2.0 * np.pi * np.arange(L) / L
    c = np.stack([seed[0] + radius * np.cos(t), seed[1] + radius * np.sin(t)], axis=1)
    if U is not None and V is not None:
        c = clamp(c, U, V)
    elif U is not None or V is not None:
        raise ValueError("give both U and V or neither")
    else:
        c = np.maximum(c, 0.0)
    return c


def default_radius(U: int, V: int, fraction: float = 0.15) -> float:
    return fraction * min(U, V)


def resample(c: np.ndarray, L: int) -> np.ndarray:
    """Resample a closed polygon to ``L`` nodes equally spaced in arc length,
    starting at the first vertex."""
    closed = np.vstack([c, c[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return np.repeat(c[:1], L, axis=0)
    s = np.arange(L) * total / L
    u = np.interp(s, cum, closed[:, 0])
    v = np.interp(s, cum, closed[:, 1])
    return np.stack([u, v], axis=1)


def is_simple(c: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect."""
    n = len(c)
    p0 = c
    p1 = np.roll(c, -1, axis=0)

    def orient(a, b, p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            a, b, cc, d = p0[i], p1[i], p0[j], p1[j]
            o1, o2 = orient(a, b, cc), orient(a, b, d)
            o3, o4 = orient(cc, d, a), orient(cc, d, b)
            if o1 * o2 < 0 and o3 * o4 < 0:
                return False
    return True


# -- polygon file format: {"id": str, "nodes": [[u, v], ...]} ----------------

def polygon_record(pid: str, c: np.ndarray) -> dict:
    return {"id": str(pid), "nodes": [[float(u), float(v)] for u, v in c]}


def write_polygons(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write polygons as JSON lines, one ``{"id", "nodes"}`` object per line."""
    with open(path, "w") as fh:
        for pid, c in items:
            fh.write(json.dumps(polygon_record(pid, c)) + "\n")


def read_polygons(path) -> dict[str, np.ndarray]:
    """Read a polygon file: JSON lines or a single JSON list of records."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("["):
        records = json.loads(stripped)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    out: dict[str, np.ndarray] = {}
    for rec in records:
        if "id" not in rec or "nodes" not in rec:
            raise ValueError(f"polygon record missing 'id' or 'nodes': {rec!r}")
        out[str(rec["id"])] = as_contour(rec["nodes"])
    return out
