"""SVG overlays of ground truth, initialization and prediction on a patch."""
from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image

STYLES = {
    "gt": {"stroke": "#00FF00", "dash": None},
    "init": {"stroke": "#0000FF", "dash": "6,3,1,3"},
    "pred": {"stroke": "#FFFF00", "dash": "5,3"},
}


def _png_base64(patch: np.ndarray) -> str:
    p = np.asarray(patch)
    if p.ndim == 3 and p.shape[2] == 1:
        p = p[..., 0]
    if p.ndim == 3 and p.shape[2] not in (3, 4):
        p = p[..., :3]
    img = Image.fromarray(np.clip(np.rint(p * 255), 0, 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _polygon(points: np.ndarray, style: dict, width: float) -> str:
    # pixel centers sit at integer coordinates, the image spans [-0.5, U-0.5]
    pts = " ".join(f"{u + 0.5:.3f},{v + 0.5:.3f}" for u, v in np.asarray(points, float))
    dash = f' stroke-dasharray="{style["dash"]}"' if style["dash"] else ""
    return (f'  <polygon points="{pts}" fill="none" stroke="{style["stroke"]}" '
            f'stroke-width="{width}"{dash}/>')


def svg_overlay(patch: np.ndarray, gt=None, init=None, pred=None, scale: float = 4.0) -> str:
    """SVG 1.1 document with the patch as an embedded PNG and up to three
    polygons drawn in patch pixel coordinates."""
    V, U = patch.shape[:2]
    lines = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'version="1.1" width="{U * scale:g}" height="{V * scale:g}" viewBox="0 0 {U} {V}">',
        f'  <image x="0" y="0" width="{U}" height="{V}" preserveAspectRatio="none" '
        f'xlink:href="data:image/png;base64,{_png_base64(patch)}"/>',
    ]
    width = 1.5 / scale * 2
    for name, poly in (("gt", gt), ("init", init), ("pred", pred)):
        if poly is not None:
            lines.append(_polygon(poly, STYLES[name], width))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(path, patch, gt=None, init=None, pred=None, scale: float = 4.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg_overlay(patch, gt, init, pred, scale))
    return path
