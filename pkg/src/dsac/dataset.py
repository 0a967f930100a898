"""Synthetic building footprints, image ingestion, and dataset storage.

Layout of a dataset directory::

    patches/<id>.png     8-bit patch images
    polygons.jsonl       one {"id", "gt", "init", "meta"} object per line
    manifest.json        generator/ingest config and the train/test split
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .energy import BilinearStencil
from .geometry import (as_contour, centroid, default_radius, init_circle,
                       orient_positive, rasterize)

SHAPES = ("rect", "rotated", "lshape")


@dataclass
class Instance:
    id: str
    patch: np.ndarray            # (V, U, d) in [0, 1]
    gt: np.ndarray               # polygon vertices in patch coordinates
    init: np.ndarray             # initial contour in patch coordinates
    meta: dict = field(default_factory=dict)

    @property
    def U(self) -> int:
        return self.patch.shape[1]

    @property
    def V(self) -> int:
        return self.patch.shape[0]

    @property
    def scale_factor(self) -> float:
        return float(self.meta.get("scale_factor", 1.0))

    def gt_mask(self) -> np.ndarray:
        return rasterize(self.gt, self.U, self.V)

    def record(self) -> dict:
        return {"id": self.id, "gt": self.gt.tolist(), "init": self.init.tolist(), "meta": self.meta}


@dataclass
class SynthConfig:
    n: int = 300
    size: int = 128
    shape: str = "mixed"          # rect | rotated | lshape | mixed
    noise_sigma: float = 0.1
    texture: str = "flat"         # flat | gradient | speckle
    seed: int = 0
    jitter: float = 0.1           # init offset range, fraction of patch size
    L: int = 60
    radius_fraction: float = 0.15
    channels: int = 3
    distractors: int = 0
    id_prefix: str = "syn"

    def __post_init__(self):
        if self.shape not in SHAPES + ("mixed",):
            raise ValueError(f"unknown shape family {self.shape!r}")
        if self.texture not in ("flat", "gradient", "speckle"):
            raise ValueError(f"unknown texture {self.texture!r}")


# -- synthetic generator -----------------------------------------------------

def _rect(rng, S):
    w, h = rng.uniform(0.3, 0.6, 2) * S
    return np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2.0


def _rotated(rng, S):
    w, h = rng.uniform(0.3, 0.55, 2) * S
    t = rng.uniform(0.0, math.pi / 2)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return (np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2.0) @ R.T


def _lshape(rng, S):
    w, h = rng.uniform(0.4, 0.65, 2) * S
    a = rng.uniform(0.35, 0.6) * w
    b = rng.uniform(0.35, 0.6) * h
    # notch cut from the (+u, -v) corner, then a random quarter turn
    pts = np.array([[0, 0], [w - a, 0], [w - a, b], [w, b], [w, h], [0, h]], dtype=float)
    pts -= [w / 2, h / 2]
    for _ in range(int(rng.integers(4))):
        pts = np.stack([-pts[:, 1], pts[:, 0]], axis=1)
    return pts


_MAKERS = {"rect": _rect, "rotated": _rotated, "lshape": _lshape}


def _fit(poly: np.ndarray, center: np.ndarray, S: int, margin: float = 3.0) -> np.ndarray:
    """Shift the shape to ``center``, shrinking it if it would leave the patch."""
    lo, hi = margin, S - 1 - margin
    p = poly + center
    while p.min() < lo or p.max() > hi:
        poly = poly * 0.9
        p = poly + center
    return p


def render_patch(gt: np.ndarray, S: int, rng: np.random.Generator, cfg: SynthConfig,
                 distractors: list[np.ndarray] = ()) -> np.ndarray:
    d = cfg.channels
    bg = rng.uniform(0.25, 0.45, d)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    fg = np.clip(bg + sign * rng.uniform(0.3, 0.45, d), 0.0, 1.0)
    img = np.broadcast_to(bg, (S, S, d)).copy()
    for dp in distractors:
        img[rasterize(dp, S, S)] = np.clip(bg + sign * rng.uniform(0.15, 0.25, d), 0, 1)
    img[rasterize(gt, S, S)] = fg
    if cfg.texture == "gradient":
        t = rng.uniform(0, 2 * math.pi)
        vv, uu = np.mgrid[0:S, 0:S] / S
        img += 0.15 * (math.cos(t) * uu + math.sin(t) * vv)[..., None]
    elif cfg.texture == "speckle":
        img *= 1.0 + 0.15 * rng.standard_normal((S, S, 1))
    if cfg.noise_sigma > 0:
        img += cfg.noise_sigma * rng.standard_normal(img.shape)
    # quantize so that PNG storage is lossless
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(cfg: SynthConfig) -> list[Instance]:
    S = cfg.size
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n)
    out = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        family = cfg.shape if cfg.shape != "mixed" else SHAPES[int(rng.integers(len(SHAPES)))]
        center = S / 2.0 + rng.uniform(-0.05, 0.05, 2) * S
        gt = orient_positive(_fit(_MAKERS[family](rng, S), center, S))
        distractors = []
        for _ in range(cfg.distractors):
            side = rng.uniform(0.15, 0.25) * S
            corner = rng.choice([0.0, S - 1 - side], 2) + rng.uniform(-0.1, 0.1, 2) * S
            box = np.array([[0, 0], [side, 0], [side, side], [0, side]]) + corner
            distractors.append(np.clip(box, 0, S - 1))
        patch = render_patch(gt, S, rng, cfg, distractors)
        click = centroid(gt) + rng.uniform(-cfg.jitter, cfg.jitter, 2) * S
        init = init_circle(click, default_radius(S, S, cfg.radius_fraction), cfg.L, S, S)
        meta = {"source": "synthetic", "family": family, "scale_factor": 1.0}
        out.append(Instance(f"{cfg.id_prefix}{i:05d}", patch, gt, init, meta))
    return out


# -- geometric augmentation --------------------------------------------------

def _rot90_points(p: np.ndarray, S: int) -> np.ndarray:
    # np.rot90 (k=1) sends pixel (u, v) to (v, S - 1 - u)
    return np.stack([p[:, 1], S - 1 - p[:, 0]], axis=1)


def augment(inst: Instance, k: int, flip: bool) -> Instance:
    """Rotate a square instance by ``k`` quarter turns, then optionally mirror
    it left-right; polygons follow and stay positively oriented."""
    if inst.U != inst.V:
        raise ValueError("rotation augmentation needs square patches")
    S = inst.U
    patch, gt, init = inst.patch, inst.gt, inst.init
    for _ in range(k % 4):
        patch = np.rot90(patch)
        gt, init = _rot90_points(gt, S), _rot90_points(init, S)
    if flip:
        patch = patch[:, ::-1]
        gt = np.stack([S - 1 - gt[:, 0], gt[:, 1]], axis=1)
        init = np.stack([S - 1 - init[:, 0], init[:, 1]], axis=1)
    return Instance(inst.id, np.ascontiguousarray(patch), orient_positive(gt),
                    orient_positive(init), dict(inst.meta))


# -- ingestion of real imagery -----------------------------------------------

class IngestError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    arr = arr.astype(np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def _read_records(path) -> list[dict]:
    text = Path(path).read_text()
    if text.lstrip().startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def to_patch(points: np.ndarray, meta: dict) -> np.ndarray:
    o = np.asarray(meta["origin"])
    return (points + 0.5 - o) * meta["scale_factor"] - 0.5


def to_world(points: np.ndarray, meta: dict) -> np.ndarray:
    o = np.asarray(meta["origin"])
    return (points + 0.5) / meta["scale_factor"] + o - 0.5


def crop_window(init_world: np.ndarray, margin: float = 1.5) -> tuple[np.ndarray, float]:
    """Square window around the init polygon: returns the top-left corner in
    pixel-edge coordinates and the side length."""
    lo, hi = init_world.min(axis=0), init_world.max(axis=0)
    side = margin * float((hi - lo).max())
    if side <= 0:
        raise IngestError("initial polygon has an empty bounding box")
    center = (lo + hi) / 2.0
    return center + 0.5 - side / 2.0, side


def extract_patch(image: np.ndarray, origin: np.ndarray, side: float, U: int, V: int):
    """Bilinear resample of the window onto a ``(V, U)`` grid with edge
    replication outside the image."""
    H, W, d = image.shape
    meta = {"origin": origin.tolist(), "scale_factor": U / side}
    vv, uu = np.mgrid[0:V, 0:U]
    pts = to_world(np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64), meta)
    st = BilinearStencil.at(pts, (H, W))
    patch = np.stack([st.sample(image[:, :, ch]) for ch in range(d)], axis=1).reshape(V, U, d)
    padded = bool(pts.min() < 0 or pts[:, 0].max() > W - 1 or pts[:, 1].max() > H - 1)
    return patch, meta, padded


def ingest(image_dir, gt_file, init_file, U: int = 128, V: int | None = None,
           margin: float = 1.5) -> list[Instance]:
    """Build instances from world-coordinate polygons and their images.

    Records are ``{"id", "nodes"}`` with an optional ``"image"`` file name
    (default ``<id>.png``); every ground-truth id needs an initialization.
    """
    V = V or U
    image_dir = Path(image_dir)
    gts = _read_records(gt_file)
    inits = {str(r["id"]): r for r in _read_records(init_file)}
    cache: dict[str, np.ndarray] = {}
    out = []
    for rec in gts:
        pid = str(rec["id"])
        if pid not in inits:
            raise IngestError(f"no initial polygon for id {pid!r}")
        name = rec.get("image") or inits[pid].get("image") or f"{pid}.png"
        path = image_dir / name
        if not path.exists():
            raise IngestError(f"image {path} for id {pid!r} not found")
        if name not in cache:
            cache[name] = load_image(path)
        image = cache[name]
        H, W = image.shape[:2]
        gt_w = as_contour(rec["nodes"])
        init_w = as_contour(inits[pid]["nodes"])
        for label, poly in (("ground truth", gt_w), ("initial", init_w)):
            if poly.min() < 0 or poly[:, 0].max() > W - 1 or poly[:, 1].max() > H - 1:
                raise IngestError(f"{label} polygon of {pid!r} lies outside its image")
        origin, side = crop_window(init_w, margin)
        patch, meta, padded = extract_patch(image, origin, side, U, V)
        meta.update(source="ingest", image=name, padded=padded, crop_side=side)
        out.append(Instance(pid, patch, to_patch(gt_w, meta), to_patch(init_w, meta), meta))
    return out


def split(instances: list, fractions=(0.5, 0.5), seed: int = 0) -> tuple[list, ...]:
    """Deterministic shuffled partition; counts by largest remainder."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be non-negative and sum to 1")
    n = len(instances)
    raw = fr * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for k in counts:
        parts.append([instances[j] for j in order[start:start + k]])
        start += k
    return tuple(parts)


# -- storage -----------------------------------------------------------------

def save_patch(path, patch: np.ndarray) -> None:
    arr = np.round(np.clip(patch, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)


def write_dataset(directory, splits: dict[str, list[Instance]], config: dict,
                  force: bool = False) -> Path:
    d = Path(directory)
    if d.exists() and any(d.iterdir()) and not force:
        raise FileExistsError(f"{d} exists; pass force to overwrite")
    (d / "patches").mkdir(parents=True, exist_ok=True)
    with open(d / "polygons.jsonl", "w") as fh:
        for name in splits:
            for inst in splits[name]:
                save_patch(d / "patches" / f"{inst.id}.png", inst.patch)
                fh.write(json.dumps(inst.record()) + "\n")
    manifest = {
        "version": 1,
        "config": config,
        "split": {name: [i.id for i in insts] for name, insts in splits.items()},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def read_dataset(directory, split_name: str | None = None) -> list[Instance]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    wanted = None
    if split_name is not None:
        if split_name not in manifest["split"]:
            raise KeyError(f"split {split_name!r} not in {sorted(manifest['split'])}")
        wanted = manifest["split"][split_name]
    records = {}
    with open(d / "polygons.jsonl") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                records[r["id"]] = r
    ids = wanted if wanted is not None else list(records)
    out = []
    for pid in ids:
        r = records[pid]
        patch = load_image(d / "patches" / f"{pid}.png")
        out.append(Instance(pid, patch, as_contour(r["gt"]), as_contour(r["init"]), r.get("meta", {})))
    return out


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
