"""Energy-map predictors with exact reverse-mode gradients.

Two predictors share the same output heads:

* :class:`DirectGrid` keeps the four pre-activation maps as free parameters
  (one set per training instance) and ignores the image.
* :class:`ConvNet` is a small hypercolumn network: conv blocks
  (conv -> ReLU -> 2x2 pool), every block output upsampled to the patch size
  and concatenated, then a per-pixel two-layer perceptron with four outputs.

Heads: ``D`` and ``kappa`` are identities, ``alpha`` and ``beta`` go through
softplus.  Non-local terms are reduced to their spatial mean.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .energy import EnergyMaps
from .ssvm import MapGradients

Params = dict[str, np.ndarray]

MODEL_MAGIC = b"DSACMDL\x00"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Model file is corrupt or does not match the requested architecture."""


# -- heads -------------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    alpha_local: bool = False
    beta_local: bool = True
    kappa_local: bool = True
    no_kappa: bool = False


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_heads(raw: np.ndarray, heads: HeadConfig) -> EnergyMaps:
    """Map a ``(4, V, U)`` pre-activation stack to :class:`EnergyMaps`."""
    raw = raw.astype(np.float64, copy=False)
    D = raw[0].copy()
    a = softplus(raw[1])
    alpha = a if heads.alpha_local else float(a.mean())
    beta = softplus(raw[2])
    if not heads.beta_local:
        beta = np.full_like(beta, beta.mean())
    if heads.no_kappa:
        kappa = np.zeros_like(D)
    elif heads.kappa_local:
        kappa = raw[3].copy()
    else:
        kappa = np.full_like(D, raw[3].mean())
    return EnergyMaps(D, alpha, beta, kappa, heads.alpha_local, heads.beta_local,
                      heads.kappa_local and not heads.no_kappa)


def heads_backward(raw: np.ndarray, grads: MapGradients, heads: HeadConfig) -> np.ndarray:
    """Gradient w.r.t. the pre-activation stack; scalar terms spread their
    gradient uniformly over the pixels they were averaged from."""
    n = raw[0].size
    out = np.zeros(raw.shape, dtype=np.float64)
    out[0] = grads.dD
    if heads.alpha_local:
        out[1] = np.asarray(grads.dAlpha) * sigmoid(raw[1])
    else:
        out[1] = (float(np.sum(grads.dAlpha)) / n) * sigmoid(raw[1])
    dbeta = grads.dBeta if heads.beta_local else np.full(raw[2].shape, grads.dBeta.sum() / n)
    out[2] = dbeta * sigmoid(raw[2])
    if not heads.no_kappa:
        out[3] = grads.dKappa if heads.kappa_local else grads.dKappa.sum() / n
    return out


def probe_loss(maps: EnergyMaps, grads: MapGradients) -> float:
    """``sum(maps * grads)``: the scalar whose gradient :meth:`backward`
    returns when handed ``grads``."""
    return float((maps.D * grads.dD).sum() + np.sum(np.asarray(maps.alpha) * grads.dAlpha)
                 + (maps.beta * grads.dBeta).sum() + (maps.kappa * grads.dKappa).sum())


# -- DirectGrid --------------------------------------------------------------

class DirectGrid:
    kind = "direct"

    def __init__(self, U: int, V: int, heads: HeadConfig = HeadConfig(), in_channels: int = 3):
        self.U, self.V, self.heads, self.in_channels = U, V, heads, in_channels

    def architecture(self) -> dict:
        return {"kind": self.kind, "U": self.U, "V": self.V, "d": self.in_channels,
                "heads": asdict(self.heads)}

    def init_params(self, seed: int = 0) -> Params:
        return {"raw": np.zeros((4, self.V, self.U))}

    def forward(self, params: Params, patch=None) -> EnergyMaps:
        return apply_heads(params["raw"], self.heads)

    def forward_with_cache(self, params: Params, patch=None):
        return self.forward(params), None

    def backward(self, params: Params, patch, grads: MapGradients, cache=None) -> Params:
        return {"raw": heads_backward(params["raw"], grads, self.heads)}


# -- ConvNet layers ----------------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded stride-1 correlation of ``x (C, H, W)`` with ``w (O, C, k, k)``."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))        # (C, H, W, k, k)
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(H * W, C * k * k)
    out = (w.reshape(O, -1) @ cols.T).reshape(O, H, W) + b[:, None, None]
    return out, cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, need_dx=True):
    O, C, k, _ = w.shape
    _, H, W = x_shape
    d2 = dout.reshape(O, H * W)
    dw = (d2 @ cols).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    p = k // 2
    dcols = (d2.T @ w.reshape(O, -1)).reshape(H, W, C, k, k)
    dxp = np.zeros((C, H + 2 * p, W + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    return dxp[:, p:p + H, p:p + W], dw, db


def _windows(x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    return x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)


def pool2x2(x: np.ndarray, mode: str):
    if mode == "avg":
        C, H, W = x.shape
        return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4)), None
    win = _windows(x)
    arg = win.argmax(axis=3)            # first maximum wins ties
    return np.take_along_axis(win, arg[..., None], axis=3)[..., 0], arg


def pool2x2_backward(dout: np.ndarray, mode: str, arg=None):
    C, h, w = dout.shape
    if mode == "avg":
        g = np.broadcast_to(dout[:, :, None, :, None] * 0.25, (C, h, 2, w, 2))
        return g.reshape(C, 2 * h, 2 * w)
    win = np.zeros((C, h, w, 4), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=3)
    return win.reshape(C, h, w, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, 2 * h, 2 * w)


def upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation matrix ``(n_out, n_in)`` with half-pixel alignment."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - f)
    np.add.at(R, (rows, i1), f)
    return R


@dataclass(frozen=True)
class ConvNetConfig:
    U: int = 128
    V: int = 128
    in_channels: int = 3
    kernels: tuple[int, ...] = (7, 5, 3)
    channels: tuple[int, ...] = (16, 32, 64)
    hidden: int = 32
    pool: str = "avg"
    include_input: bool = True
    out_bias: tuple[float, float, float, float] = (0.0, -2.0, -2.0, 0.0)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if len(self.kernels) != len(self.channels):
            raise ValueError("kernels and channels must have equal length")
        if self.pool not in ("avg", "max"):
            raise ValueError("pool must be 'avg' or 'max'")
        step = 2 ** len(self.kernels)
        if self.U % step or self.V % step:
            raise ValueError(f"patch size must be divisible by {step}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        d["channels"] = list(self.channels)
        d["out_bias"] = list(self.out_bias)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConvNetConfig":
        d = dict(d)
        d["heads"] = HeadConfig(**d.get("heads", {}))
        for key in ("kernels", "channels", "out_bias"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class ConvNet:
    kind = "convnet"

    def __init__(self, cfg: ConvNetConfig = ConvNetConfig()):
        self.cfg = cfg
        self.heads = cfg.heads
        self.U, self.V = cfg.U, cfg.V
        self._up = []
        size_v, size_u = cfg.V, cfg.U
        for _ in cfg.kernels:
            size_v, size_u = size_v // 2, size_u // 2
            self._up.append((upsample_matrix(cfg.V, size_v), upsample_matrix(cfg.U, size_u)))

    def architecture(self) -> dict:
        d = self.cfg.to_dict()
        d["kind"] = self.kind
        return d

    @property
    def n_features(self) -> int:
        return sum(self.cfg.channels) + (self.cfg.in_channels if self.cfg.include_input else 0)

    def init_params(self, seed: int = 0, dtype=np.float32) -> Params:
        """Centered uniform weights scaled by fan-in, zero biases."""
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        p: Params = {}
        c_in = cfg.in_channels
        for i, (k, c_out) in enumerate(zip(cfg.kernels, cfg.channels)):
            fan_in = c_in * k * k
            lim = np.sqrt(6.0 / fan_in)
            p[f"conv{i}.w"] = rng.uniform(-lim, lim, (c_out, c_in, k, k))
            p[f"conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        lim = np.sqrt(6.0 / self.n_features)
        p["mlp.w1"] = rng.uniform(-lim, lim, (cfg.hidden, self.n_features))
        p["mlp.b1"] = np.zeros(cfg.hidden)
        lim = np.sqrt(3.0 / cfg.hidden)
        p["mlp.w2"] = rng.uniform(-lim, lim, (4, cfg.hidden)) * 0.1
        p["mlp.b2"] = np.asarray(cfg.out_bias, dtype=np.float64)
        return {k: v.astype(dtype) for k, v in p.items()}

    def check_params(self, params: Params) -> None:
        ref = self.init_params(0)
        if set(ref) != set(params):
            raise ValueError(f"parameter names {sorted(params)} do not match architecture")
        for k, v in ref.items():
            if params[k].shape != v.shape:
                raise ValueError(f"{k} has shape {params[k].shape}, architecture expects {v.shape}")

    def _as_input(self, patch: np.ndarray, dtype) -> np.ndarray:
        x = np.asarray(patch)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape != (self.V, self.U, self.cfg.in_channels):
            raise ValueError(f"patch shape {x.shape} does not match "
                             f"({self.V}, {self.U}, {self.cfg.in_channels})")
        return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=dtype)

    def forward_with_cache(self, params: Params, patch: np.ndarray):
        cfg = self.cfg
        dtype = params["mlp.w1"].dtype
        x = self._as_input(patch, dtype)
        cache: dict = {"x": x, "blocks": []}
        feats = [x.reshape(x.shape[0], -1)] if cfg.include_input else []
        h = x
        for i in range(len(cfg.kernels)):
            w, b = params[f"conv{i}.w"], params[f"conv{i}.b"]
            z, cols = conv2d(h, w, b)
            r = np.maximum(z, 0)
            pooled, mask = pool2x2(r, cfg.pool)
            cache["blocks"].append((h.shape, cols, z > 0, mask))
            Ry, Rx = self._up[i]
            up = np.einsum("vh,chw->cvw", Ry.astype(dtype), pooled, optimize=True) @ Rx.T.astype(dtype)
            feats.append(up.reshape(up.shape[0], -1))
            h = pooled
        F = np.concatenate(feats, axis=0)                     # (n_features, V*U)
        a1 = params["mlp.w1"] @ F + params["mlp.b1"][:, None]
        h1 = np.maximum(a1, 0)
        out = params["mlp.w2"] @ h1 + params["mlp.b2"][:, None]
        raw = out.reshape(4, self.V, self.U)
        cache.update(F=F, a1=a1, h1=h1, raw=raw)
        return apply_heads(raw, self.heads), cache

    def forward(self, params: Params, patch: np.ndarray) -> EnergyMaps:
        return self.forward_with_cache(params, patch)[0]

    def backward(self, params: Params, patch, grads: MapGradients, cache=None) -> Params:
        if cache is None:
            cache = self.forward_with_cache(params, patch)[1]
        cfg = self.cfg
        dtype = params["mlp.w1"].dtype
        draw = heads_backward(cache["raw"], grads, self.heads).astype(dtype).reshape(4, -1)
        g: Params = {}
        h1, F = cache["h1"], cache["F"]
        g["mlp.w2"] = draw @ h1.T
        g["mlp.b2"] = draw.sum(axis=1)
        dh1 = (params["mlp.w2"].T @ draw) * (cache["a1"] > 0)
        g["mlp.w1"] = dh1 @ F.T
        g["mlp.b1"] = dh1.sum(axis=1)
        dF = params["mlp.w1"].T @ dh1

        offset = cfg.in_channels if cfg.include_input else 0
        dpooled_from_up = []
        for i, c in enumerate(cfg.channels):
            Ry, Rx = self._up[i]
            dup = dF[offset:offset + c].reshape(c, self.V, self.U)
            offset += c
            d = np.einsum("vh,cvw->chw", Ry.astype(dtype), dup @ Rx.astype(dtype), optimize=True)
            dpooled_from_up.append(d)

        dh = None
        for i in reversed(range(len(cfg.kernels))):
            in_shape, cols, active, mask = cache["blocks"][i]
            dpooled = dpooled_from_up[i] if dh is None else dpooled_from_up[i] + dh
            dr = pool2x2_backward(dpooled, cfg.pool, mask)
            dz = dr * active
            dh, dw, db = conv2d_backward(dz, cols, params[f"conv{i}.w"], in_shape, need_dx=i > 0)
            g[f"conv{i}.w"] = dw
            g[f"conv{i}.b"] = db
        return {k: v.astype(params[k].dtype, copy=False) for k, v in g.items()}


def make_predictor(kind: str, U: int, V: int, heads: HeadConfig = HeadConfig(), **arch):
    if kind == "direct":
        return DirectGrid(U, V, heads, arch.get("in_channels", 3))
    if kind == "convnet":
        return ConvNet(ConvNetConfig(U=U, V=V, heads=heads, **arch))
    raise ValueError(f"unknown predictor {kind!r}")


def predictor_from_architecture(arch: dict):
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "direct":
        return DirectGrid(arch["U"], arch["V"], HeadConfig(**arch.get("heads", {})), arch.get("d", 3))
    if kind == "convnet":
        return ConvNet(ConvNetConfig.from_dict(arch))
    raise ModelFormatError(f"unknown predictor kind {kind!r}")


def parameter_count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


# -- model file --------------------------------------------------------------

def architecture_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def save_params(path, params: Params, architecture: dict, seed: int = 0,
                dtype: str = "<f4", extra: dict | None = None) -> None:
    """Single-file model: magic, header length, JSON header, raw tensors.

    Tensors are written in sorted name order as little-endian ``dtype``;
    the header carries a SHA-256 of the payload.
    """
    names = sorted(params)
    chunks, tensors, offset = [], [], 0
    for name in names:
        buf = np.ascontiguousarray(params[name], dtype=dtype).tobytes()
        tensors.append({"name": name, "shape": list(params[name].shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "version": MODEL_VERSION,
        "architecture": architecture,
        "arch_hash": architecture_hash(architecture),
        "seed": seed,
        "U": architecture.get("U"),
        "V": architecture.get("V"),
        "d": architecture.get("in_channels", architecture.get("d")),
        "dtype": dtype,
        "tensors": tensors,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load_params(path, expected_architecture: dict | None = None) -> tuple[Params, dict]:
    blob = Path(path).read_bytes()
    if blob[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    pos = len(MODEL_MAGIC)
    try:
        (hlen,) = struct.unpack("<I", blob[pos:pos + 4])
        header = json.loads(blob[pos + 4:pos + 4 + hlen])
    except (struct.error, ValueError) as exc:
        raise ModelFormatError(f"{path}: unreadable header") from exc
    if header.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: version {header.get('version')} != {MODEL_VERSION}")
    payload = blob[pos + 4 + hlen:]
    if len(payload) != header["payload_bytes"] or \
            hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ModelFormatError(f"{path}: checksum mismatch")
    if expected_architecture is not None and \
            architecture_hash(expected_architecture) != header["arch_hash"]:
        raise ModelFormatError(
            f"{path}: architecture mismatch (file U={header['U']} V={header['V']}, "
            f"expected U={expected_architecture.get('U')} V={expected_architecture.get('V')})")
    dt = np.dtype(header["dtype"])
    params: Params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
    return params, header
