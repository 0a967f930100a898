"""Snake energy with locally varying weights, and its force forms.

The energy of a contour ``y`` under maps ``D, alpha, beta, kappa`` is::

    E(y) = sum_s [ D(y_s) + alpha_s |y_{s+1} - y_s|^2
                   + beta_s |y_{s+1} - 2 y_s + y_{s-1}|^2 ]  -  sum_{Omega(y)} kappa

with node-wise weights bilinearly sampled from their maps.  The balloon mass
enters with a minus sign so that positive ``kappa`` rewards enclosed area.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import rasterize


@dataclass(frozen=True)
class EnergyMaps:
    """Per-pixel energy weights, all ``(V, U)`` arrays.

    ``alpha`` is a float when the membrane weight is global.
    """

    D: np.ndarray
    alpha: float | np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    alpha_local: bool = False
    beta_local: bool = True
    kappa_local: bool = True

    def __post_init__(self):
        shape = np.shape(self.D)
        for name in ("beta", "kappa"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if np.ndim(self.alpha) == 0:
            object.__setattr__(self, "alpha", float(self.alpha))
            object.__setattr__(self, "alpha_local", False)
        else:
            if np.shape(self.alpha) != shape:
                raise ValueError("alpha grid does not match D")
            object.__setattr__(self, "alpha_local", True)
        if np.min(self.alpha) < 0 or np.min(self.beta) < 0:
            raise ValueError("alpha and beta must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.D.shape

    @property
    def U(self) -> int:
        return self.D.shape[1]

    @property
    def V(self) -> int:
        return self.D.shape[0]

    def with_kappa(self, kappa: np.ndarray) -> "EnergyMaps":
        return EnergyMaps(self.D, self.alpha, self.beta, kappa,
                          self.alpha_local, self.beta_local, self.kappa_local)


def constant_maps(U: int, V: int, D=0.0, alpha=0.0, beta=0.0, kappa=0.0) -> EnergyMaps:
    full = lambda x: np.full((V, U), float(x))
    return EnergyMaps(full(D), float(alpha), full(beta), full(kappa))


# -- bilinear sampling -------------------------------------------------------

@dataclass(frozen=True)
class BilinearStencil:
    """Indices and weights of the four pixel centers around each point."""

    v0: np.ndarray
    u0: np.ndarray
    v1: np.ndarray
    u1: np.ndarray
    fu: np.ndarray
    fv: np.ndarray

    @classmethod
    def at(cls, points: np.ndarray, shape: tuple[int, int]) -> "BilinearStencil":
        V, U = shape
        u = np.minimum(np.maximum(points[:, 0], 0.0), U - 1)
        v = np.minimum(np.maximum(points[:, 1], 0.0), V - 1)
        # the upper neighbour must exist, so the last center uses the cell below it
        u0 = np.minimum(u.astype(np.int64), max(U - 2, 0))
        v0 = np.minimum(v.astype(np.int64), max(V - 2, 0))
        u1 = np.minimum(u0 + 1, U - 1)
        v1 = np.minimum(v0 + 1, V - 1)
        return cls(v0, u0, v1, u1, u - u0, v - v0)

    def weights(self) -> tuple[np.ndarray, ...]:
        fu, fv = self.fu, self.fv
        return (1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv

    def sample(self, grid: np.ndarray) -> np.ndarray:
        w00, w01, w10, w11 = self.weights()
        return (w00 * grid[self.v0, self.u0] + w01 * grid[self.v0, self.u1]
                + w10 * grid[self.v1, self.u0] + w11 * grid[self.v1, self.u1])

    def gradient(self, grid: np.ndarray) -> np.ndarray:
        """Exact ``(d/du, d/dv)`` of the bilinear surface, shape ``(N, 2)``."""
        g00 = grid[self.v0, self.u0]
        g01 = grid[self.v0, self.u1]
        g10 = grid[self.v1, self.u0]
        g11 = grid[self.v1, self.u1]
        fu, fv = self.fu, self.fv
        du = (1 - fv) * (g01 - g00) + fv * (g11 - g10)
        dv = (1 - fu) * (g10 - g00) + fu * (g11 - g01)
        return np.stack([du, dv], axis=1)

    def splat(self, weights: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        """Adjoint of :meth:`sample`: deposit ``weights`` onto a zero grid."""
        out = np.zeros(shape)
        w00, w01, w10, w11 = self.weights()
        np.add.at(out, (self.v0, self.u0), w00 * weights)
        np.add.at(out, (self.v0, self.u1), w01 * weights)
        np.add.at(out, (self.v1, self.u0), w10 * weights)
        np.add.at(out, (self.v1, self.u1), w11 * weights)
        return out


def sample_bilinear(grid: np.ndarray, points) -> np.ndarray | float:
    """Bilinear interpolation between pixel centers; points are clamped."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = BilinearStencil.at(pts, grid.shape).sample(grid)
    return float(out[0]) if single else out


def node_weights(w: float | np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-node values of a weight that is either a scalar or a map."""
    if np.ndim(w) == 0:
        return np.full(len(c), float(w))
    return BilinearStencil.at(c, np.shape(w)).sample(w)


# -- data term ---------------------------------------------------------------

def data_energy(D: np.ndarray, c: np.ndarray) -> float:
    return float(BilinearStencil.at(c, D.shape).sample(D).sum())


def data_force(D: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``-grad D`` at every node, from the bilinear surface, shape ``(L, 2)``."""
    return -BilinearStencil.at(c, D.shape).gradient(D)


# -- internal terms ----------------------------------------------------------

def _next(x: np.ndarray) -> np.ndarray:
    return np.concatenate((x[1:], x[:1]))


def _prev(x: np.ndarray) -> np.ndarray:
    return np.concatenate((x[-1:], x[:-1]))


def first_differences(c: np.ndarray) -> np.ndarray:
    """Per-node ``|y_{s+1} - y_s|^2``."""
    d = _next(c) - c
    return (d * d).sum(axis=1)


def second_differences(c: np.ndarray) -> np.ndarray:
    """Per-node ``|y_{s+1} - 2 y_s + y_{s-1}|^2``."""
    d = _next(c) - 2.0 * c + _prev(c)
    return (d * d).sum(axis=1)


def internal_energy(alpha_s: np.ndarray, beta_s: np.ndarray, c: np.ndarray) -> float:
    return float(np.dot(alpha_s, first_differences(c)) + np.dot(beta_s, second_differences(c)))


def internal_matrices(alpha_s, beta_s, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic tri-diagonal ``A`` and penta-diagonal ``B`` with
    ``(A + B) @ y == d E_int / d y`` for node weights frozen at ``alpha_s``,
    ``beta_s``."""
    L = len(c)
    a = np.broadcast_to(np.asarray(alpha_s, dtype=np.float64), (L,))
    b = np.broadcast_to(np.asarray(beta_s, dtype=np.float64), (L,))
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("alpha and beta must be non-negative at every node")
    s = np.arange(L)
    am = np.roll(a, 1)        # alpha_{s-1}
    bm = np.roll(b, 1)        # beta_{s-1}
    bp = np.roll(b, -1)       # beta_{s+1}

    A = np.zeros((L, L))
    np.add.at(A, (s, (s - 1) % L), -2.0 * am)
    np.add.at(A, (s, s), 2.0 * (am + a))
    np.add.at(A, (s, (s + 1) % L), -2.0 * a)

    B = np.zeros((L, L))
    np.add.at(B, (s, (s - 2) % L), 2.0 * bm)
    np.add.at(B, (s, (s - 1) % L), 2.0 * (-2.0 * b - 2.0 * bm))
    np.add.at(B, (s, s), 2.0 * (bm + 4.0 * b + bp))
    np.add.at(B, (s, (s + 1) % L), 2.0 * (-2.0 * bp - 2.0 * b))
    np.add.at(B, (s, (s + 2) % L), 2.0 * bp)
    return A, B


# -- balloon term ------------------------------------------------------------

def shoelace_matrix(L: int) -> np.ndarray:
    """Cyclic ``C`` with 0 on the diagonal, +1 above and -1 below."""
    C = np.zeros((L, L))
    s = np.arange(L)
    C[s, (s + 1) % L] += 1.0
    C[s, (s - 1) % L] -= 1.0
    return C


def shoelace_energy(c: np.ndarray) -> float:
    """``u^T C v``, twice the signed area."""
    u, v = c[:, 0], c[:, 1]
    return float(u @ shoelace_matrix(len(c)) @ v)


def normals(c: np.ndarray) -> np.ndarray:
    """Unnormalized node normals ``[v_{s+1} - v_{s-1}, u_{s-1} - u_{s+1}]``;
    outward for positively oriented contours."""
    nxt, prv = _next(c), _prev(c)
    return np.stack([nxt[:, 1] - prv[:, 1], prv[:, 0] - nxt[:, 0]], axis=1)


def balloon_energy(kappa: np.ndarray, c: np.ndarray) -> float:
    """Sum of ``kappa`` over the rasterized interior."""
    V, U = kappa.shape
    return float(kappa[rasterize(c, U, V)].sum())


def _segment_moments(kappa: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each edge ``s -> s+1`` return ``int_0^1 (1-t) k(q(t)) dt`` and
    ``int_0^1 t k(q(t)) dt`` along ``q(t) = y_s + t (y_{s+1} - y_s)``.

    Composite trapezoid with ``ceil(length) + 1`` samples per edge, exact
    when ``kappa`` is linear along the edge.
    """
    L = len(c)
    nxt = _next(c)
    length = np.linalg.norm(nxt - c, axis=1)
    n = np.maximum(np.ceil(length).astype(np.int64) + 1, 2)
    seg = np.repeat(np.arange(L), n)
    start = np.cumsum(n) - n
    k = np.arange(seg.size) - start[seg]
    t = k / (n[seg] - 1)
    w = np.where((k == 0) | (k == n[seg] - 1), 0.5, 1.0) / (n[seg] - 1)
    q = c[seg] + t[:, None] * (nxt[seg] - c[seg])
    kq = BilinearStencil.at(q, kappa.shape).sample(kappa) * w
    head = np.bincount(seg, weights=(1.0 - t) * kq, minlength=L)
    tail = np.bincount(seg, weights=t * kq, minlength=L)
    return head, tail


def balloon_gradient(kappa: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``[dE_k/du_s, dE_k/dv_s]`` for ``E_k`` the kappa mass enclosed by the
    contour, taken as positively oriented.

    Moving node ``s`` sweeps two thin triangles along its incident edges;
    their kappa-weighted areas are the edge moments scaled by the height of
    each edge.  Constant ``kappa`` reduces this to ``kappa/2 * normals(c)``.
    """
    head, tail = _segment_moments(kappa, c)
    nxt, prv = _next(c), _prev(c)
    tail_prev = _prev(tail)   # edge s-1 -> s, weight towards node s
    du = (nxt[:, 1] - c[:, 1]) * head - (prv[:, 1] - c[:, 1]) * tail_prev
    dv = -(nxt[:, 0] - c[:, 0]) * head + (prv[:, 0] - c[:, 0]) * tail_prev
    return np.stack([du, dv], axis=1)


def balloon_force(kappa: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Force of the balloon term on each node; positive kappa pushes outwards.

    The energy carries ``-E_k``, so its descent direction is ``+grad E_k``.
    """
    return balloon_gradient(kappa, c)


# -- full energy -------------------------------------------------------------

def energy_terms(maps: EnergyMaps, c: np.ndarray) -> dict[str, float]:
    alpha_s = node_weights(maps.alpha, c)
    beta_s = node_weights(maps.beta, c)
    return {
        "data": data_energy(maps.D, c),
        "membrane": float(np.dot(alpha_s, first_differences(c))),
        "thin_plate": float(np.dot(beta_s, second_differences(c))),
        "balloon": balloon_energy(maps.kappa, c),
    }


def total_energy(maps: EnergyMaps, c: np.ndarray) -> float:
    t = energy_terms(maps, c)
    return t["data"] + t["membrane"] + t["thin_plate"] - t["balloon"]


# -- serialization -----------------------------------------------------------

_GRIDS = ("D", "beta", "kappa")


def save_maps(maps: EnergyMaps, directory) -> None:
    """Write flat little-endian float32 grids plus ``header.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _GRIDS:
        np.asarray(getattr(maps, name), dtype="<f4").tofile(d / f"{name}.f32")
    np.atleast_1d(np.asarray(maps.alpha, dtype="<f4")).tofile(d / "alpha.f32")
    header = {
        "U": maps.U,
        "V": maps.V,
        "alpha_mode": "local" if maps.alpha_local else "scalar",
        "beta_local": maps.beta_local,
        "kappa_local": maps.kappa_local,
        "dtype": "<f4",
    }
    (d / "header.json").write_text(json.dumps(header, indent=2))


def load_maps(directory) -> EnergyMaps:
    d = Path(directory)
    header = json.loads((d / "header.json").read_text())
    U, V = int(header["U"]), int(header["V"])

    def grid(name, count):
        data = np.fromfile(d / f"{name}.f32", dtype="<f4")
        if data.size != count:
            raise ValueError(f"{name}.f32 holds {data.size} values, expected {count}")
        return data.astype(np.float64)

    D, beta, kappa = (grid(n, U * V).reshape(V, U) for n in _GRIDS)
    if header["alpha_mode"] == "local":
        alpha = grid("alpha", U * V).reshape(V, U)
    elif header["alpha_mode"] == "scalar":
        alpha = float(grid("alpha", 1)[0])
    else:
        raise ValueError(f"unknown alpha_mode {header['alpha_mode']!r}")
    return EnergyMaps(D, alpha, beta, kappa,
                      beta_local=header.get("beta_local", True),
                      kappa_local=header.get("kappa_local", True))
