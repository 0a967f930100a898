"""Max-margin structured loss over contours and its map subgradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import (BilinearStencil, EnergyMaps, first_differences,
                     second_differences, total_energy)
from .geometry import iou_masks, rasterize


@dataclass
class MapGradients:
    dD: np.ndarray
    dAlpha: float | np.ndarray
    dBeta: np.ndarray
    dKappa: np.ndarray

    @classmethod
    def zeros(cls, shape: tuple[int, int], alpha_local: bool = False) -> "MapGradients":
        z = lambda: np.zeros(shape)
        return cls(z(), z() if alpha_local else 0.0, z(), z())

    def scaled(self, k: float) -> "MapGradients":
        return MapGradients(self.dD * k, self.dAlpha * k, self.dBeta * k, self.dKappa * k)

    def __add__(self, other: "MapGradients") -> "MapGradients":
        return MapGradients(self.dD + other.dD, self.dAlpha + other.dAlpha,
                            self.dBeta + other.dBeta, self.dKappa + other.dKappa)

    def is_zero(self) -> bool:
        return not (np.any(self.dD) or np.any(self.dAlpha)
                    or np.any(self.dBeta) or np.any(self.dKappa))


@dataclass
class LossReport:
    hinge: float
    task_loss: float
    energy_gt: float
    energy_hat: float
    margin_violated: bool
    margin: float = 1.0          # scale applied to task_loss inside the hinge

    @property
    def energy_gap(self) -> float:
        return self.energy_hat - self.energy_gt


def task_loss(gt_mask: np.ndarray, y_hat: np.ndarray) -> float:
    V, U = gt_mask.shape
    return 1.0 - iou_masks(rasterize(y_hat, U, V), gt_mask)


def margin_scale(mode: str, gt_mask: np.ndarray, y_hat: np.ndarray, c_delta: float = 1.0) -> float:
    """Factor multiplying ``1 - IoU`` inside the hinge.

    ``"iou"`` keeps the plain task loss.  ``"area"`` uses
    ``c_delta * |union|``, which turns the margin into ``c_delta`` times the
    number of mislabeled pixels: the same quantity the loss-augmented
    inference maximizes, measured in the units of the balloon energy.
    """
    if mode == "iou":
        return 1.0
    if mode == "area":
        V, U = gt_mask.shape
        return c_delta * float((rasterize(y_hat, U, V) | gt_mask).sum())
    raise ValueError(f"unknown margin mode {mode!r}")


def hinge_loss(maps: EnergyMaps, gt: np.ndarray, y_hat: np.ndarray,
               gt_mask: np.ndarray | None = None, margin: float = 1.0) -> LossReport:
    """``max(0, margin * Delta - E(y_hat) + E(gt))`` with ``Delta = 1 - IoU``.

    ``gt`` is the node representation used for the energy; ``gt_mask``
    defaults to its raster and may be given from the original polygon.
    """
    if gt_mask is None:
        gt_mask = rasterize(gt, maps.U, maps.V)
    delta = task_loss(gt_mask, y_hat)
    e_gt = total_energy(maps, gt)
    e_hat = total_energy(maps, y_hat)
    h = margin * delta - e_hat + e_gt
    return LossReport(max(0.0, h), delta, e_gt, e_hat, h > 0, margin)


def splat_nodes(c: np.ndarray, weights, U: int, V: int) -> np.ndarray:
    """Deposit per-node weights onto a ``(V, U)`` grid with bilinear
    coefficients; mass is conserved."""
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(c),))
    return BilinearStencil.at(c, (V, U)).splat(w, (V, U))


def energy_map_gradients(maps: EnergyMaps, c: np.ndarray) -> MapGradients:
    """Partial derivatives of ``total_energy(maps, c)`` w.r.t. every map
    value, with the contour held fixed."""
    V, U = maps.shape
    st = BilinearStencil.at(c, (V, U))
    ones = np.ones(len(c))
    d1 = first_differences(c)
    dD = st.splat(ones, (V, U))
    dAlpha = st.splat(d1, (V, U)) if maps.alpha_local else float(d1.sum())
    dBeta = st.splat(second_differences(c), (V, U))
    dKappa = -rasterize(c, U, V).astype(np.float64)
    return MapGradients(dD, dAlpha, dBeta, dKappa)


def loss_subgradients(maps: EnergyMaps, gt: np.ndarray, y_hat: np.ndarray,
                      report: LossReport | None = None) -> MapGradients:
    """Subgradient of the hinge w.r.t. the four maps.

    Zero when the margin holds.  Otherwise the energy gradient at ``gt``
    minus the one at ``y_hat``; for the balloon map this is
    ``mask(y_hat) - mask(gt)`` because the enclosed mass is subtracted.
    """
    if report is None:
        report = hinge_loss(maps, gt, y_hat)
    if not report.margin_violated:
        return MapGradients.zeros(maps.shape, maps.alpha_local)
    g_gt = energy_map_gradients(maps, gt)
    g_hat = energy_map_gradients(maps, y_hat)
    return g_gt + g_hat.scaled(-1.0)


# -- optimizers --------------------------------------------------------------

Params = dict[str, np.ndarray]


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: Params, grads: Params) -> Params:
        out = {}
        for k, w in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = w
                continue
            if self.weight_decay:
                g = g + self.weight_decay * w
            out[k] = (w - self.lr * g).astype(w.dtype, copy=False)
        return out


class Adam:
    def __init__(self, lr: float = 1e-4, weight_decay: float = 0.0,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr, self.weight_decay = lr, weight_decay
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t: dict[str, int] = {}

    def step(self, params: Params, grads: Params) -> Params:
        out = {}
        for k, w in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = w
                continue
            if self.weight_decay:
                g = g + self.weight_decay * w
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            t = self.t.get(k, 0) + 1
            self.m[k], self.v[k], self.t[k] = m, v, t
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            out[k] = (w - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(w.dtype, copy=False)
        return out

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}


def make_optimizer(name: str, lr: float, weight_decay: float = 0.0):
    if name == "adam":
        return Adam(lr, weight_decay)
    if name == "sgd":
        return SGD(lr, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def sgd_update(params: Params, grads: Params, lr: float, l2: float = 0.0,
               optimizer=None) -> Params:
    """One update of ``params`` against ``grads`` with weight decay ``l2``.

    Uses plain SGD unless a stateful ``optimizer`` is supplied.
    """
    if lr <= 0 and optimizer is None:
        raise ValueError("lr must be positive")
    opt = optimizer or SGD(lr, l2)
    return opt.step(params, grads)
