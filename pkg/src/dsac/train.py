"""Structured training of an energy predictor through ACM inference.

Per instance: predict maps, run loss-augmented inference from the
initialization, take the hinge subgradients w.r.t. the maps, backpropagate
into the predictor and step the optimizer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import Instance, augment
from .energy import EnergyMaps
from .geometry import clamp, iou_masks, orient_positive, rasterize, resample
from .inference import InferenceConfig, Trajectory, run_inference, run_loss_augmented
from .predictor import (ConvNet, ConvNetConfig, DirectGrid, HeadConfig, load_params,
                        predictor_from_architecture, save_params)
from .ssvm import hinge_loss, loss_subgradients, make_optimizer, margin_scale

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Non-finite maps or gradients; a diagnostic dump was written."""


def heads_from(cfg: RunConfig) -> HeadConfig:
    return HeadConfig(cfg.alpha_local, cfg.beta_local, cfg.kappa_local, cfg.no_kappa)


def inference_config(cfg: RunConfig, record_trajectory: bool = False) -> InferenceConfig:
    return InferenceConfig(cfg.iterations, cfg.step_gamma, True, record_trajectory)


def build_predictor(cfg: RunConfig, U: int, V: int, d: int = 3):
    heads = heads_from(cfg)
    if cfg.predictor == "direct":
        return DirectGrid(U, V, heads, d)
    if cfg.predictor == "convnet":
        return ConvNet(ConvNetConfig(U=U, V=V, in_channels=d, kernels=tuple(cfg.kernels),
                                     channels=tuple(cfg.channels), hidden=cfg.hidden,
                                     pool=cfg.pool, include_input=cfg.include_input,
                                     out_bias=tuple(cfg.out_bias), heads=heads))
    raise ValueError(f"unknown predictor {cfg.predictor!r}")


def initial_contour(inst: Instance, L: int) -> np.ndarray:
    c = orient_positive(inst.init)
    if len(c) != L:
        c = resample(c, L)
    return clamp(c, inst.U, inst.V)


def gt_contour(inst: Instance, L: int) -> np.ndarray:
    """Ground truth as ``L`` nodes, for evaluating its energy."""
    return resample(orient_positive(inst.gt), L)


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


@dataclass
class StepRecord:
    iter: int
    epoch: int
    id: str
    hinge: float
    task_loss: float
    energy_gap: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


class Trainer:
    """Owns the predictor parameters and optimizer state (single writer)."""

    def __init__(self, cfg: RunConfig, U: int, V: int, d: int = 3, out_dir=None):
        self.cfg = cfg
        self.U, self.V, self.d = U, V, d
        self.predictor = build_predictor(cfg, U, V, d)
        self.optimizer = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
        if isinstance(self.predictor, ConvNet):
            self.params = self.predictor.init_params(cfg.seed, dtype=np.dtype(cfg.dtype))
        else:
            self.params = {}
        self.inf_cfg = inference_config(cfg)
        self.out_dir = Path(out_dir) if out_dir else None
        self.iteration = 0
        self.history: list[StepRecord] = []

    # -- parameters ---------------------------------------------------------
    @property
    def is_direct(self) -> bool:
        return isinstance(self.predictor, DirectGrid)

    def instance_params(self, inst_id: str, create: bool = False) -> dict:
        if not self.is_direct:
            return self.params
        key = f"{inst_id}/raw"
        if key not in self.params:
            if not create:
                raise KeyError(f"DirectGrid has no maps for instance {inst_id!r}")
            self.params[key] = self.predictor.init_params()["raw"]
        return {"raw": self.params[key]}

    def _qualify(self, inst_id: str, grads: dict) -> dict:
        return {f"{inst_id}/raw": grads["raw"]} if self.is_direct else grads

    def maps_for(self, inst: Instance) -> EnergyMaps:
        return self.predictor.forward(self.instance_params(inst.id), inst.patch)

    # -- training -----------------------------------------------------------
    def _dump(self, inst, maps, contours: dict, reason: str):
        if self.out_dir is None:
            raise TrainingDiverged(reason)
        d = self.out_dir / "nan_dump"
        d.mkdir(parents=True, exist_ok=True)
        arrays = {k: np.asarray(v) for k, v in contours.items()}
        if maps is not None:
            arrays.update(D=maps.D, alpha=np.asarray(maps.alpha), beta=maps.beta, kappa=maps.kappa)
        np.savez(d / f"{inst.id}_iter{self.iteration}.npz", **arrays)
        raise TrainingDiverged(f"{reason}; dump written to {d}")

    def instance_gradient(self, inst: Instance):
        """Loss report and parameter gradient (already scaled by ``C``)."""
        cfg = self.cfg
        params = self.instance_params(inst.id, create=True)
        maps, cache = self.predictor.forward_with_cache(params, inst.patch)
        gt = gt_contour(inst, cfg.L)
        init = initial_contour(inst, cfg.L)
        if not (_finite(maps.D) and _finite(maps.alpha) and _finite(maps.beta) and _finite(maps.kappa)):
            self._dump(inst, maps, {"gt": gt, "init": init}, "non-finite energy maps")
        gt_mask = inst.gt_mask()
        y_hat = run_loss_augmented(maps, init, gt_mask, cfg.c_delta, self.inf_cfg)
        scale = margin_scale(cfg.margin, gt_mask, y_hat, cfg.c_delta)
        report = hinge_loss(maps, gt, y_hat, gt_mask, scale)
        grads = loss_subgradients(maps, gt, y_hat, report)
        pgrads = None
        if report.margin_violated:
            pgrads = self.predictor.backward(params, inst.patch, grads.scaled(cfg.C), cache)
            if not all(_finite(g) for g in pgrads.values()):
                self._dump(inst, maps, {"gt": gt, "init": init, "y_hat": y_hat},
                           "non-finite parameter gradients")
        return report, pgrads

    def step(self, batch: list[Instance], epoch: int = 0) -> list[StepRecord]:
        total: dict[str, np.ndarray] = {}
        records = []
        for inst in batch:
            report, pgrads = self.instance_gradient(inst)
            if pgrads is not None:
                for k, g in self._qualify(inst.id, pgrads).items():
                    g = g / len(batch)
                    total[k] = total[k] + g if k in total else g
            records.append(StepRecord(self.iteration, epoch, inst.id, report.hinge,
                                      report.task_loss, report.energy_gap, self.optimizer.lr))
        if total or self.cfg.weight_decay:
            # parameters without a gradient still feel weight decay
            grads = {k: total.get(k, np.zeros_like(v)) for k, v in self.params.items()
                     if k in total or not self.is_direct}
            self.params = {**self.params, **self.optimizer.step(
                {k: self.params[k] for k in grads}, grads)}
        self.iteration += 1
        self.history.extend(records)
        return records

    def fit(self, instances: list[Instance], epochs: int | None = None, log_file=None,
            checkpoint: bool = True, callback=None) -> list[StepRecord]:
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        fh = open(log_file, "a") if log_file else None
        try:
            for epoch in range(epochs):
                self.optimizer.lr = cfg.lr * cfg.lr_decay ** epoch
                rng = np.random.default_rng([cfg.seed, epoch])
                order = rng.permutation(len(instances))
                for start in range(0, len(order), cfg.batch_size):
                    batch = [instances[j] for j in order[start:start + cfg.batch_size]]
                    if cfg.augment and not self.is_direct:
                        batch = [augment(b, int(rng.integers(4)), bool(rng.integers(2))) for b in batch]
                    for rec in self.step(batch, epoch):
                        if fh:
                            fh.write(rec.to_json() + "\n")
                if fh:
                    fh.flush()
                epoch_hinge = np.mean([r.hinge for r in self.history if r.epoch == epoch])
                log.info("epoch %d  mean hinge %.4f", epoch, epoch_hinge)
                if checkpoint and self.out_dir is not None:
                    self.save(self.out_dir / "model.bin")
                if callback is not None:
                    callback(self, epoch)
        finally:
            if fh:
                fh.close()
        return self.history

    # -- inference ----------------------------------------------------------
    def predict(self, instances: list[Instance], record_trajectory: bool = False):
        return predict(self.predictor, self.params, instances, self.cfg, record_trajectory)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dtype = "<f8" if self.is_direct else np.dtype(self.cfg.dtype).newbyteorder("<").str
        save_params(path, self.params, self.predictor.architecture(), self.cfg.seed,
                    dtype=dtype, extra={"config": self.cfg.to_dict()})


def predict(predictor, params: dict, instances: list[Instance], cfg: RunConfig,
            record_trajectory: bool = False) -> list[tuple[np.ndarray, Trajectory | None]]:
    inf_cfg = inference_config(cfg, record_trajectory)
    out = []
    for inst in instances:
        if isinstance(predictor, DirectGrid):
            key = f"{inst.id}/raw"
            if key not in params:
                raise KeyError(f"DirectGrid has no maps for instance {inst.id!r}")
            p = {"raw": params[key]}
        else:
            p = params
        maps = predictor.forward(p, inst.patch)
        out.append(run_inference(maps, initial_contour(inst, cfg.L), inf_cfg))
    return out


def load_model(path, expected_shape: tuple[int, int, int] | None = None):
    """Return ``(predictor, params, config)`` from a model file.

    ``expected_shape`` is ``(U, V, d)`` of the data the model will see.
    """
    params, header = load_params(path)
    arch = header["architecture"]
    if expected_shape is not None:
        U, V, d = expected_shape
        if (arch.get("U"), arch.get("V")) != (U, V) or header.get("d") not in (None, d):
            from .predictor import ModelFormatError
            raise ModelFormatError(
                f"model expects {arch.get('U')}x{arch.get('V')}x{header.get('d')} patches, "
                f"data has {U}x{V}x{d}")
    predictor = predictor_from_architecture(arch)
    if isinstance(predictor, ConvNet):
        predictor.check_params(params)
    cfg = RunConfig.from_dict(header["extra"]["config"]) if "config" in header.get("extra", {}) else RunConfig()
    return predictor, params, cfg


def mean_iou(preds, instances) -> float:
    return float(np.mean([iou_masks(rasterize(p, i.U, i.V), i.gt_mask())
                          for p, i in zip(preds, instances)]))
