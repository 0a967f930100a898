"""Run configuration shared by the CLI verbs.

Every field is a command-line flag (``--field-name``); a JSON config file
supplies defaults that flags override.  ``DSAC_OUTPUT_ROOT`` anchors relative
output paths.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

OUTPUT_ROOT_ENV = "DSAC_OUTPUT_ROOT"


@dataclass
class RunConfig:
    # contour and inference
    L: int = 60
    iterations: int = 50
    step_gamma: float = 1.0
    radius_fraction: float = 0.15
    # structured loss and optimizer
    C: float = 1.0
    c_delta: float = 1.0
    margin: str = "iou"           # iou | area, see ssvm.margin_scale
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    lr: float = 1e-4
    lr_decay: float = 1.0         # learning rate multiplier applied after every epoch
    epochs: int = 10
    batch_size: int = 1
    augment: bool = True
    # predictor
    predictor: str = "convnet"
    kernels: list[int] = field(default_factory=lambda: [7, 5, 3])
    channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    hidden: int = 32
    pool: str = "avg"
    include_input: bool = True
    out_bias: list[float] = field(default_factory=lambda: [0.0, -2.0, -2.0, 0.0])
    dtype: str = "float32"
    # ablations
    alpha_local: bool = False
    beta_local: bool = True
    kappa_local: bool = True
    no_kappa: bool = False
    # synthetic data
    n_train: int = 200
    n_test: int = 100
    size: int = 128
    shape: str = "mixed"
    noise_sigma: float = 0.1
    texture: str = "flat"
    distractors: int = 0
    jitter: float = 0.1
    # seeds
    seed: int = 0
    data_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def updated(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)


def output_path(p) -> Path:
    """Resolve a relative output path against ``$DSAC_OUTPUT_ROOT`` if set."""
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p
