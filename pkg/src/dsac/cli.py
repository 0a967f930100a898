"""Command-line driver: ``dsac {synth,ingest,train,infer,eval,render,ablate}``.

Every ``RunConfig`` field is a flag; ``--config run.json`` supplies defaults
that explicit flags override.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from .config import RunConfig, output_path
from .dataset import (IngestError, SynthConfig, generate_synthetic, ingest, read_dataset,
                      split, synth_config_dict, write_dataset)
from .energy import load_maps, save_maps
from .geometry import read_polygons, write_polygons
from .inference import run_inference
from .metrics import evaluate
from .predictor import DirectGrid, ModelFormatError
from .render import write_svg
from .train import Trainer, TrainingDiverged, inference_config, initial_contour, load_model

log = logging.getLogger("dsac")

ABLATIONS = {
    "full": {},
    "no_kappa": {"no_kappa": True},
    "scalar_kappa_beta": {"kappa_local": False, "beta_local": False},
    "local_alpha": {"alpha_local": True},
}


# -- argument plumbing ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON run config; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        value = f.default if f.default_factory is MISSING else f.default_factory()
        if isinstance(value, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(value, list):
            g.add_argument(flag, dest=f.name, nargs="+", type=type(value[0]), default=None)
        else:
            g.add_argument(flag, dest=f.name, type=type(value), default=None,
                           help=f"default {value}")


def run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    if getattr(args, "shape", None) == "l-shape":
        overrides["shape"] = "lshape"
    return cfg.updated(**overrides)


def _dataset_shape(instances) -> tuple[int, int, int]:
    p = instances[0].patch
    return p.shape[1], p.shape[0], p.shape[2]


def _load_split(data: Path, name: str):
    instances = read_dataset(data, name)
    if not instances:
        raise SystemExit(f"split {name!r} of {data} is empty")
    return instances


# -- verbs ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = run_config(args)
    out = output_path(args.out)
    scfg = SynthConfig(n=cfg.n_train + cfg.n_test, size=cfg.size, shape=cfg.shape,
                       noise_sigma=cfg.noise_sigma, texture=cfg.texture, seed=cfg.data_seed,
                       jitter=cfg.jitter, L=cfg.L, radius_fraction=cfg.radius_fraction,
                       distractors=cfg.distractors)
    instances = generate_synthetic(scfg)
    splits = {"train": instances[:cfg.n_train], "test": instances[cfg.n_train:]}
    try:
        write_dataset(out, splits, synth_config_dict(scfg), force=args.force)
    except FileExistsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {cfg.n_train} train + {cfg.n_test} test instances to {out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = run_config(args)
    out = output_path(args.out)
    try:
        instances = ingest(args.images, args.gt, args.init, U=args.patch_size, margin=args.crop_margin)
    except IngestError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    fractions = tuple(args.fractions)
    parts = split(instances, fractions, cfg.data_seed)
    names = args.split_names[:len(parts)]
    try:
        write_dataset(out, dict(zip(names, parts)),
                      {"source": "ingest", "U": args.patch_size, "margin": args.crop_margin,
                       "fractions": list(fractions), "seed": cfg.data_seed}, force=args.force)
    except FileExistsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(", ".join(f"{n}: {len(p)}" for n, p in zip(names, parts)))
    return 0


def _epoch_eval(trainer: Trainer, instances, path: Path):
    def callback(tr, epoch):
        preds = [c for c, _ in tr.predict(instances)]
        rep = evaluate(preds, instances)
        hinge = float(np.mean([r.hinge for r in tr.history if r.epoch == epoch]))
        rec = {"epoch": epoch, "mean_hinge": hinge, "train_iou": rep.mean_iou}
        with open(path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        log.info("epoch %d  hinge %.4f  train IoU %.4f", epoch, hinge, rep.mean_iou)
    return callback


def train_run(cfg: RunConfig, data: Path, out: Path, epoch_eval: bool = True) -> Trainer:
    instances = _load_split(data, "train")
    U, V, d = _dataset_shape(instances)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    for name in ("train_log.jsonl", "epochs.jsonl"):
        (out / name).unlink(missing_ok=True)
    trainer = Trainer(cfg, U, V, d, out_dir=out)
    cb = _epoch_eval(trainer, instances, out / "epochs.jsonl") if epoch_eval else None
    trainer.fit(instances, log_file=out / "train_log.jsonl", callback=cb)
    trainer.save(out / "model.bin")
    return trainer


def cmd_train(args) -> int:
    cfg = run_config(args)
    out = output_path(args.out)
    t0 = time.time()
    try:
        train_run(cfg, args.data, out, epoch_eval=not args.no_epoch_eval)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"trained {cfg.predictor} for {cfg.epochs} epochs in {time.time() - t0:.1f}s; "
          f"model at {out / 'model.bin'}")
    return 0


def infer_run(model: Path, instances, cfg_override: dict | None = None,
              dump_trajectory: Path | None = None, dump_maps: Path | None = None):
    predictor, params, cfg = load_model(model, _dataset_shape(instances))
    if cfg_override:
        cfg = cfg.updated(**cfg_override)
    inf_cfg = inference_config(cfg, record_trajectory=dump_trajectory is not None)
    preds = []
    for inst in instances:
        p = {"raw": params[f"{inst.id}/raw"]} if isinstance(predictor, DirectGrid) else params
        maps = predictor.forward(p, inst.patch)
        c, traj = run_inference(maps, initial_contour(inst, cfg.L), inf_cfg)
        preds.append(c)
        if dump_trajectory is not None:
            dump_trajectory.mkdir(parents=True, exist_ok=True)
            (dump_trajectory / f"{inst.id}.json").write_text(json.dumps(traj.to_json()))
        if dump_maps is not None:
            save_maps(maps, dump_maps / inst.id)
    return preds


def cmd_infer(args) -> int:
    instances = _load_split(args.data, args.split)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traj_dir = output_path(args.dump_trajectory) if args.dump_trajectory else None
    maps_dir = output_path(args.dump_maps) if args.dump_maps else None
    t0 = time.time()
    if args.maps is not None:
        # debug path: inference from stored energy maps instead of a model
        cfg = run_config(args)
        inf_cfg = inference_config(cfg, record_trajectory=traj_dir is not None)
        preds = []
        for inst in instances:
            c, traj = run_inference(load_maps(Path(args.maps) / inst.id),
                                    initial_contour(inst, cfg.L), inf_cfg)
            preds.append(c)
            if traj_dir is not None:
                traj_dir.mkdir(parents=True, exist_ok=True)
                (traj_dir / f"{inst.id}.json").write_text(json.dumps(traj.to_json()))
    else:
        if args.model is None:
            print("error: pass --model or --maps", file=sys.stderr)
            return 2
        try:
            preds = infer_run(args.model, instances, dump_trajectory=traj_dir, dump_maps=maps_dir)
        except (ModelFormatError, KeyError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
    write_polygons(out, [(i.id, c) for i, c in zip(instances, preds)])
    dt = time.time() - t0
    print(f"{len(preds)} predictions in {dt:.2f}s ({len(preds) / max(dt, 1e-9):.1f}/s) -> {out}")
    return 0


def _matched(preds_path, instances):
    preds = read_polygons(preds_path)
    ids = [i.id for i in instances]
    missing = [i for i in ids if i not in preds]
    extra = sorted(set(preds) - set(ids))
    if missing or extra:
        raise ValueError(f"prediction ids do not match the dataset split "
                         f"(missing {missing[:5]}, unexpected {extra[:5]})")
    return [preds[i] for i in ids]


def cmd_eval(args) -> int:
    instances = _load_split(args.data, args.split)
    try:
        preds = _matched(args.preds, instances)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    report = evaluate(preds, instances)
    print(report.table())
    if args.out:
        out = output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json(indent=2))
    return 0


def cmd_render(args) -> int:
    instances = _load_split(args.data, args.split)
    preds = read_polygons(args.preds) if args.preds else {}
    out = output_path(args.out)
    n = 0
    for inst in instances[:args.limit] if args.limit else instances:
        write_svg(out / f"{inst.id}.svg", inst.patch, gt=inst.gt, init=inst.init,
                  pred=preds.get(inst.id), scale=args.scale)
        n += 1
    print(f"wrote {n} SVG files to {out}")
    return 0


def ablation_run(cfg: RunConfig, data: Path, out: Path, variants=None) -> dict:
    test = _load_split(data, "test")
    results = {}
    for name in variants or ABLATIONS:
        vcfg = cfg.updated(**ABLATIONS[name])
        vdir = out / name
        train_run(vcfg, data, vdir, epoch_eval=False)
        preds = infer_run(vdir / "model.bin", test)
        write_polygons(vdir / "predictions.jsonl", [(i.id, c) for i, c in zip(test, preds)])
        report = evaluate(preds, test)
        (vdir / "eval.json").write_text(report.to_json(indent=2))
        results[name] = {"mean_iou": report.mean_iou, "area_rmse": report.area_rmse,
                         "weighted_coverage": report.weighted_coverage}
        log.info("%s: mean IoU %.4f", name, report.mean_iou)
    (out / "ablation.json").write_text(json.dumps(results, indent=2))
    return results


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = ablation_run(cfg, args.data, out, args.variants)
    print(f"{'variant':<20} {'mIoU':>7} {'RMSE':>9} {'WCov':>7}")
    for name, r in results.items():
        print(f"{name:<20} {r['mean_iou']:7.4f} {r['area_rmse']:9.2f} {r['weighted_coverage']:7.4f}")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="crop patches around initial polygons of real images")
    p.add_argument("--images", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--init", required=True, type=Path)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--crop-margin", type=float, default=1.5,
                   help="crop side as a multiple of the init bounding box")
    p.add_argument("--fractions", type=float, nargs="+", default=[0.5, 0.5])
    p.add_argument("--split-names", nargs="+", default=["train", "test", "val"])
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="structured training on the train split")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True)
    p.add_argument("--no-epoch-eval", action="store_true",
                   help="skip the per-epoch training-set IoU evaluation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict contours for a dataset split")
    p.add_argument("--model", type=Path)
    p.add_argument("--maps", type=Path, help="directory of stored maps, one subdirectory per id")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-trajectory", help="directory for per-instance trajectory JSON")
    p.add_argument("--dump-maps", help="directory for per-instance energy maps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--preds", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="SVG overlays of gt, init and prediction")
    p.add_argument("--preds", type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--scale", type=float, default=4.0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+", choices=list(ABLATIONS))
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
