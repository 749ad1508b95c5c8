"""Command-line entry points.

Subcommands: generate, train, finetune-divfree, predict, coeffs, eval,
bench. A JSON config file provides dataclass fields by section ("model",
"train", "generate", "eval"); command-line flags override the file. Unknown
config keys are rejected rather than ignored.

Exit codes: 0 success, 1 invalid arguments or config, 2 training diverged,
3 unreadable or corrupt data.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model
from .data import (
    Dataset,
    GeneratorConfig,
    SourceCounts,
    generate_split_samples,
    unnormalize_surface,
    write_dataset,
)
from .errors import CorruptDataError, TrainingDivergedError
from .evaluate import (
    bench_scaling,
    evaluate_sample,
    network_positions,
    source_counts_for,
    write_bench,
    write_reports,
)
from .model import (
    ModelConfig,
    chunked_decode,
    precision_context,
    predicted_vorticity,
)
from .physics import drag_lift_coefficients, surface_force
from .train import TrainConfig, finetune_divfree_run, train_run

DEFAULT_SPLITS = {"train": 4, "val": 1, "test": 1}


def _coerce_dataclass(cls, values: dict, label: str):
    names = {f.name for f in dataclass_fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown {label} config keys: {unknown}")
    coerced = {
        k: tuple(v) if isinstance(v, list) else v for k, v in values.items()
    }
    return cls(**coerced)


def model_config_from_dict(values: dict) -> ModelConfig:
    values = dict(values)
    preset = values.pop("preset", None)
    if preset is None:
        return _coerce_dataclass(ModelConfig, values, "model")
    presets = {
        "drivaerml": ModelConfig.drivaerml,
        "ahmedml": ModelConfig.ahmedml,
        "desk": ModelConfig.desk,
    }
    if preset not in presets:
        raise ValueError(f"unknown model preset {preset!r}; have {sorted(presets)}")
    config = presets[preset]()
    names = {f.name for f in dataclass_fields(ModelConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown model config keys: {unknown}")
    return replace(config, **values) if values else config


def train_config_from_dict(values: dict) -> TrainConfig:
    values = dict(values)
    counts = values.pop("counts", None)
    cfg = _coerce_dataclass(TrainConfig, values, "train")
    if counts is not None:
        cfg = replace(cfg, counts=_coerce_dataclass(SourceCounts, counts, "counts"))
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ValueError(f"config file not found: {path}") from exc
    try:
        config = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ValueError("config file must hold a JSON object")
    known = {"model", "train", "generate", "eval"}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ValueError(f"unknown config sections: {unknown}; have {sorted(known)}")
    return config


def _apply_common_overrides(cfg: TrainConfig, args) -> TrainConfig:
    updates = {}
    for name in ("seed", "mode", "head", "epochs", "max_steps", "loss_mode"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    return replace(cfg, **updates) if updates else cfg


def cmd_generate(args) -> int:
    config = load_config(args.config)
    gen_section = dict(config.get("generate", {}))
    splits = gen_section.pop("splits", None) or dict(DEFAULT_SPLITS)
    gen_cfg = _coerce_dataclass(GeneratorConfig, gen_section, "generate")
    splits = {k: int(v) for k, v in splits.items()}
    if any(v < 0 for v in splits.values()):
        raise ValueError("split sizes must be non-negative")
    samples, membership = generate_split_samples(gen_cfg, splits, args.seed)
    root = write_dataset(Path(args.out), samples, membership, gen_cfg.constants)
    total = sum(splits.values())
    print(f"wrote {total} samples to {root} (splits: {splits})")
    return 0


def cmd_train(args) -> int:
    if args.precision == "f16-mixed":
        raise ValueError("f16-mixed is inference-only; train in f32")
    config = load_config(args.config)
    model_cfg = model_config_from_dict(config.get("model", {"preset": "desk"}))
    train_cfg = _apply_common_overrides(
        train_config_from_dict(config.get("train", {})), args
    )
    dataset = Dataset(Path(args.data))
    result = train_run(dataset, model_cfg, train_cfg, Path(args.out))
    print(
        f"trained {result.steps} steps, final loss {result.final_loss:.6f}; "
        f"checkpoints at {result.checkpoint_path} and {result.ema_checkpoint_path}"
    )
    return 0


def cmd_finetune(args) -> int:
    if args.precision == "f16-mixed":
        raise ValueError("f16-mixed is inference-only; train in f32")
    config = load_config(args.config)
    train_cfg = _apply_common_overrides(
        train_config_from_dict(config.get("train", {})), args
    )
    dataset = Dataset(Path(args.data))
    result = finetune_divfree_run(
        dataset, Path(args.checkpoint), train_cfg, Path(args.out)
    )
    print(
        f"finetuned {result.steps} steps, final loss {result.final_loss:.6f}; "
        f"checkpoint at {result.checkpoint_path}"
    )
    return 0


def _eval_section(config: dict) -> dict:
    section = dict(config.get("eval", {}))
    counts = section.pop("counts", None)
    allowed = {"repeats", "chunk_size", "divergence_points", "split"}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValueError(f"unknown eval config keys: {unknown}")
    if counts is not None:
        section["counts"] = _coerce_dataclass(SourceCounts, counts, "counts")
    return section


def _load_checkpoint_model(args):
    model, stats, meta = load_model(Path(args.checkpoint))
    head = getattr(args, "head", None) or meta.get("head", "direct")
    mode = getattr(args, "mode", None) or meta.get("mode", "cfd-mesh")
    return model, stats, meta, head, mode


def cmd_predict(args) -> int:
    config = load_config(args.config)
    section = _eval_section(config)
    model, stats, _, head, mode = _load_checkpoint_model(args)
    counts = section.get("counts") or source_counts_for(model)
    dataset = Dataset(Path(args.data))
    sample_id = args.sample or dataset.split_ids(args.split)[0]
    sample = dataset.load(sample_id)

    from .data import prepare_inference_batch, unnormalize_volume

    batch, _, _ = prepare_inference_batch(
        sample, stats, mode, counts, model.config.supernode_radius, args.seed
    )
    surf_pos = network_positions(sample.surface.positions, stats)
    vol_pos = network_positions(sample.volume.positions, stats)
    with torch.no_grad(), precision_context(args.precision):
        context = model.encode_context(batch)
        surf_cache = model.build_kv_cache(context, "surface")
        vol_cache = model.build_kv_cache(context, "volume")
        surf_pred = chunked_decode(
            model, context, "surface", surf_pos, args.chunk_size, cache=surf_cache
        )
        vol_pred = chunked_decode(
            model, context, "volume", vol_pos, args.chunk_size, cache=vol_cache
        )
        surface = unnormalize_surface(surf_pred.float().numpy(), stats)
        volume = unnormalize_volume(vol_pred.float().numpy(), stats)
        if head == "divfree":
            from .attention import chunk_spans

            omega = [
                predicted_vorticity(
                    model, context, stats, vol_pos[s:e], cache=vol_cache
                )
                for s, e in chunk_spans(vol_pos.shape[0], args.chunk_size)
            ]
            volume[:, 4:7] = torch.cat(omega).float().numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        out,
        surface_positions=sample.surface.positions,
        surface_pred=surface,
        volume_positions=sample.volume.positions,
        volume_pred=volume,
    )
    print(f"wrote predictions for {sample_id} to {out}")
    return 0


def cmd_coeffs(args) -> int:
    import csv

    config = load_config(args.config)
    section = _eval_section(config)
    model, stats, _, _, mode = _load_checkpoint_model(args)
    counts = section.get("counts") or source_counts_for(model)
    dataset = Dataset(Path(args.data))
    from .data import prepare_inference_batch

    rows = []
    run_id = Path(args.checkpoint).name
    for sample_id in dataset.split_ids(args.split):
        sample = dataset.load(sample_id)
        batch, _, _ = prepare_inference_batch(
            sample, stats, mode, counts, model.config.supernode_radius, args.seed
        )
        surf_pos = network_positions(sample.surface.positions, stats)
        with torch.no_grad(), precision_context(args.precision):
            context = model.encode_context(batch)
            pred = chunked_decode(
                model, context, "surface", surf_pos, args.chunk_size
            )
        surface = unnormalize_surface(pred.float().numpy(), stats)
        consts = sample.constants
        force_pred = surface_force(
            surface[:, 0], surface[:, 1:4], sample.surface.normal,
            sample.surface.area, p_inf=consts.p_inf,
        )
        force_ref = surface_force(
            sample.surface.pressure, sample.surface.shear, sample.surface.normal,
            sample.surface.area, p_inf=consts.p_inf,
        )
        cd, cl = drag_lift_coefficients(
            force_pred, consts.rho, consts.speed, consts.ref_area,
            np.asarray(consts.flow_dir), np.asarray(consts.lift_dir),
        )
        cd_ref, cl_ref = drag_lift_coefficients(
            force_ref, consts.rho, consts.speed, consts.ref_area,
            np.asarray(consts.flow_dir), np.asarray(consts.lift_dir),
        )
        rows.append([run_id, sample_id, f"{cd:.8f}", f"{cl:.8f}", f"{cd_ref:.8f}", f"{cl_ref:.8f}"])
        print(f"{sample_id}: c_d {cd:+.5f} (ref {cd_ref:+.5f})  c_l {cl:+.5f} (ref {cl_ref:+.5f})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "sample_id", "c_d", "c_l", "c_d_ref", "c_l_ref"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    section = _eval_section(config)
    model, stats, _, head, mode = _load_checkpoint_model(args)
    dataset = Dataset(Path(args.data))
    repeats = args.repeats if args.repeats is not None else section.get("repeats", 10)
    chunk = args.chunk_size if args.chunk_size is not None else section.get("chunk_size", 2048)
    div_points = (
        args.divergence_points
        if args.divergence_points is not None
        else section.get("divergence_points", 0)
    )
    counts = section.get("counts")
    reports = []
    for sample in dataset.load_split(args.split):
        report = evaluate_sample(
            model, stats, sample,
            mode=mode, counts=counts, chunk_size=int(chunk), repeats=int(repeats),
            seed=args.seed, head=head, precision=args.precision,
            divergence_points=int(div_points),
        )
        print(report.summary())
        reports.append(report)
    write_reports(Path(args.out), reports)
    print(f"wrote metric report to {args.out}")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    modes = tuple(args.modes.split(",")) if args.modes else ("full", "anchor", "chunked")
    points, exponents = bench_scaling(
        sizes=sizes,
        dim=args.dim,
        num_heads=args.heads,
        anchors=args.anchors,
        chunk_size=args.chunk_size or 1024,
        repeats=args.repeats or 3,
        seed=args.seed,
        modes=modes,
    )
    for mode in modes:
        print(f"{mode}: time ~ n^{exponents[mode]:.3f}")
    write_bench(Path(args.out), points)
    print(f"wrote bench table to {args.out}")
    return 0


def _add_common(parser, *, precision=True, chunk=False, head=False, mode=False):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help="torch thread count")
    if precision:
        parser.add_argument("--precision", choices=("f32", "f16-mixed"), default="f32")
    if chunk:
        parser.add_argument("--chunk-size", type=int, default=None)
    if head:
        parser.add_argument("--head", choices=("direct", "divfree"), default=None)
    if mode:
        parser.add_argument("--mode", choices=("cfd-mesh", "cad-grid"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorcfd",
        description="Anchored-attention surrogate for steady CFD fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_common(p, precision=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--loss-mode", choices=("anchors", "queries", "both"), default=None)
    _add_common(p, head=True, mode=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-divfree", help="vorticity-from-curl finetune")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    _add_common(p, mode=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="decode full fields for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _add_common(p, chunk=True, head=True, mode=True)
    p.set_defaults(func=cmd_predict, chunk_size=2048)

    p = sub.add_parser("coeffs", help="drag/lift coefficients per sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _add_common(p, chunk=True, mode=True)
    p.set_defaults(func=cmd_coeffs, chunk_size=2048)

    p = sub.add_parser("eval", help="field metrics over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--divergence-points", type=int, default=None)
    _add_common(p, chunk=True, head=True, mode=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="attention scaling benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default=None, help="comma-separated token counts")
    p.add_argument("--modes", default=None, help="subset of full,anchor,chunked")
    p.add_argument("--dim", type=int, default=192)
    p.add_argument("--heads", type=int, default=3)
    p.add_argument("--anchors", type=int, default=1024)
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    _add_common(p, precision=False)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return int(args.func(args) or 0)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorruptDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
