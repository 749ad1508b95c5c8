"""Self-contained checkpoints: JSON manifest + raw little-endian f32 blob.

A checkpoint is a directory with two files: `manifest` (UTF-8 JSON holding
the model config, normalization statistics, free metadata, and a key /
shape / dtype / offset table) and `weights.f32` (all parameters concatenated
as little-endian float32 in manifest order). Loading needs nothing but the
directory: config and stats travel with the weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptDataError
from .geom import NormalizationStats
from .model import AnchorTransformer, ModelConfig, build_model

MANIFEST_NAME = "manifest"
WEIGHTS_NAME = "weights.f32"
CHECKPOINT_FORMAT = "anchorcfd-checkpoint"
CHECKPOINT_VERSION = 1


def stats_to_dict(stats: NormalizationStats) -> dict:
    return {
        "bbox_min": stats.bbox_min.tolist(),
        "bbox_max": stats.bbox_max.tolist(),
        "surface_mean": stats.surface_mean.tolist(),
        "surface_std": stats.surface_std.tolist(),
        "volume_mean": stats.volume_mean.tolist(),
        "volume_std": stats.volume_std.tolist(),
        "vorticity_transform": stats.vorticity_transform,
        "vorticity_sigma": stats.vorticity_sigma,
    }


def stats_from_dict(d: dict) -> NormalizationStats:
    return NormalizationStats(
        bbox_min=np.asarray(d["bbox_min"]),
        bbox_max=np.asarray(d["bbox_max"]),
        surface_mean=np.asarray(d["surface_mean"]),
        surface_std=np.asarray(d["surface_std"]),
        volume_mean=np.asarray(d["volume_mean"]),
        volume_std=np.asarray(d["volume_std"]),
        vorticity_transform=d["vorticity_transform"],
        vorticity_sigma=float(d["vorticity_sigma"]),
    )


@dataclass
class CheckpointBundle:
    config: ModelConfig
    stats: NormalizationStats
    state: dict[str, torch.Tensor]
    meta: dict


def save_checkpoint(
    path: Path,
    model: AnchorTransformer | dict[str, torch.Tensor],
    stats: NormalizationStats,
    config: ModelConfig | None = None,
    meta: dict | None = None,
) -> Path:
    """Write a checkpoint directory. Accepts a model or a raw state dict."""
    if isinstance(model, AnchorTransformer):
        state = model.state_dict()
        config = model.config
    else:
        state = dict(model)
        if config is None:
            raise ValueError("saving a bare state dict requires the model config")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for key in sorted(state):
        arr = state[key].detach().cpu().to(torch.float32).numpy()
        data = np.ascontiguousarray(arr, dtype="<f4")
        table.append(
            {
                "key": key,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": offset,
            }
        )
        chunks.append(data.tobytes())
        offset += len(chunks[-1])
    (path / WEIGHTS_NAME).write_bytes(b"".join(chunks))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(config),
        "normalization": stats_to_dict(stats),
        "meta": meta or {},
        "weights_file": WEIGHTS_NAME,
        "arrays": table,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def load_checkpoint(path: Path) -> CheckpointBundle:
    """Read a checkpoint directory back into config, stats, state, meta."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CorruptDataError(f"no checkpoint manifest at {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptDataError(f"checkpoint manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptDataError(f"unknown checkpoint format {manifest.get('format')!r}")
    try:
        raw = (path / manifest.get("weights_file", WEIGHTS_NAME)).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptDataError(f"checkpoint blob missing in {path}") from exc
    state: dict[str, torch.Tensor] = {}
    for entry in manifest["arrays"]:
        shape = tuple(int(x) for x in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        if len(raw) < offset + count * 4:
            raise CorruptDataError(
                f"checkpoint blob truncated at key {entry['key']!r}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        if not np.isfinite(arr).all():
            raise CorruptDataError(f"non-finite weights at key {entry['key']!r}")
        state[entry["key"]] = torch.from_numpy(arr.copy())
    return CheckpointBundle(
        config=ModelConfig(**manifest["model_config"]),
        stats=stats_from_dict(manifest["normalization"]),
        state=state,
        meta=manifest.get("meta", {}),
    )


def load_model(path: Path) -> tuple[AnchorTransformer, NormalizationStats, dict]:
    """Rebuild a ready-to-run model from a checkpoint directory."""
    bundle = load_checkpoint(path)
    model = build_model(bundle.config)
    model.load_state_dict(bundle.state)
    model.eval()
    return model, bundle.stats, bundle.meta
