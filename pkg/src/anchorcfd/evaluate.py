"""Evaluation: error metrics, full-mesh chunked inference, scaling benches.

Evaluation always decodes *every* mesh point as a query against a fixed
anchor context, so the protocol is one code path regardless of how many
points the meshes have. Metrics are computed in physics units after
unnormalization. `repeats` reseeds the anchor/supernode draw and averages
the metrics, which separates anchor-sampling noise from model error.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import MemoryMeter, chunk_spans, sdp_attention
from .data import (
    SimulationSample,
    SourceCounts,
    prepare_inference_batch,
    unnormalize_surface,
    unnormalize_volume,
)
from .geom import NormalizationStats, scale_coordinates
from .model import (
    AnchorTransformer,
    chunked_decode,
    precision_context,
    predicted_vorticity,
)
from .physics import divergence_of_predicted_vorticity

SURFACE_FIELDS = ("surface_pressure", "wall_shear")
VOLUME_FIELDS = ("volume_pressure", "velocity", "vorticity")
ALL_FIELDS = SURFACE_FIELDS + VOLUME_FIELDS


def relative_l2(pred: np.ndarray, target: np.ndarray) -> float:
    """||pred - target||_2 / ||target||_2 over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    denom = np.linalg.norm(target.ravel())
    if denom == 0.0:
        raise ValueError("target has zero norm; relative error undefined")
    return float(np.linalg.norm((pred - target).ravel()) / denom)


def relative_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """sum |pred - target| / sum |target| over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    denom = np.abs(target).sum()
    if denom == 0.0:
        raise ValueError("target has zero L1 mass; relative error undefined")
    return float(np.abs(pred - target).sum() / denom)


def r_squared(pred: np.ndarray, target: np.ndarray) -> float:
    """1 - SSE / SST, pooled over all elements."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    sst = ((target - target.mean()) ** 2).sum()
    if sst == 0.0:
        raise ValueError("target has zero variance; R^2 undefined")
    return float(1.0 - ((pred - target) ** 2).sum() / sst)


@dataclass
class FieldMetrics:
    name: str
    rel_l2: float
    rel_l1: float
    r2: float


@dataclass
class MetricReport:
    sample_id: str
    mode: str
    head: str
    repeats: int
    fields: list[FieldMetrics]
    runtime_s: float
    peak_bytes: int
    divergence_mean_abs: float | None = None
    extras: dict = field(default_factory=dict)

    def metric(self, name: str) -> FieldMetrics:
        for fm in self.fields:
            if fm.name == name:
                return fm
        raise KeyError(name)

    def rows(self) -> list[list]:
        return [
            [
                self.sample_id,
                self.mode,
                self.head,
                self.repeats,
                fm.name,
                f"{fm.rel_l2:.8e}",
                f"{fm.rel_l1:.8e}",
                f"{fm.r2:.8f}",
                f"{self.runtime_s:.4f}",
                self.peak_bytes,
                "" if self.divergence_mean_abs is None else f"{self.divergence_mean_abs:.3e}",
            ]
            for fm in self.fields
        ]

    def summary(self) -> str:
        lines = [f"sample {self.sample_id} mode={self.mode} head={self.head} repeats={self.repeats}"]
        for fm in self.fields:
            lines.append(
                f"  {fm.name:17s} rel_l2={fm.rel_l2:.4e} rel_l1={fm.rel_l1:.4e} r2={fm.r2:.5f}"
            )
        if self.divergence_mean_abs is not None:
            lines.append(f"  mean |div vorticity| = {self.divergence_mean_abs:.3e}")
        lines.append(f"  runtime {self.runtime_s:.2f} s, peak working set {self.peak_bytes} bytes")
        return "\n".join(lines)


REPORT_HEADER = [
    "sample_id",
    "mode",
    "head",
    "repeats",
    "field",
    "rel_l2",
    "rel_l1",
    "r2",
    "runtime_s",
    "peak_bytes",
    "div_mean_abs",
]


def write_reports(path: Path, reports: list[MetricReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerows(report.rows())
    return path


def network_positions(
    positions: np.ndarray, stats: NormalizationStats
) -> torch.Tensor:
    return torch.from_numpy(scale_coordinates(positions, stats))


def source_counts_for(model: AnchorTransformer) -> SourceCounts:
    """Inference-time draw sizes implied by the model's own configuration."""
    cfg = model.config
    return SourceCounts(
        supernodes=cfg.supernode_count,
        surface_anchors=cfg.anchors_surface,
        volume_anchors=cfg.anchors_volume,
    )


def velocity_field(
    model: AnchorTransformer,
    context,
    stats: NormalizationStats,
    cache=None,
    chunk_size: int = 2048,
):
    """Callable mapping network-coordinate points to physics velocity."""

    def fn(pos_net: torch.Tensor) -> torch.Tensor:
        out = chunked_decode(model, context, "volume", pos_net, chunk_size, cache=cache)
        phys = unnormalize_volume(out.detach().cpu().numpy(), stats)[:, 1:4]
        return torch.from_numpy(phys)

    return fn


def vorticity_field(
    model: AnchorTransformer,
    context,
    stats: NormalizationStats,
    delta: float | None = None,
    cache=None,
    chunk_size: int = 2048,
    dtype: torch.dtype | None = None,
):
    """Callable mapping network-coordinate points to curl-derived vorticity.

    `dtype` optionally casts positions before decoding (float64 turns the
    whole decode/differencing pipeline into double precision for roundoff
    studies; weights are upcast lazily per call).
    """
    work_model, work_context, work_cache = model, context, cache
    if dtype is torch.float64:
        work_model = _double_model(model)
        work_context = _double_context(context)
        work_cache = None  # cache tensors are float32; rebuild lazily in f64

    def fn(pos_net: torch.Tensor) -> torch.Tensor:
        if dtype is not None:
            pos_net = pos_net.to(dtype)
        outs = []
        for start, end in chunk_spans(pos_net.shape[0], chunk_size):
            outs.append(
                predicted_vorticity(
                    work_model, work_context, stats, pos_net[start:end],
                    delta=delta, cache=work_cache,
                )
            )
        return torch.cat(outs, dim=0)

    return fn


def _double_model(model: AnchorTransformer) -> AnchorTransformer:
    import copy

    clone = copy.deepcopy(model)
    clone.double()
    clone.eval()
    return clone


def _double_context(context):
    from .model import TrunkContext

    def cast(pairs):
        return [(t.double(), p) for t, p in pairs]

    return TrunkContext(
        surface=cast(context.surface),
        volume=cast(context.volume),
        surface_anchor_pred=context.surface_anchor_pred.double(),
        volume_anchor_pred=context.volume_anchor_pred.double(),
    )


def evaluate_sample(
    model: AnchorTransformer,
    stats: NormalizationStats,
    sample: SimulationSample,
    mode: str = "cfd-mesh",
    counts: SourceCounts | None = None,
    chunk_size: int = 2048,
    repeats: int = 10,
    seed: int = 0,
    head: str = "direct",
    fd_delta: float | None = None,
    precision: str = "f32",
    divergence_points: int = 0,
) -> MetricReport:
    """Decode every mesh point and score against the simulation fields.

    Each repeat redraws supernodes and anchors with a derived seed and runs
    the full chunked decode; reported metrics are means over repeats.
    """
    if repeats <= 0:
        raise ValueError("repeats must be positive")
    if head not in ("direct", "divfree"):
        raise ValueError(f"unknown head {head!r}")
    if counts is None:
        counts = source_counts_for(model)
    model.eval()
    meter = MemoryMeter()
    surf_pos_net = network_positions(sample.surface.positions, stats)
    vol_pos_net = network_positions(sample.volume.positions, stats)
    surf_target = np.column_stack(
        [sample.surface.pressure[:, None], sample.surface.shear]
    )
    metric_sums = {name: np.zeros(3) for name in ALL_FIELDS}
    div_sum = 0.0
    t0 = time.perf_counter()
    for rep in range(repeats):
        rep_seed = int(
            np.random.SeedSequence(entropy=(int(seed), 0xE7A1, rep)).generate_state(1)[0]
        )
        batch, _, _ = prepare_inference_batch(
            sample, stats, mode, counts, model.config.supernode_radius, rep_seed
        )
        with torch.no_grad(), precision_context(precision):
            context = model.encode_context(batch)
            surf_cache = model.build_kv_cache(context, "surface", meter=meter)
            vol_cache = model.build_kv_cache(context, "volume", meter=meter)
            surf_pred_n = chunked_decode(
                model, context, "surface", surf_pos_net, chunk_size, meter, surf_cache
            )
            vol_pred_n = chunked_decode(
                model, context, "volume", vol_pos_net, chunk_size, meter, vol_cache
            )
        surf_pred = unnormalize_surface(surf_pred_n.float().numpy(), stats)
        vol_pred = unnormalize_volume(vol_pred_n.float().numpy(), stats)
        if head == "divfree":
            with torch.no_grad(), precision_context(precision):
                omega = []
                for start, end in chunk_spans(vol_pos_net.shape[0], chunk_size):
                    omega.append(
                        predicted_vorticity(
                            model, context, stats, vol_pos_net[start:end],
                            delta=fd_delta, cache=vol_cache, meter=meter,
                        )
                    )
                vol_pred[:, 4:7] = torch.cat(omega).float().numpy()
            if divergence_points > 0:
                probe = vol_pos_net[:divergence_points]
                f = vorticity_field(
                    model, context, stats, delta=fd_delta, cache=vol_cache,
                    chunk_size=chunk_size,
                )
                delta_used = fd_delta if fd_delta is not None else model.config.fd_delta
                with torch.no_grad():
                    div = divergence_of_predicted_vorticity(
                        f, probe, delta_used, axis_scale=stats.coord_scale
                    )
                div_sum += float(div.abs().mean())
        pairs = {
            "surface_pressure": (surf_pred[:, 0], surf_target[:, 0]),
            "wall_shear": (surf_pred[:, 1:4], surf_target[:, 1:4]),
            "volume_pressure": (vol_pred[:, 0], sample.volume.pressure),
            "velocity": (vol_pred[:, 1:4], sample.volume.velocity),
            "vorticity": (vol_pred[:, 4:7], sample.volume.vorticity),
        }
        for name, (p, t) in pairs.items():
            metric_sums[name] += np.array(
                [relative_l2(p, t), relative_l1(p, t), r_squared(p, t)]
            )
    runtime = time.perf_counter() - t0
    fields = [
        FieldMetrics(name, *(metric_sums[name] / repeats)) for name in ALL_FIELDS
    ]
    return MetricReport(
        sample_id=sample.sample_id,
        mode=mode,
        head=head,
        repeats=repeats,
        fields=fields,
        runtime_s=runtime,
        peak_bytes=meter.peak_bytes,
        divergence_mean_abs=(div_sum / repeats) if (head == "divfree" and divergence_points) else None,
    )


def evaluate_split(
    model,
    stats,
    samples: list[SimulationSample],
    **kwargs,
) -> list[MetricReport]:
    return [evaluate_sample(model, stats, s, **kwargs) for s in samples]


# ---------------------------------------------------------------------------
# scaling benchmarks


@dataclass
class BenchPoint:
    mode: str
    n: int
    seconds: float
    peak_bytes: int


BENCH_MODES = ("full", "anchor", "chunked")


def _bench_tensors(n: int, m: int, dim: int, seed: int):
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(n, dim, generator=gen)
    k = torch.randn(m, dim, generator=gen)
    v = torch.randn(m, dim, generator=gen)
    return q, k, v


def _timed_attention(q, k, v, num_heads, row_chunk, meter) -> float:
    """Exact softmax attention with bounded row blocks; returns seconds."""
    t0 = time.perf_counter()
    outs = []
    for start, end in chunk_spans(q.shape[0], row_chunk):
        out = sdp_attention(q[start:end], k, v, num_heads=num_heads, meter=meter)
        outs.append(out)
    torch.cat(outs, dim=0)
    return time.perf_counter() - t0


def bench_scaling(
    sizes: list[int] | None = None,
    dim: int = 192,
    num_heads: int = 3,
    anchors: int = 1024,
    chunk_size: int = 1024,
    repeats: int = 3,
    seed: int = 0,
    modes: tuple[str, ...] = BENCH_MODES,
) -> tuple[list[BenchPoint], dict[str, float]]:
    """Time attention cost against token count for three decode strategies.

    full: self-attention over n tokens (row-blocked exact softmax, so memory
    stays bounded while FLOPs stay quadratic). anchor: n queries against a
    fixed anchor set. chunked: same cross-attention through fixed-size query
    chunks with the anchor K/V held as a persistent cache; its peak working
    set should not grow with n. Times are minima over `repeats`; the
    returned exponents are log-log least-squares slopes of seconds vs n.
    """
    sizes = sizes or [1024, 2048, 4096, 8192]
    if len(sizes) < 2:
        raise ValueError("need at least two sizes to fit an exponent")
    for mode in modes:
        if mode not in BENCH_MODES:
            raise ValueError(f"unknown bench mode {mode!r}")
    points: list[BenchPoint] = []
    for mode in modes:
        for n in sizes:
            m = n if mode == "full" else anchors
            q, k, v = _bench_tensors(n, m, dim, seed)
            best = float("inf")
            meter = MemoryMeter()
            if mode == "chunked":
                meter.add_persistent(k, v)
            row_chunk = chunk_size if mode == "chunked" else max(chunk_size, 1)
            for _ in range(repeats):
                best = min(best, _timed_attention(q, k, v, num_heads, row_chunk, meter))
            points.append(BenchPoint(mode, n, best, meter.peak_bytes))
    exponents = {
        mode: fit_scaling_exponent(
            [p.n for p in points if p.mode == mode],
            [p.seconds for p in points if p.mode == mode],
        )
        for mode in modes
    }
    return points, exponents


def fit_scaling_exponent(ns, ts) -> float:
    """Least-squares slope of log(t) against log(n)."""
    ns = np.asarray(ns, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    if ns.size != ts.size or ns.size < 2:
        raise ValueError("need matching n/t arrays with at least two points")
    if (ts <= 0).any() or (ns <= 0).any():
        raise ValueError("times and sizes must be positive")
    slope, _ = np.polyfit(np.log(ns), np.log(ts), 1)
    return float(slope)


def write_bench(path: Path, points: list[BenchPoint]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "n", "seconds", "peak_bytes"])
        for p in points:
            writer.writerow([p.mode, p.n, f"{p.seconds:.6f}", p.peak_bytes])
    return path
