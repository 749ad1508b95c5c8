"""Training loop: masked MSE, LION optimizer, warmup-cosine schedule, EMA.

One optimizer step per sample (batch size 1). Supernodes, anchors, and
queries are resampled with a fresh derived seed every step, which acts as
data augmentation on top of the fixed meshes. The loss is a pooled MSE over
the selected rows (anchors, queries, or both) of both branches; with the
divergence-free head, stage 1 leaves the vorticity channels out and the
finetune stage supervises curl-derived vorticity under a sign-preserving
square-root transform instead.

Runs are bitwise deterministic for a fixed (config, seed) in single-thread
mode: all sampling uses derived numpy seeds and the loop itself draws no
other randomness.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    SimulationSample,
    SourceCounts,
    prepare_training_sample,
)
from .errors import TrainingDivergedError
from .geom import NormalizationStats
from .model import (
    AnchorTransformer,
    ModelConfig,
    ModelOutputs,
    build_model,
    predicted_vorticity,
)
from .transforms import sqrt_signed_torch

LOSS_MODES = ("anchors", "queries", "both")
LOG_FIELDS = ("p_s", "tau", "p_v", "u", "omega")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters (defaults follow the large-run recipe)."""

    epochs: int = 500
    max_steps: int | None = None  # cap on optimizer steps; None = epochs * samples
    batch_size: int = 1  # samples averaged per optimizer step
    peak_lr: float = 5e-5
    end_lr: float = 1e-6
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    clip_norm: float = 1.0
    ema_decay: float = 0.9999
    loss_mode: str = "anchors"  # "anchors" | "queries" | "both"
    mode: str = "cfd-mesh"  # "cfd-mesh" | "cad-grid"
    head: str = "direct"  # "direct" | "divfree"
    counts: SourceCounts = field(default_factory=SourceCounts)
    vorticity_transform: str = "log1p-signed"
    seed: int = 0
    log_every: int = 50
    finetune_lr: float = 2e-5
    finetune_steps_frac: float = 0.2
    fd_delta: float | None = None  # None = model config default

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive when set")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not (self.peak_lr > 0 and self.end_lr > 0 and self.finetune_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.mode not in ("cfd-mesh", "cad-grid"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.head not in ("direct", "divfree"):
            raise ValueError(f"unknown head {self.head!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if not 0.0 < self.finetune_steps_frac <= 1.0:
            raise ValueError("finetune_steps_frac must be in (0, 1]")

    @property
    def effective_loss_mode(self) -> str:
        """cad-grid anchors carry no targets, so that mode trains on queries."""
        return "queries" if self.mode == "cad-grid" else self.loss_mode


def lr_schedule(
    step: int,
    total_steps: int,
    peak_lr: float,
    end_lr: float,
    warmup_frac: float,
) -> float:
    """Linear warmup to `peak_lr`, then cosine decay to `end_lr`.

    The warmup spans round(warmup_frac * total_steps) steps starting from 0;
    the cosine reaches `end_lr` exactly at `total_steps`.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = int(round(warmup_frac * total_steps))
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    t = (step - warmup_steps) / span if span > 0 else 1.0
    return end_lr + (peak_lr - end_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def training_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    row_mask: torch.Tensor | None = None,
    channel_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error over the selected rows and channels."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    if row_mask is not None:
        pred, target = pred[row_mask], target[row_mask]
    if channel_mask is not None:
        pred, target = pred[:, channel_mask], target[:, channel_mask]
    if pred.numel() == 0:
        raise ValueError("loss selection is empty")
    return ((pred - target) ** 2).mean()


def lion_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    momentum: torch.Tensor,
    lr: float,
    weight_decay: float,
    beta1: float,
    beta2: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One LION update (pure): sign of the interpolated momentum plus decay.

        update   = sign(beta1 * m + (1 - beta1) * g) + wd * w
        w_new    = w - lr * update
        m_new    = beta2 * m + (1 - beta2) * g
    """
    update = torch.sign(beta1 * momentum + (1.0 - beta1) * grad) + weight_decay * param
    new_param = param - lr * update
    new_momentum = beta2 * momentum + (1.0 - beta2) * grad
    return new_param, new_momentum


class Lion(torch.optim.Optimizer):
    """Sign-momentum optimizer with decoupled weight decay."""

    def __init__(self, params, lr: float, betas=(0.9, 0.99), weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        defaults = dict(lr=lr, betas=betas, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "momentum" not in state:
                    state["momentum"] = torch.zeros_like(p)
                new_p, new_m = lion_step(
                    p,
                    p.grad,
                    state["momentum"],
                    group["lr"],
                    group["weight_decay"],
                    beta1,
                    beta2,
                )
                p.copy_(new_p)
                state["momentum"] = new_m
        return loss


def clip_gradients(parameters, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


def ema_update(
    ema_state: dict[str, torch.Tensor], model: nn.Module, decay: float
) -> None:
    """In-place exponential moving average of the model parameters."""
    with torch.no_grad():
        for name, p in model.state_dict().items():
            ema_state[name].mul_(decay).add_(p, alpha=1.0 - decay)


def _accumulate(parts, key, pred, target):
    diff = (pred - target).detach()
    parts[key] = parts.get(key, 0.0) + float((diff**2).sum())
    parts[key + "/count"] = parts.get(key + "/count", 0) + diff.numel()


def step_loss(
    outputs,
    prepared,
    loss_mode: str,
    include_direct_vorticity: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Pooled MSE over the selected branch rows, with per-field components.

    Returns (loss, parts) where parts maps field names (p_s, tau, p_v, u,
    omega) to their MSE over the rows that entered the loss.
    """
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
    pairs = []
    if loss_mode in ("anchors", "both"):
        if prepared.surface_anchor_target is None:
            raise ValueError("anchor loss requested but anchors carry no targets")
        pairs.append((outputs.surface_anchor, prepared.surface_anchor_target, "surface"))
        pairs.append((outputs.volume_anchor, prepared.volume_anchor_target, "volume"))
    if loss_mode in ("queries", "both"):
        pairs.append((outputs.surface_query, prepared.surface_query_target, "surface"))
        pairs.append((outputs.volume_query, prepared.volume_query_target, "volume"))

    parts: dict[str, float] = {}
    total_sq = None
    total_count = 0
    for pred, target, branch in pairs:
        if pred.shape[0] == 0:
            continue
        if pred.shape != target.shape:
            raise ValueError("prediction/target shape mismatch")
        if branch == "surface":
            _accumulate(parts, "p_s", pred[:, 0], target[:, 0])
            _accumulate(parts, "tau", pred[:, 1:4], target[:, 1:4])
            sq = ((pred - target) ** 2).sum()
            count = pred.numel()
        else:
            _accumulate(parts, "p_v", pred[:, 0], target[:, 0])
            _accumulate(parts, "u", pred[:, 1:4], target[:, 1:4])
            if include_direct_vorticity:
                _accumulate(parts, "omega", pred[:, 4:7], target[:, 4:7])
                sq = ((pred - target) ** 2).sum()
                count = pred.numel()
            else:
                sq = ((pred[:, :4] - target[:, :4]) ** 2).sum()
                count = pred[:, :4].numel()
        total_sq = sq if total_sq is None else total_sq + sq
        total_count += count
    if total_sq is None or total_count == 0:
        raise ValueError("loss selection is empty")
    loss = total_sq / total_count
    summary = {
        key: parts[key] / parts[key + "/count"] for key in LOG_FIELDS if key in parts
    }
    return loss, summary


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    ema_checkpoint_path: Path
    log_path: Path
    steps: int
    final_loss: float
    stats: NormalizationStats


def _load_train_samples(data) -> list[SimulationSample]:
    if isinstance(data, Dataset):
        return data.load_split("train")
    return list(data)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence(entropy=(int(seed), int(step))).generate_state(1)[0])


def _epoch_order(num: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x5E0, int(epoch))))
    return rng.permutation(num)


def _run_loop(
    model: AnchorTransformer,
    samples: list[SimulationSample],
    stats: NormalizationStats,
    cfg: TrainConfig,
    out_dir: Path,
    total_steps: int,
    lr_fn,
    divfree_finetune: bool,
    meta: dict,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"
    opt = Lion(
        model.parameters(),
        lr=cfg.peak_lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    ema_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    delta = cfg.fd_delta if cfg.fd_delta is not None else model.config.fd_delta
    loss_mode = cfg.effective_loss_mode
    sigma = stats.vorticity_sigma
    t0 = time.perf_counter()
    final_loss = float("nan")

    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", *LOG_FIELDS, "wall_s"])
        include_omega = cfg.head == "direct"
        batch = cfg.batch_size
        order = _epoch_order(len(samples), cfg.seed, 0)
        for step in range(total_steps):
            lr = lr_fn(step)
            opt.zero_grad(set_to_none=True)
            mean_loss = 0.0
            part_means: dict[str, float] = {}
            # Each optimizer step averages gradients over `batch` consecutive
            # draws from the shuffled sample stream (fresh anchors per draw).
            for draw in range(step * batch, (step + 1) * batch):
                epoch, slot = divmod(draw, len(samples))
                if slot == 0 and draw:
                    order = _epoch_order(len(samples), cfg.seed, epoch)
                sample = samples[order[slot]]
                prepared = prepare_training_sample(
                    sample,
                    stats,
                    cfg.mode,
                    cfg.counts,
                    model.config.supernode_radius,
                    _step_seed(cfg.seed, draw),
                )
                context = model.encode_context(prepared.batch)
                outputs_sq = model.decode_queries(
                    context, "surface", prepared.batch.surface_query_pos
                )
                outputs_vq = model.decode_queries(
                    context, "volume", prepared.batch.volume_query_pos
                )
                outputs = ModelOutputs(
                    surface_anchor=context.surface_anchor_pred,
                    volume_anchor=context.volume_anchor_pred,
                    surface_query=outputs_sq,
                    volume_query=outputs_vq,
                )
                loss, parts = step_loss(
                    outputs, prepared, loss_mode, include_direct_vorticity=include_omega
                )
                if divfree_finetune:
                    vort_sq, vort_count, vort_mse = _curl_vorticity_terms(
                        model, context, stats, prepared, sample, loss_mode, delta, sigma
                    )
                    base_count = _loss_element_count(prepared, loss_mode, include_omega)
                    loss = (loss * base_count + vort_sq) / (base_count + vort_count)
                    parts["omega"] = vort_mse
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} "
                        f"(sample {sample.sample_id!r}, lr {lr:.3g})"
                    )
                (loss / batch).backward()
                mean_loss += float(loss.detach()) / batch
                for key, value in parts.items():
                    part_means[key] = part_means.get(key, 0.0) + value / batch
            clip_gradients(model.parameters(), cfg.clip_norm)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.step()
            ema_update(ema_state, model, cfg.ema_decay)
            final_loss = mean_loss
            if step % cfg.log_every == 0 or step == total_steps - 1:
                writer.writerow(
                    [
                        step,
                        f"{lr:.8e}",
                        f"{final_loss:.8e}",
                        *[
                            f"{part_means[k]:.8e}" if k in part_means else ""
                            for k in LOG_FIELDS
                        ],
                        f"{time.perf_counter() - t0:.3f}",
                    ]
                )

    meta = dict(meta, steps=total_steps, final_loss=final_loss)
    ckpt = save_checkpoint(out_dir / "checkpoint", model, stats, meta=meta)
    ema_ckpt = save_checkpoint(
        out_dir / "checkpoint_ema",
        ema_state,
        stats,
        config=model.config,
        meta=dict(meta, ema=True),
    )
    return TrainResult(
        out_dir=out_dir,
        checkpoint_path=ckpt,
        ema_checkpoint_path=ema_ckpt,
        log_path=log_path,
        steps=total_steps,
        final_loss=final_loss,
        stats=stats,
    )


def _loss_element_count(prepared, loss_mode: str, include_omega: bool) -> int:
    count = 0
    vol_cols = 7 if include_omega else 4
    if loss_mode in ("anchors", "both"):
        count += prepared.batch.surface_anchor_pos.shape[0] * 4
        count += prepared.batch.volume_anchor_pos.shape[0] * vol_cols
    if loss_mode in ("queries", "both"):
        count += prepared.batch.surface_query_pos.shape[0] * 4
        count += prepared.batch.volume_query_pos.shape[0] * vol_cols
    return count


def _curl_vorticity_terms(
    model, context, stats, prepared, sample, loss_mode, delta, sigma
):
    """Squared-error sum/count/mse of sqrt-signed curl-derived vorticity."""
    pos_list, target_list = [], []
    if loss_mode in ("anchors", "both"):
        if prepared.volume_anchor_ids is None:
            raise ValueError("anchor vorticity loss needs mesh anchors")
        pos_list.append(prepared.batch.volume_anchor_pos)
        target_list.append(sample.volume.vorticity[prepared.volume_anchor_ids])
    if loss_mode in ("queries", "both"):
        pos_list.append(prepared.batch.volume_query_pos)
        target_list.append(sample.volume.vorticity[prepared.volume_query_ids])
    pos = torch.cat(pos_list)
    if pos.shape[0] == 0:
        raise ValueError("vorticity loss selection is empty")
    target_phys = torch.from_numpy(np.concatenate(target_list))
    omega_pred = predicted_vorticity(model, context, stats, pos, delta=delta)
    pred_t = sqrt_signed_torch(omega_pred, sigma)
    target_t = sqrt_signed_torch(target_phys.to(omega_pred.dtype), sigma)
    sq = ((pred_t - target_t) ** 2).sum()
    return sq, pred_t.numel(), float(sq.detach()) / pred_t.numel()


def train_run(
    data,
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir: Path,
    stats: NormalizationStats | None = None,
) -> TrainResult:
    """Stage-1 training from scratch.

    With head="direct" all channels are supervised; with head="divfree" the
    volume vorticity channels stay out of the loss (they are derived from
    velocity later — see `finetune_divfree_run`).
    """
    samples = _load_train_samples(data)
    if not samples:
        raise ValueError("training split is empty")
    if stats is None:
        stats = fit_stats_for(samples, cfg)
    model = build_model(model_config, seed=cfg.seed)
    total_steps = math.ceil(cfg.epochs * len(samples) / cfg.batch_size)
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    def lr_fn(step: int) -> float:
        return lr_schedule(step, total_steps, cfg.peak_lr, cfg.end_lr, cfg.warmup_frac)

    meta = {"stage": "train", "head": cfg.head, "mode": cfg.mode, "seed": cfg.seed}
    return _run_loop(
        model, samples, stats, cfg, out_dir, total_steps, lr_fn, False, meta
    )


def fit_stats_for(samples: list[SimulationSample], cfg: TrainConfig) -> NormalizationStats:
    from .data import fit_normalization

    return fit_normalization(samples, vorticity_transform=cfg.vorticity_transform)


def finetune_divfree_run(
    data,
    checkpoint_path: Path,
    cfg: TrainConfig,
    out_dir: Path,
) -> TrainResult:
    """Stage-2 finetune: supervise curl-derived vorticity (sqrt-signed).

    Resumes the stage-1 weights and normalization, decays the learning rate
    from `cfg.finetune_lr` to `cfg.end_lr` by cosine (no warmup), and adds
    the vorticity term on top of the standard channels. Step count defaults
    to `finetune_steps_frac` of the stage-1 run (or `max_steps` when set).
    """
    samples = _load_train_samples(data)
    if not samples:
        raise ValueError("training split is empty")
    bundle = load_checkpoint(checkpoint_path)
    model = build_model(bundle.config, seed=cfg.seed)
    model.load_state_dict(bundle.state)
    stats = bundle.stats
    if cfg.max_steps is not None:
        total_steps = cfg.max_steps
    else:
        stage1_steps = int(bundle.meta.get("steps", cfg.epochs * len(samples)))
        total_steps = max(1, round(cfg.finetune_steps_frac * stage1_steps))

    def lr_fn(step: int) -> float:
        return lr_schedule(step, total_steps, cfg.finetune_lr, cfg.end_lr, 0.0)

    meta = {
        "stage": "divfree-finetune",
        "head": "divfree",
        "mode": cfg.mode,
        "seed": cfg.seed,
        "resumed_from": str(checkpoint_path),
    }
    cfg = replace(cfg, head="divfree")
    return _run_loop(
        model, samples, stats, cfg, out_dir, total_steps, lr_fn, True, meta
    )
