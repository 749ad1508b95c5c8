"""Multi-branch anchor transformer over geometry / surface / volume points.

Architecture
------------
A geometry branch turns the input point cloud into S supernode tokens
(radius-graph message passing onto sampled supernodes, then one self-attention
block). Two field branches — surface and volume — embed their anchor points
and run a shared trunk:

  block 0:            cross-attention onto the geometry tokens
  interleaved section: alternating (self-attention, cross-branch attention)
                       pairs; the cross block swaps K/V between the branches
                       so each branch reads the other's anchors
  shared tail:        self-attention block(s) shared by both branches
  branch tail:        branch-specific self-attention blocks (separate weights)

All blocks are pre-norm transformer blocks (LN -> attention -> residual,
LN -> MLP -> residual) with 3D rotary positions inside every attention.
Shared blocks are a single module instance invoked by both branches.

Anchors vs queries
------------------
Only M anchor tokens per branch run through the trunk above. Query points
re-use the trunk as a read-only context: at block i a query cross-attends to
whatever the anchors attended to at block i (the anchors' own pre-block state
for self blocks, the other branch's for cross blocks, geometry tokens for
block 0), with the same block weights. Queries therefore cost O(M) each,
never influence anchors or each other, and can be decoded in chunks of any
size against a KV cache built once per sample — constant-memory inference.

Anchors and queries are kept in separate tensors end to end, which makes
anchor outputs bitwise independent of the query set by construction.

Inputs are network-space coordinates (train bbox scaled to [0, 1000]^3);
outputs are standardized target channels. Positions travel as float64 and are
embedded at >= 32-bit precision regardless of activation dtype.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, replace

import torch
from torch import nn

from .attention import Attention, KVCache, MemoryMeter, chunk_spans
from .embed import DEFAULT_MAX_WAVELENGTH, sincos_embed

SURFACE_CHANNELS = 4  # [p, tau_x, tau_y, tau_z]
VOLUME_CHANNELS = 7  # [p, u_x, u_y, u_z, omega_x, omega_y, omega_z]

# Trunk block roles.
ROLE_GEOMETRY = "geometry_cross"
ROLE_SELF = "self_shared"
ROLE_CROSS = "cross_branch"
ROLE_BRANCH = "self_branch"

BRANCHES = ("surface", "volume")


def _check_branch(branch: str) -> str:
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    return branch


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the anchor transformer.

    `num_blocks` counts the per-branch trunk depth: 1 geometry cross block,
    `interleaved_blocks` alternating self/cross-branch blocks (must be even —
    they come in pairs), shared self blocks to fill, and `branch_blocks`
    branch-specific self blocks at the end. The geometry branch adds one more
    self block of its own on top of supernode pooling.
    """

    dim: int = 192
    num_heads: int = 3
    num_blocks: int = 12
    interleaved_blocks: int = 4
    branch_blocks: int = 6
    mlp_ratio: float = 4.0
    supernode_count: int = 16384
    supernode_radius: float = 0.25  # meters, physics space
    anchors_surface: int = 16384
    anchors_volume: int = 16384
    max_wavelength: float = DEFAULT_MAX_WAVELENGTH
    fd_delta: float = 0.5  # network units; step of the divergence-free head

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.num_heads <= 0:
            raise ValueError("dim and num_heads must be positive")
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.head_dim < 6:
            raise ValueError(
                f"head_dim {self.head_dim} < 6 leaves no rotary channel group"
            )
        if self.interleaved_blocks < 0 or self.interleaved_blocks % 2 != 0:
            raise ValueError("interleaved_blocks must be even and non-negative")
        if self.branch_blocks < 0:
            raise ValueError("branch_blocks must be non-negative")
        if self.shared_self_blocks < 0:
            raise ValueError(
                "layout does not fit: 1 geometry block + interleaved + branch "
                f"blocks exceed num_blocks={self.num_blocks}"
            )
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.supernode_count <= 0:
            raise ValueError("supernode_count must be positive")
        if self.supernode_radius <= 0:
            raise ValueError("supernode_radius must be positive")
        if self.anchors_surface <= 0 or self.anchors_volume <= 0:
            raise ValueError("anchor counts must be positive")
        if self.max_wavelength <= 0:
            raise ValueError("max_wavelength must be positive")
        if self.fd_delta <= 0:
            raise ValueError("fd_delta must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def shared_self_blocks(self) -> int:
        return self.num_blocks - 1 - self.interleaved_blocks - self.branch_blocks

    @property
    def pos_dim(self) -> int:
        """Sincos feature width: smallest multiple of 6 that is >= dim."""
        return 6 * math.ceil(self.dim / 6)

    @classmethod
    def drivaerml(cls) -> "ModelConfig":
        """Large automotive config: 12 blocks, 4 interleaved, 6 branch-specific."""
        return cls()

    @classmethod
    def ahmedml(cls) -> "ModelConfig":
        return cls(
            interleaved_blocks=8,
            branch_blocks=2,
        )

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small config for tests and laptop-scale runs."""
        base = cls(
            dim=64,
            num_heads=2,
            num_blocks=4,
            interleaved_blocks=2,
            branch_blocks=1,
            supernode_count=256,
            supernode_radius=8.0,
            anchors_surface=512,
            anchors_volume=512,
        )
        return replace(base, **overrides) if overrides else base


def trunk_layout(config: ModelConfig) -> list[str]:
    """Role of each trunk block, in execution order."""
    roles = [ROLE_GEOMETRY]
    roles += [ROLE_SELF, ROLE_CROSS] * (config.interleaved_blocks // 2)
    roles += [ROLE_SELF] * config.shared_self_blocks
    roles += [ROLE_BRANCH] * config.branch_blocks
    return roles


class Mlp(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, meter: MemoryMeter | None = None) -> torch.Tensor:
        h = self.act(self.fc1(x))
        if meter is not None:
            meter.observe(x, h)
        return self.fc2(h)


class Block(nn.Module):
    """Pre-norm transformer block; self- or cross-attention depending on call."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        mlp_ratio: float,
        max_wavelength: float = DEFAULT_MAX_WAVELENGTH,
    ) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, use_rope=True, max_wavelength=max_wavelength)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(
        self,
        x: torch.Tensor,
        pos: torch.Tensor,
        ctx: torch.Tensor | None = None,
        ctx_pos: torch.Tensor | None = None,
        meter: MemoryMeter | None = None,
    ) -> torch.Tensor:
        h = self.ln1(x)
        if ctx is None:
            c, c_pos = h, pos
        else:
            c, c_pos = self.ln1(ctx), ctx_pos
        x = x + self.attn(h, pos, c, c_pos, meter=meter)
        return x + self.mlp(self.ln2(x), meter=meter)

    def project_ctx(
        self, ctx: torch.Tensor, ctx_pos: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """K (post-rotation) and V of a context, for caching."""
        return self.attn.project_kv(self.ln1(ctx), ctx_pos)

    def forward_cached(
        self,
        x: torch.Tensor,
        pos: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        meter: MemoryMeter | None = None,
    ) -> torch.Tensor:
        """Same arithmetic as `forward` with the context K/V precomputed."""
        h = self.ln1(x)
        x = x + self.attn.attend(h, pos, k, v, meter=meter, kv_cached=True)
        return x + self.mlp(self.ln2(x), meter=meter)


class PointEncoder(nn.Module):
    """sincos features of a (network-space) position, passed through an MLP."""

    def __init__(self, pos_dim: int, dim: int, max_wavelength: float) -> None:
        super().__init__()
        self.pos_dim = pos_dim
        self.max_wavelength = max_wavelength
        self.fc1 = nn.Linear(pos_dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, pos: torch.Tensor) -> torch.Tensor:
        feats = sincos_embed(
            pos, self.pos_dim, self.max_wavelength, dtype=self.fc1.weight.dtype
        )
        return self.fc2(self.act(self.fc1(feats)))


class SupernodePool(nn.Module):
    """Radius-graph message passing from cloud points onto supernodes.

    Each edge contributes MLP(sincos(offset) || distance); messages average
    per supernode, get concatenated with the supernode's own positional
    embedding, and are projected down to the model width. Offsets, distances
    and positions are all in network units. A supernode with only its self
    edge still receives a finite (zero-offset) message.
    """

    def __init__(self, pos_dim: int, dim: int, max_wavelength: float) -> None:
        super().__init__()
        self.pos_dim = pos_dim
        self.max_wavelength = max_wavelength
        self.message = nn.Sequential(
            nn.Linear(pos_dim + 1, dim), nn.GELU(), nn.Linear(dim, dim)
        )
        self.down = nn.Linear(dim + pos_dim, dim)

    def forward(
        self,
        edge_offset: torch.Tensor,  # [E, 3] float64, point - supernode, network units
        edge_center: torch.Tensor,  # [E] long, supernode index per edge
        supernode_pos: torch.Tensor,  # [S, 3] float64, network units
    ) -> torch.Tensor:
        num_super = supernode_pos.shape[0]
        dtype = self.down.weight.dtype
        offset_feats = sincos_embed(
            edge_offset, self.pos_dim, self.max_wavelength, dtype=dtype
        )
        dist = torch.linalg.norm(edge_offset, dim=1, keepdim=True).to(dtype)
        msgs = self.message(torch.cat((offset_feats, dist), dim=1))
        pooled = torch.zeros(num_super, msgs.shape[1], dtype=msgs.dtype)
        pooled.index_add_(0, edge_center, msgs)
        degree = torch.zeros(num_super, dtype=msgs.dtype)
        degree.index_add_(0, edge_center, torch.ones_like(dist[:, 0]))
        pooled = pooled / degree.clamp(min=1.0)[:, None]
        abs_feats = sincos_embed(
            supernode_pos, self.pos_dim, self.max_wavelength, dtype=dtype
        )
        return self.down(torch.cat((abs_feats, pooled), dim=1))


@dataclass
class ModelBatch:
    """One sample's model inputs, already sampled and scaled to network units.

    All positions are float64 tensors; `edge_*` arrays describe the radius
    graph from geometry points onto the chosen supernodes. Query tensors may
    have zero rows.
    """

    supernode_pos: torch.Tensor  # [S, 3]
    edge_center: torch.Tensor  # [E] long
    edge_offset: torch.Tensor  # [E, 3]
    surface_anchor_pos: torch.Tensor  # [Ms, 3]
    volume_anchor_pos: torch.Tensor  # [Mv, 3]
    surface_query_pos: torch.Tensor  # [Qs, 3]
    volume_query_pos: torch.Tensor  # [Qv, 3]

    def __post_init__(self) -> None:
        for name in (
            "supernode_pos",
            "surface_anchor_pos",
            "volume_anchor_pos",
            "surface_query_pos",
            "volume_query_pos",
        ):
            t = getattr(self, name)
            if t.ndim != 2 or t.shape[1] != 3:
                raise ValueError(f"{name} must be [n, 3], got {tuple(t.shape)}")
        if self.edge_center.ndim != 1 or self.edge_offset.shape != (
            self.edge_center.shape[0],
            3,
        ):
            raise ValueError("edge arrays are inconsistent")
        if self.edge_center.numel() and (
            self.edge_center.max() >= self.supernode_pos.shape[0]
            or self.edge_center.min() < 0
        ):
            raise ValueError("edge_center index out of range")


@dataclass
class TrunkContext:
    """Per-block context (tokens, positions) each branch's queries attend to,
    plus the anchor predictions produced while building it."""

    surface: list[tuple[torch.Tensor, torch.Tensor]]
    volume: list[tuple[torch.Tensor, torch.Tensor]]
    surface_anchor_pred: torch.Tensor  # [Ms, SURFACE_CHANNELS]
    volume_anchor_pred: torch.Tensor  # [Mv, VOLUME_CHANNELS]

    def ctx(self, branch: str) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return self.surface if _check_branch(branch) == "surface" else self.volume


@dataclass
class ModelOutputs:
    """Standardized-unit predictions for one forward pass."""

    surface_anchor: torch.Tensor  # [Ms, 4]
    volume_anchor: torch.Tensor  # [Mv, 7]
    surface_query: torch.Tensor  # [Qs, 4]
    volume_query: torch.Tensor  # [Qv, 7]


class AnchorTransformer(nn.Module):
    """The full geometry/surface/volume anchor-attention network."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        d, h, ratio, wl = config.dim, config.num_heads, config.mlp_ratio, config.max_wavelength
        self.pool = SupernodePool(config.pos_dim, d, wl)
        self.geometry_block = Block(d, h, ratio, wl)
        self.surface_encoder = PointEncoder(config.pos_dim, d, wl)
        self.volume_encoder = PointEncoder(config.pos_dim, d, wl)
        self.roles = trunk_layout(config)
        trunk: list[nn.Module] = []
        for role in self.roles:
            if role == ROLE_BRANCH:
                trunk.append(
                    nn.ModuleDict(
                        {
                            "surface": Block(d, h, ratio, wl),
                            "volume": Block(d, h, ratio, wl),
                        }
                    )
                )
            else:
                trunk.append(Block(d, h, ratio, wl))
        self.trunk = nn.ModuleList(trunk)
        self.surface_norm = nn.LayerNorm(d)
        self.volume_norm = nn.LayerNorm(d)
        self.surface_head = nn.Linear(d, SURFACE_CHANNELS)
        self.volume_head = nn.Linear(d, VOLUME_CHANNELS)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _branch_block(self, index: int, branch: str) -> Block:
        mod = self.trunk[index]
        return mod[branch] if isinstance(mod, nn.ModuleDict) else mod

    def geometry_tokens(self, batch: ModelBatch) -> torch.Tensor:
        """Supernode pooling plus the geometry self-attention block."""
        tokens = self.pool(batch.edge_offset, batch.edge_center, batch.supernode_pos)
        return self.geometry_block(tokens, batch.supernode_pos)

    def encode_context(self, batch: ModelBatch) -> TrunkContext:
        """Run geometry branch and the anchor trunk; record per-block contexts.

        The recorded context at block i is exactly what the anchors attended
        to when they passed block i, so queries decoded later see the same
        keys/values the trunk produced — queries never feed back into it.
        """
        zg = self.geometry_tokens(batch)
        g_pos = batch.supernode_pos
        s, s_pos = self.surface_encoder(batch.surface_anchor_pos), batch.surface_anchor_pos
        v, v_pos = self.volume_encoder(batch.volume_anchor_pos), batch.volume_anchor_pos
        ctx_s: list[tuple[torch.Tensor, torch.Tensor]] = []
        ctx_v: list[tuple[torch.Tensor, torch.Tensor]] = []
        for i, role in enumerate(self.roles):
            if role == ROLE_GEOMETRY:
                block = self.trunk[i]
                ctx_s.append((zg, g_pos))
                ctx_v.append((zg, g_pos))
                s = block(s, s_pos, zg, g_pos)
                v = block(v, v_pos, zg, g_pos)
            elif role == ROLE_CROSS:
                block = self.trunk[i]
                # Parallel update: both branches read the other's pre-block state.
                ctx_s.append((v, v_pos))
                ctx_v.append((s, s_pos))
                s_new = block(s, s_pos, v, v_pos)
                v_new = block(v, v_pos, s, s_pos)
                s, v = s_new, v_new
            else:  # ROLE_SELF or ROLE_BRANCH
                ctx_s.append((s, s_pos))
                ctx_v.append((v, v_pos))
                s = self._branch_block(i, "surface")(s, s_pos)
                v = self._branch_block(i, "volume")(v, v_pos)
        return TrunkContext(
            surface=ctx_s,
            volume=ctx_v,
            surface_anchor_pred=self.surface_head(self.surface_norm(s)),
            volume_anchor_pred=self.volume_head(self.volume_norm(v)),
        )

    def _finish(self, branch: str, x: torch.Tensor) -> torch.Tensor:
        if branch == "surface":
            return self.surface_head(self.surface_norm(x))
        return self.volume_head(self.volume_norm(x))

    def decode_queries(
        self,
        context: TrunkContext,
        branch: str,
        query_pos: torch.Tensor,
        meter: MemoryMeter | None = None,
    ) -> torch.Tensor:
        """Differentiable query decoding against a trunk context (no cache)."""
        _check_branch(branch)
        encoder = self.surface_encoder if branch == "surface" else self.volume_encoder
        x = encoder(query_pos)
        for i, (ctx_tokens, ctx_pos) in enumerate(context.ctx(branch)):
            block = self._branch_block(i, branch)
            x = block(x, query_pos, ctx_tokens, ctx_pos, meter=meter)
        return self._finish(branch, x)

    def build_kv_cache(
        self,
        context: TrunkContext,
        branch: str,
        meter: MemoryMeter | None = None,
    ) -> KVCache:
        """Project every block's context to post-rotation K / V once."""
        _check_branch(branch)
        cache = KVCache()
        with torch.no_grad():
            for i, (ctx_tokens, ctx_pos) in enumerate(context.ctx(branch)):
                block = self._branch_block(i, branch)
                k, v = block.project_ctx(ctx_tokens, ctx_pos)
                cache.append(k, v)
        if meter is not None:
            meter.add_persistent(*cache.keys, *cache.values)
        return cache

    def decode_with_cache(
        self,
        cache: KVCache,
        branch: str,
        query_pos: torch.Tensor,
        meter: MemoryMeter | None = None,
    ) -> torch.Tensor:
        """Decode one query chunk against a prebuilt KV cache."""
        _check_branch(branch)
        encoder = self.surface_encoder if branch == "surface" else self.volume_encoder
        x = encoder(query_pos)
        for i in range(len(self.roles)):
            block = self._branch_block(i, branch)
            x = block.forward_cached(x, query_pos, cache.keys[i], cache.values[i], meter=meter)
        return self._finish(branch, x)

    def forward(self, batch: ModelBatch) -> ModelOutputs:
        """Anchor trunk plus (differentiable) decoding of both query sets."""
        context = self.encode_context(batch)
        surface_query = self.decode_queries(context, "surface", batch.surface_query_pos)
        volume_query = self.decode_queries(context, "volume", batch.volume_query_pos)
        return ModelOutputs(
            surface_anchor=context.surface_anchor_pred,
            volume_anchor=context.volume_anchor_pred,
            surface_query=surface_query,
            volume_query=volume_query,
        )


def chunked_decode(
    model: AnchorTransformer,
    context: TrunkContext,
    branch: str,
    query_pos: torch.Tensor,
    chunk_size: int,
    meter: MemoryMeter | None = None,
    cache: KVCache | None = None,
) -> torch.Tensor:
    """Decode queries in fixed-size chunks against one KV cache.

    Output is identical (up to roundoff-free row equality) for any chunk
    size; peak live memory is the cache plus one chunk's activations. The
    cache is built on the first pass when not supplied.
    """
    _check_branch(branch)
    num_queries = query_pos.shape[0]
    channels = SURFACE_CHANNELS if branch == "surface" else VOLUME_CHANNELS
    with torch.no_grad():
        if cache is None:
            cache = model.build_kv_cache(context, branch, meter=meter)
        if num_queries == 0:
            head = model.surface_head if branch == "surface" else model.volume_head
            return torch.zeros(0, channels, dtype=head.weight.dtype)
        outs = []
        for start, end in chunk_spans(num_queries, chunk_size):
            outs.append(
                model.decode_with_cache(cache, branch, query_pos[start:end], meter=meter)
            )
        return torch.cat(outs, dim=0)


def build_model(config: ModelConfig, seed: int = 0) -> AnchorTransformer:
    """Construct and deterministically initialize a model.

    Linear weights draw from a truncated normal (std 0.02), biases are zero,
    and both output heads start at exactly zero so the step-0 prediction is
    the standardized-target mean.
    """
    model = AnchorTransformer(config)
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02, generator=gen)
            nn.init.zeros_(module.bias)
    nn.init.zeros_(model.surface_head.weight)
    nn.init.zeros_(model.surface_head.bias)
    nn.init.zeros_(model.volume_head.weight)
    nn.init.zeros_(model.volume_head.bias)
    return model


def predicted_vorticity(
    model: AnchorTransformer,
    context: TrunkContext,
    stats,
    query_pos: torch.Tensor,
    delta: float | None = None,
    cache: KVCache | None = None,
    meter: MemoryMeter | None = None,
) -> torch.Tensor:
    """Divergence-free vorticity: curl of the decoded velocity, physics units.

    Evaluates the velocity head six extra times at +-delta offsets along each
    network axis, forms the network-frame Jacobian by central differences,
    rescales it with the per-axis coordinate and per-channel output scales
    (J_phys = b a^T * J_net elementwise), and takes the axial vector. The
    result is exactly solenoidal up to rounding because it is a discrete
    curl. Differentiable when decoding without a cache.

    `stats` is the checkpoint's NormalizationStats; `delta` defaults to the
    model config's fd_delta (network units).
    """
    from .physics import curl_from_jacobian, jacobian_correction

    delta = model.config.fd_delta if delta is None else delta
    if not delta > 0:
        raise ValueError("delta must be positive")

    def decode_velocity(pos: torch.Tensor) -> torch.Tensor:
        if cache is None:
            pred = model.decode_queries(context, "volume", pos, meter=meter)
        else:
            pred = model.decode_with_cache(cache, "volume", pos, meter=meter)
        return pred[:, 1:4]

    cols = []
    for axis in (0, 1, 2):
        step = torch.zeros_like(query_pos)
        step[:, axis] = delta
        u_plus = decode_velocity(query_pos + step)
        u_minus = decode_velocity(query_pos - step)
        cols.append((u_plus - u_minus) / (2.0 * delta))
    jac_net = torch.stack(cols, dim=-1)  # [n, 3, 3] d(u_net)/d(x_net)
    jac_phys = jacobian_correction(jac_net, stats.coord_scale, stats.volume_std[1:4])
    return curl_from_jacobian(jac_phys)


def precision_context(precision: str):
    """Context manager for the activation precision mode.

    "f32" is a no-op; "f16-mixed" runs matmuls in float16 while positional
    embeddings, rotary rotation math, softmax, and layer norms stay in
    float32 or higher.
    """
    if precision == "f32":
        return contextlib.nullcontext()
    if precision == "f16-mixed":
        return torch.autocast(device_type="cpu", dtype=torch.float16)
    raise ValueError(f"unknown precision mode {precision!r}")
