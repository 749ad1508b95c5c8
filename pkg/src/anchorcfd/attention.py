"""Attention kernels: scaled dot product, anchor attention, KV caching.

Anchor attention is the scaling device of the whole model: a subset of M
anchor tokens attends to itself (full self-attention, O(M^2)) and the
remaining query tokens cross-attend to those anchors (O(M) each, O(MN)
total). Queries never contribute keys or values, so anchor rows are
structurally independent of which queries are present — the kernels keep
anchors and queries in separate tensors and never concatenate them.

Softmax always runs in at least float32 with a row-max subtraction,
regardless of activation dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .embed import DEFAULT_MAX_WAVELENGTH, rope_rotate


class MemoryMeter:
    """Peak live-buffer accounting for inference paths.

    Kernels report the byte size of the tensors alive at their widest moment
    via `observe`; persistent storage (e.g. a KV cache) registers once via
    `add_persistent`. `peak_bytes` is the maximum of persistent + transient
    observations. This measures the implementation's own buffers, not
    allocator internals.
    """

    def __init__(self) -> None:
        self.persistent_bytes = 0
        self.peak_bytes = 0

    @staticmethod
    def _nbytes(tensors) -> int:
        # Logical bytes of each view, not its backing storage: a chunk sliced
        # from a large caller-owned buffer only costs the kernel its own rows.
        return sum(t.numel() * t.element_size() for t in tensors)

    def add_persistent(self, *tensors: torch.Tensor) -> None:
        self.persistent_bytes += self._nbytes(tensors)
        self.peak_bytes = max(self.peak_bytes, self.persistent_bytes)

    def observe(self, *tensors: torch.Tensor) -> None:
        live = self.persistent_bytes + self._nbytes(tensors)
        self.peak_bytes = max(self.peak_bytes, live)


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    # [n, d] -> [heads, n, head_dim]
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(0, 1)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [heads, n, head_dim] -> [n, d]
    h, n, hd = x.shape
    return x.transpose(0, 1).reshape(n, h * hd)


def sdp_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    num_heads: int = 1,
    meter: MemoryMeter | None = None,
) -> torch.Tensor:
    """softmax(q k^T / sqrt(head_dim)) v, per head, heads re-concatenated.

    q: [n, d], k/v: [m, d] with matching d divisible by `num_heads`.
    Scores and softmax are computed in float32 (float64 inputs stay float64);
    the output returns in q's dtype.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be rank-2 [tokens, dim]")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q dim {q.shape[1]} != k dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")
    if k.shape[0] == 0:
        raise ValueError("attention context is empty")
    if q.shape[1] % num_heads != 0:
        raise ValueError(f"dim {q.shape[1]} not divisible by {num_heads} heads")

    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    head_dim = qh.shape[-1]
    acc_dtype = torch.float64 if q.dtype == torch.float64 else torch.float32
    scores = qh.to(acc_dtype) @ kh.to(acc_dtype).transpose(-2, -1)
    scores = scores / (head_dim**0.5)
    probs = torch.softmax(scores, dim=-1)
    out = _merge_heads((probs.to(vh.dtype) @ vh))
    if meter is not None:
        meter.observe(q, k, v, scores, out)
    return out


@dataclass
class KVCache:
    """Per-block context keys/values for query decoding.

    `keys[i]`/`values[i]` hold the block-i context projected to K/V with
    rotary rotation already applied to the keys, shaped [heads, m_i, head_dim].
    Building the cache once lets arbitrarily many query chunks decode against
    it without re-touching context tokens.
    """

    keys: list[torch.Tensor] = field(default_factory=list)
    values: list[torch.Tensor] = field(default_factory=list)

    def append(self, k: torch.Tensor, v: torch.Tensor) -> None:
        self.keys.append(k)
        self.values.append(v)

    @property
    def num_blocks(self) -> int:
        return len(self.keys)

    def nbytes(self) -> int:
        return sum(t.untyped_storage().nbytes() for t in self.keys + self.values)


class Attention(nn.Module):
    """Multi-head attention with optional 3D rotary positions.

    One parameter set serves both call patterns: `forward(x, pos)` is
    self-attention; `forward(x, pos, ctx, ctx_pos)` cross-attends x onto ctx.
    Queries are rotated with their own positions and keys with the context's,
    so attention weights depend only on relative offsets.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        use_rope: bool = True,
        max_wavelength: float = DEFAULT_MAX_WAVELENGTH,
    ) -> None:
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.use_rope = use_rope
        self.max_wavelength = max_wavelength
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def project_kv(
        self, ctx: torch.Tensor, ctx_pos: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Context K (post-rotation) and V, shaped [heads, m, head_dim]."""
        k = _split_heads(self.to_k(ctx), self.num_heads)
        v = _split_heads(self.to_v(ctx), self.num_heads)
        if self.use_rope:
            if ctx_pos is None:
                raise ValueError("rotary attention needs context positions")
            k = rope_rotate(k, ctx_pos, self.max_wavelength)
        return k, v

    def attend(
        self,
        x: torch.Tensor,
        pos: torch.Tensor | None,
        k: torch.Tensor,
        v: torch.Tensor,
        meter: MemoryMeter | None = None,
        kv_cached: bool = False,
    ) -> torch.Tensor:
        """Attend x (rotating its queries) onto pre-projected context K/V.

        `kv_cached=True` marks k/v as living in a persistent cache already
        registered with the meter, so they are not double counted.
        """
        q = _split_heads(self.to_q(x), self.num_heads)
        if self.use_rope:
            if pos is None:
                raise ValueError("rotary attention needs query positions")
            q = rope_rotate(q, pos, self.max_wavelength)
        acc_dtype = torch.float64 if q.dtype == torch.float64 else torch.float32
        scores = q.to(acc_dtype) @ k.to(acc_dtype).transpose(-2, -1)
        scores = scores / (q.shape[-1] ** 0.5)
        probs = torch.softmax(scores, dim=-1)
        out = self.proj(_merge_heads(probs.to(v.dtype) @ v))
        if meter is not None:
            transient = (x, q, scores, out) if kv_cached else (x, q, k, v, scores, out)
            meter.observe(*transient)
        return out

    def forward(
        self,
        x: torch.Tensor,
        pos: torch.Tensor | None = None,
        ctx: torch.Tensor | None = None,
        ctx_pos: torch.Tensor | None = None,
        meter: MemoryMeter | None = None,
    ) -> torch.Tensor:
        if ctx is None:
            ctx, ctx_pos = x, pos
        k, v = self.project_kv(ctx, ctx_pos)
        return self.attend(x, pos, k, v, meter=meter)


def anchor_attention(
    tokens: torch.Tensor,
    anchor_ids: torch.Tensor,
    params: Attention,
    positions: torch.Tensor | None = None,
) -> torch.Tensor:
    """Anchor-restricted attention over one token set.

    Rows listed in `anchor_ids` self-attend; every other row cross-attends to
    the anchors only. All rows share `params`. With anchor_ids covering all
    rows this reduces exactly to full self-attention. Output rows stay in
    input order.
    """
    n = tokens.shape[0]
    anchor_ids = torch.as_tensor(anchor_ids, dtype=torch.long)
    if anchor_ids.numel() == 0:
        raise ValueError("anchor set is empty")
    if anchor_ids.unique().numel() != anchor_ids.numel():
        raise ValueError("anchor ids contain duplicates")
    if anchor_ids.min() < 0 or anchor_ids.max() >= n:
        raise ValueError("anchor ids out of range")

    anchors = tokens[anchor_ids]
    anchor_pos = positions[anchor_ids] if positions is not None else None
    k, v = params.project_kv(anchors, anchor_pos)

    out = tokens.new_empty(n, params.dim)
    out[anchor_ids] = params.attend(anchors, anchor_pos, k, v)

    query_mask = torch.ones(n, dtype=torch.bool)
    query_mask[anchor_ids] = False
    query_ids = query_mask.nonzero(as_tuple=True)[0]
    if query_ids.numel():
        query_pos = positions[query_ids] if positions is not None else None
        out[query_ids] = params.attend(tokens[query_ids], query_pos, k, v)
    return out


def chunk_spans(total: int, chunk_size: int) -> list[tuple[int, int]]:
    """[start, end) spans covering `total` rows in chunks of `chunk_size`."""
    if chunk_size <= 0:
        raise ValueError("chunk size must be positive")
    return [(s, min(s + chunk_size, total)) for s in range(0, total, chunk_size)]
