"""Hierarchical-attention transformer encoder for long clinical documents.

Attention over a power-of-two sequence is computed block-wise: each query
block attends its own and adjacent key blocks exactly (level 0), plus the
two neighbors of its ancestor block at every coarser level, where keys and
values are mean-coarsened over real tokens. A coarse entry aggregating n
real tokens enters the softmax with weight n * exp(score) (a ln(n) score
offset), so all levels merge through one stabilized softmax and padded
positions carry zero weight everywhere. Cost is O(len * (3*block + 2*log))
versus the dense oracle's O(len^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .nncore import BatchNorm1d, Dropout, gelu
from .tokenizer import PAD_ID, is_power_of_two

NEG_INF = float("-inf")


@dataclass
class EncoderConfig:
    """Architecture hyperparameters of the hierarchical transformer."""

    vocab_size: int
    embed_dim: int = 512
    layers: int = 3
    heads: int = 4
    dim_head: int = 32
    block_size: int = 32
    ff_multiplier: int = 4
    head_hidden: tuple[int, ...] = (256, 128)
    head_dropout: float = 0.2
    budget: int = 8192
    pooling: str = "cls"
    rope_base: float = 10000.0
    fused_extra_dim: int = 0  # 771 = 768 medication dims + 3 anthropometric dims

    def __post_init__(self):
        if not is_power_of_two(self.budget):
            raise ValueError(f"budget {self.budget} must be a power of two")
        if self.budget % self.block_size != 0:
            raise ValueError("budget must be divisible by block_size")
        if self.heads * self.dim_head > self.embed_dim:
            raise ValueError("heads * dim_head must not exceed embed_dim")
        if self.pooling not in ("cls", "average"):
            raise ValueError(f"pooling must be 'cls' or 'average', got {self.pooling!r}")
        if self.dim_head % 2 != 0:
            raise ValueError("dim_head must be even for rotary embeddings")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "head_hidden" in d:
            d["head_hidden"] = tuple(d["head_hidden"])
        return cls(**d)


# ---------------------------------------------------------------------------
# rotary positional embedding
# ---------------------------------------------------------------------------

def apply_rope(x: torch.Tensor, positions: torch.Tensor | None = None, base: float = 10000.0):
    """Rotate consecutive feature pairs of q/k by position-dependent angles.

    ``x`` is (..., len, heads, dim_head); pair j at position m is rotated by
    angle m * base^(-2j / dim_head). Scores between rotated q and k depend
    only on relative position.
    """
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ValueError(f"dim_head must be even, got {dim}")
    length = x.shape[-3]
    if positions is None:
        positions = torch.arange(length, dtype=x.dtype)
    else:
        positions = positions.to(x.dtype)
    freqs = base ** (-torch.arange(0, dim, 2, dtype=x.dtype) / dim)
    angles = positions.view(-1, 1) * freqs.view(1, -1)  # (len, dim/2)
    cos = angles.cos().view(length, 1, dim // 2)
    sin = angles.sin().view(length, 1, dim // 2)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def dense_attention(q, k, v, mask=None, chunk_size: int = 1024):
    """Reference softmax attention, O(len^2); the oracle for the blocked path.

    q, k, v: (batch, heads, len, dim_head); mask: (batch, len) with 1 = real.
    Fully-masked queries output zeros. Queries are processed in chunks only
    to bound memory; the arithmetic is plain dense attention.
    """
    B, H, L, D = q.shape
    scale = 1.0 / math.sqrt(D)
    if mask is not None:
        key_bad = (mask == 0).view(B, 1, 1, L)
    out = torch.empty_like(q)
    for start in range(0, L, chunk_size):
        stop = min(start + chunk_size, L)
        scores = torch.einsum("bhqd,bhkd->bhqk", q[:, :, start:stop], k) * scale
        if mask is not None:
            scores = scores.masked_fill(key_bad, NEG_INF)
        mx = scores.amax(dim=-1, keepdim=True)
        mx = torch.where(torch.isinf(mx), torch.zeros_like(mx), mx)
        w = torch.exp(scores - mx)
        denom = w.sum(dim=-1, keepdim=True).clamp(min=1e-30)
        out[:, :, start:stop] = torch.einsum("bhqk,bhkd->bhqd", w / denom, v)
    if mask is not None:
        out = out * mask.view(B, 1, L, 1).to(out.dtype)
    return out


def hierarchical_attention(q, k, v, mask=None, block_size: int = 32, return_weights: bool = False):
    """Blocked hierarchical attention (see module docstring for the scheme).

    q, k, v: (batch, heads, len, dim_head); mask: (batch, len), 1 = real
    token. len must be a power of two and a multiple of block_size.

    Per query block i the attended set is: key blocks {i-1, i, i+1} at full
    resolution, then at every coarser level l >= 1 the blocks adjacent to the
    query's ancestor (index i >> l). A coarse neighbor would be dropped if
    finer levels already covered its whole span, but that never happens for
    an in-range neighbor: finer coverage ends strictly inside an adjacent
    coarse block's span (at most (p +- 1.5) * 2^l fine blocks), so spans can
    overlap near their boundary but are never swallowed.
    """
    B, H, L, D = q.shape
    if not is_power_of_two(L):
        raise ValueError(f"sequence length {L} must be a power of two")
    if L % block_size != 0 or L < block_size:
        raise ValueError(f"length {L} must be a positive multiple of block_size {block_size}")
    bs = block_size
    n_blocks = L // bs
    scale = 1.0 / math.sqrt(D)
    dtype = q.dtype

    if mask is None:
        mask_f = torch.ones(B, L, dtype=dtype)
    else:
        mask_f = mask.to(dtype)

    qb = q.reshape(B, H, n_blocks, bs, D)
    kb = k.reshape(B, H, n_blocks, bs, D)
    vb = v.reshape(B, H, n_blocks, bs, D)
    mb = mask_f.reshape(B, 1, n_blocks, bs)

    # level 0: exact attention over own + adjacent key blocks. Slices of the
    # padded stacks are the i-1 / i / i+1 neighbor views; keys and values are
    # never gathered into a (.., 3*bs, D) copy.
    zeros_kv = kb.new_zeros(B, H, 1, bs, D)
    zeros_m = mb.new_zeros(B, 1, 1, bs)
    kpad = torch.cat([zeros_kv, kb, zeros_kv], dim=2)
    vpad = torch.cat([zeros_kv, vb, zeros_kv], dim=2)
    mpad = torch.cat([zeros_m, mb, zeros_m], dim=2)
    scores = [
        torch.matmul(qb, kpad[:, :, o:o + n_blocks].transpose(-1, -2)) for o in range(3)
    ]  # 3 x (B,H,N,bs,bs)
    # every attended entry enters the softmax with weight mult * exp(score):
    # mult is 1 for a real fine token, 0 for pads and out-of-range blocks, and
    # the real-token count for a coarse block. ln(mult) becomes an additive
    # score offset (-inf knocks an entry out entirely), so no separate
    # masking pass is needed. Offsets depend only on the mask: no gradients.
    with torch.no_grad():
        offsets = [torch.log(mpad[:, :, o:o + n_blocks]).unsqueeze(3) for o in range(3)]

    # coarse pyramid: masked sums and real-token counts per block, then halving
    k_sum = (kb * mb.unsqueeze(-1)).sum(dim=3)  # (B,H,N,D)
    v_sum = (vb * mb.unsqueeze(-1)).sum(dim=3)
    cnt = mb.sum(dim=3)  # (B,1,N)
    coarse_keys, coarse_values, coarse_mults = [], [], []
    n_levels = 0
    level = 0
    n_at = n_blocks
    while n_at // 2 >= 2:
        level += 1
        n_at //= 2
        k_sum = k_sum.reshape(B, H, n_at, 2, D).sum(dim=3)
        v_sum = v_sum.reshape(B, H, n_at, 2, D).sum(dim=3)
        cnt = cnt.reshape(B, 1, n_at, 2).sum(dim=3)
        safe_cnt = cnt.clamp(min=1.0)
        k_mean = k_sum / safe_cnt.unsqueeze(-1)
        v_mean = v_sum / safe_cnt.unsqueeze(-1)

        ancestor = torch.arange(n_blocks) >> level  # (N,)
        nbrs = torch.stack([ancestor - 1, ancestor + 1], dim=1)  # (N, 2)
        in_range = (nbrs >= 0) & (nbrs < n_at)
        idx = nbrs.clamp(0, n_at - 1)
        coarse_keys.append(k_mean[:, :, idx])  # (B,H,N,2,D)
        coarse_values.append(v_mean[:, :, idx])
        with torch.no_grad():
            coarse_mults.append(cnt[:, :, idx] * in_range.view(1, 1, n_blocks, 2))
        n_levels += 1

    for i in range(3):
        scores[i] = scores[i].mul_(scale).add_(offsets[i])
    part_scores = scores[:3]
    part_values = [vpad[:, :, o:o + n_blocks] for o in range(3)]
    if n_levels:
        with torch.no_grad():
            coarse_off = torch.log(torch.cat(coarse_mults, dim=-1)).unsqueeze(3)
        gathered_k = torch.cat(coarse_keys, dim=3)  # (B,H,N,2*levels,D)
        coarse = torch.matmul(qb, gathered_k.transpose(-1, -2)).mul_(scale).add_(coarse_off)
        part_scores = part_scores + [coarse]
        part_values.append(torch.cat(coarse_values, dim=3))
        offsets.append(coarse_off)

    # streaming softmax across parts: running-max stabilization (gradient-free
    # constant), then numerator/denominator accumulation. Rows with no live
    # entry anywhere keep num = den = 0 and come out as zeros.
    with torch.no_grad():
        m = None
        for sp in part_scores:
            pm = sp.amax(dim=-1, keepdim=True)
            m = pm if m is None else torch.maximum(m, pm)
        m = torch.where(torch.isinf(m), torch.zeros_like(m), m)
    num = den = None
    for sp, vp in zip(part_scores, part_values):
        ep = (sp - m).exp_()
        part_num = torch.matmul(ep, vp)
        part_den = ep.sum(dim=-1, keepdim=True)
        num = part_num if num is None else num + part_num
        den = part_den if den is None else den + part_den
    out = num / den.clamp(min=1e-30)  # (B,H,N,bs,D)
    out = out.reshape(B, H, L, D) * mask_f.view(B, 1, L, 1)

    if return_weights:
        with torch.no_grad():
            d_final = den.detach().clamp(min=1e-30)
            weights = torch.cat(
                [(sp.detach() - m).exp() / d_final for sp in part_scores], dim=-1
            )
            live = torch.cat(offsets, dim=-1) > NEG_INF  # (B,1,N,1,S)
        detail = {
            "weights": weights,  # (B, H, n_blocks, bs, S)
            "valid": live,  # (B, 1, n_blocks, 1, S)
            "n_fine": 3 * bs,
            "n_levels": n_levels,
        }
        return out, detail
    return out


# ---------------------------------------------------------------------------
# model modules
# ---------------------------------------------------------------------------

class TokenEmbedding(torch.nn.Module):
    """Token-id lookup with a zero, non-learnable PAD row.

    Every other row (including CLS) is a learned, randomly initialized
    parameter. Loss never depends on PAD positions (attention masks them and
    pooling excludes them), so the PAD row receives zero gradient and stays
    at zero through training.
    """

    def __init__(self, vocab_size: int, dim: int, pad_id: int = PAD_ID):
        super().__init__()
        self.vocab_size = vocab_size
        self.pad_id = pad_id
        weight = torch.randn(vocab_size, dim) * 0.02
        weight[pad_id] = 0.0
        self.weight = torch.nn.Parameter(weight)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(
                f"token id out of vocabulary [0, {self.vocab_size}): "
                f"min {int(ids.min())}, max {int(ids.max())}"
            )
        return self.weight[ids]


class HierarchicalSelfAttention(torch.nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        inner = cfg.heads * cfg.dim_head
        self.heads = cfg.heads
        self.dim_head = cfg.dim_head
        self.block_size = cfg.block_size
        self.rope_base = cfg.rope_base
        self.to_q = torch.nn.Linear(cfg.embed_dim, inner)
        self.to_k = torch.nn.Linear(cfg.embed_dim, inner)
        self.to_v = torch.nn.Linear(cfg.embed_dim, inner)
        self.to_out = torch.nn.Linear(inner, cfg.embed_dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        H, D = self.heads, self.dim_head
        q = self.to_q(x).view(B, L, H, D)
        k = self.to_k(x).view(B, L, H, D)
        v = self.to_v(x).view(B, L, H, D)
        q = apply_rope(q, base=self.rope_base)
        k = apply_rope(k, base=self.rope_base)
        q, k, v = (t.permute(0, 2, 1, 3) for t in (q, k, v))
        attended = hierarchical_attention(q, k, v, mask=mask, block_size=self.block_size)
        merged = attended.permute(0, 2, 1, 3).reshape(B, L, H * D)
        return self.to_out(merged)


class FeedForward(torch.nn.Module):
    def __init__(self, dim: int, multiplier: int):
        super().__init__()
        self.up = torch.nn.Linear(dim, dim * multiplier)
        self.down = torch.nn.Linear(dim * multiplier, dim)

    def forward(self, x):
        return self.down(gelu(self.up(x)))


class EncoderLayer(torch.nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then x + FF(LN(x))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm_attn = torch.nn.LayerNorm(cfg.embed_dim)
        self.norm_ff = torch.nn.LayerNorm(cfg.embed_dim)
        self.attn = HierarchicalSelfAttention(cfg)
        self.ff = FeedForward(cfg.embed_dim, cfg.ff_multiplier)

    def forward(self, x, mask):
        x = x + self.attn(self.norm_attn(x), mask)
        x = x + self.ff(self.norm_ff(x))
        return x


def pool(x: torch.Tensor, mask: torch.Tensor, mode: str) -> torch.Tensor:
    """Collapse (batch, len, dim) to (batch, dim) by CLS slot or masked mean."""
    if mode == "cls":
        if (mask[:, 0] == 0).any():
            raise ValueError("cls pooling requires an unmasked token at position 0")
        return x[:, 0]
    if mode == "average":
        counts = mask.sum(dim=1)
        if (counts == 0).any():
            raise ValueError("average pooling over an all-zero mask")
        m = mask.to(x.dtype).unsqueeze(-1)
        return (x * m).sum(dim=1) / counts.to(x.dtype).unsqueeze(-1)
    raise ValueError(f"unknown pooling mode {mode!r}")


class ClassificationHead(torch.nn.Module):
    """linear -> batch norm -> GELU -> dropout, repeated, then a 2-way output."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], rate: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.in_dim = in_dim
        layers: list[torch.nn.Module] = []
        prev = in_dim
        for width in hidden:
            layers.append(torch.nn.Linear(prev, width))
            layers.append(BatchNorm1d(width))
            layers.append(_Gelu())
            layers.append(Dropout(rate, generator))
            prev = width
        layers.append(torch.nn.Linear(prev, 2))
        self.net = torch.nn.Sequential(*layers)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[-1] != self.in_dim:
            raise ValueError(f"head expects feature dim {self.in_dim}, got {feature.shape[-1]}")
        return self.net(feature)


class _Gelu(torch.nn.Module):
    def forward(self, x):
        return gelu(x)


class HTransformer(torch.nn.Module):
    """Full classifier: embedding, rotary hierarchical encoder stack, pooled
    representation (optionally concatenated with structured features), MLP head.

    Padded positions are inert end to end (zero attention weight at every
    level, excluded from pooling), so each batch is trimmed to the smallest
    power-of-two window covering its real tokens before the stack runs; the
    result matches the full-budget computation to float precision.
    """

    def __init__(self, cfg: EncoderConfig, dropout_seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        generator = None
        if dropout_seed is not None:
            generator = torch.Generator().manual_seed(dropout_seed)
        self.embedding = TokenEmbedding(cfg.vocab_size, cfg.embed_dim)
        self.layers = torch.nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.head = ClassificationHead(
            cfg.embed_dim + cfg.fused_extra_dim, cfg.head_hidden, cfg.head_dropout, generator
        )

    def _trim_to_real_window(self, ids, mask):
        longest = int(mask.sum(dim=1).max())
        window = self.cfg.block_size
        while window < longest:
            window *= 2
        if window < ids.shape[1]:
            return ids[:, :window], mask[:, :window]
        return ids, mask

    def encode(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Pooled text representation, before any fusion."""
        ids, mask = self._trim_to_real_window(ids, mask)
        x = self.embedding(ids)
        for layer in self.layers:
            x = layer(x, mask)
        return pool(x, mask, self.cfg.pooling)

    def forward(
        self,
        ids: torch.Tensor,
        mask: torch.Tensor,
        extra: torch.Tensor | None = None,
    ) -> torch.Tensor:
        pooled = self.encode(ids, mask)
        if self.cfg.fused_extra_dim:
            if extra is None:
                raise ValueError("model was configured for fusion but got no structured features")
            feature = torch.cat([pooled, extra.to(pooled.dtype)], dim=1)
        else:
            if extra is not None:
                raise ValueError("text-only model received structured features")
            feature = pooled
        return self.head(feature)
