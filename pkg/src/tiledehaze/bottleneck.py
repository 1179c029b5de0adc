"""Global attention bottleneck: every patch token attends to every other.

This is the one stage whose footprint grows with image size (linearly in
token count). Attention runs either exactly (the test oracle, quadratic)
or approximately: tokens are sorted by an angular locality-sensitive
hash, attention is computed exactly inside fixed-size blocks of the
sorted order, and the out-of-block mass is estimated by a low-rank
correction built from per-segment key centroids and value sums. Below
the block size the approximate path falls back to the exact one,
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import TokenSequence
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ApproxParams:
    hash_buckets: int = 128   # 2**num_projections
    block_size: int = 64
    low_rank: int = 16        # number of landmark segments in the correction
    seed: int = 0


@dataclass(frozen=True)
class BottleneckConfig:
    depth: int = 2
    num_heads: int = 4
    token_dim: int = 768
    token_spatial: int = 8
    attention_mode: str = "exact"            # "exact" | "approximate"
    approx: ApproxParams = ApproxParams()
    positional_embedding: str = "learned-2d"  # "learned-2d" | "none"
    ffn_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"bottleneck depth must be >= 1, got {self.depth}")
        if self.token_dim % self.num_heads != 0:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")
        if self.attention_mode not in ("exact", "approximate"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.positional_embedding not in ("learned-2d", "none"):
            raise ConfigError(f"unknown positional_embedding {self.positional_embedding!r}")


@dataclass
class GlobalSequence:
    """Flattened token sequence with provenance back to (patch, position)."""

    tokens: torch.Tensor          # (total_tokens, token_dim)
    patch_index: torch.Tensor     # (total_tokens,) int64
    intra_position: torch.Tensor  # (total_tokens,) int64, row-major within the patch
    grid_rows: int
    grid_cols: int
    token_spatial: int

    def __post_init__(self):
        t = self.token_spatial
        expected = self.grid_rows * self.grid_cols * t * t
        if self.tokens.shape[0] != expected:
            raise DataError(f"total_tokens {self.tokens.shape[0]} != num_patches * token_spatial^2 ({expected})")
        if self.patch_index.shape[0] != expected or self.intra_position.shape[0] != expected:
            raise DataError("provenance arrays must have one entry per token")

    @property
    def total_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def check_provenance_bijection(self) -> None:
        t2 = self.token_spatial * self.token_spatial
        flat = self.patch_index * t2 + self.intra_position
        if torch.unique(flat).numel() != self.total_tokens:
            raise DataError("provenance map is not a bijection")

    @classmethod
    def from_token_sequence(cls, seq: TokenSequence) -> "GlobalSequence":
        n, ts, _, d = seq.tokens.shape
        tokens = seq.tokens.reshape(n * ts * ts, d)
        device = seq.tokens.device
        patch_index = torch.arange(n, device=device).repeat_interleave(ts * ts)
        intra = torch.arange(ts * ts, device=device).repeat(n)
        return cls(tokens=tokens, patch_index=patch_index, intra_position=intra,
                   grid_rows=seq.grid_rows, grid_cols=seq.grid_cols, token_spatial=ts)

    def to_token_sequence(self) -> TokenSequence:
        ts = self.token_spatial
        tokens = self.tokens.reshape(self.num_patches, ts, ts, self.tokens.shape[-1])
        return TokenSequence(tokens=tokens, grid_rows=self.grid_rows, grid_cols=self.grid_cols)


def rms_normalize(x: torch.Tensor, gain: torch.Tensor, eps: float) -> torch.Tensor:
    """gain_i * x_i / sqrt(mean(x^2) + eps), mean over the last axis."""
    if eps <= 0:
        raise DataError(f"eps must be > 0, got {eps}")
    ms = x.pow(2).mean(dim=-1, keepdim=True)
    return gain * x * torch.rsqrt(ms + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rms_normalize(x, self.gain.to(x.dtype), self.eps)


def exact_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Plain softmax attention; (..., N, d) in, (..., N, d) out."""
    scale = q.shape[-1] ** -0.5
    logits = (q * scale) @ k.transpose(-2, -1)
    return logits.softmax(dim=-1) @ v


def _lsh_codes(x: torch.Tensor, projections: torch.Tensor) -> torch.Tensor:
    """Angular LSH bucket codes; (..., N, d) -> (..., N) int64."""
    bits = (x @ projections.transpose(-1, -2)) > 0
    weights = (2 ** torch.arange(projections.shape[0], device=x.device)).to(torch.int64)
    return (bits.to(torch.int64) * weights).sum(dim=-1)


def lsh_projections(params: ApproxParams, head_dim: int, device, dtype=torch.float32) -> torch.Tensor:
    num_projs = max(1, int(round(math.log2(max(2, params.hash_buckets)))))
    gen = torch.Generator(device="cpu").manual_seed(params.seed)
    proj = torch.randn(num_projs, head_dim, generator=gen, dtype=torch.float32)
    return proj.to(device=device, dtype=dtype)


def approximate_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                          params: ApproxParams,
                          projections: torch.Tensor | None = None) -> torch.Tensor:
    """Sub-quadratic self-attention: one shared LSH ordering, exact
    attention against the query's own and adjacent sorted blocks, and a
    low-rank correction for the remaining mass. Falls back to exact
    attention (bit-identical) when the sequence fits in one block.

    q, k, v: (heads, N, head_dim). All three are sorted by the key hash
    (self-attention locality lives in token space, so a single permutation
    keeps heavy q-k pairs inside the same block regardless of how bucket
    sizes vary). Memory is O(N * (block + low_rank + d)).
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DataError("q, k, v must agree on heads and sequence length")
    H, N, d = q.shape
    b = params.block_size
    if N <= b:
        return exact_attention(q, k, v)

    if projections is None:
        projections = lsh_projections(params, d, q.device, q.dtype)
    scale = d ** -0.5
    neg = torch.finfo(q.dtype).min / 4

    k_codes = _lsh_codes(k, projections)
    q_codes = _lsh_codes(q, projections)
    order = torch.argsort(k_codes, dim=-1, stable=True)                      # (H, N)

    def take(x, idx):
        return x.gather(1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))

    qs, ks, vs = take(q, order), take(k, order), take(v, order)
    sorted_k_codes = k_codes.gather(1, order)
    sorted_q_codes = q_codes.gather(1, order)

    nb = -(-N // b)
    pad = nb * b - N
    if pad:
        qs = F.pad(qs, (0, 0, 0, pad))
        ks = F.pad(ks, (0, 0, 0, pad))
        vs = F.pad(vs, (0, 0, 0, pad))
    valid = (torch.arange(nb * b, device=q.device) < N)                      # (nb*b,)

    qb = qs.view(H, nb, b, d)
    kb = ks.view(H, nb, b, d)
    vb = vs.view(H, nb, b, d)
    vmask = valid.view(nb, b)

    # each query block attends its own and both neighboring sorted blocks;
    # processed in block chunks so the transient stays bounded while the
    # retained working set grows only linearly with the token count
    kb_p = F.pad(kb, (0, 0, 0, 0, 1, 1))                                     # (H, nb+2, b, d)
    vb_p = F.pad(vb, (0, 0, 0, 0, 1, 1))
    vmask_p = F.pad(vmask, (0, 0, 1, 1))                                     # (nb+2, b)

    m_blk = torch.empty(H, nb, b, dtype=q.dtype, device=q.device)
    z_blk = torch.empty(H, nb, b, dtype=q.dtype, device=q.device)
    s_blk = torch.empty(H, nb, b, d, dtype=q.dtype, device=q.device)
    blk_chunk = max(1, 8_000_000 // max(1, H * b * 3 * b * q.element_size() * 2))
    for j0 in range(0, nb, blk_chunk):
        j1 = min(j0 + blk_chunk, nb)
        k_loc = torch.cat([kb_p[:, j0:j1], kb_p[:, j0 + 1:j1 + 1], kb_p[:, j0 + 2:j1 + 2]], dim=2)
        v_loc = torch.cat([vb_p[:, j0:j1], vb_p[:, j0 + 1:j1 + 1], vb_p[:, j0 + 2:j1 + 2]], dim=2)
        m_loc = torch.cat([vmask_p[j0:j1], vmask_p[j0 + 1:j1 + 1], vmask_p[j0 + 2:j1 + 2]], dim=1)
        logits = (qb[:, j0:j1] * scale) @ k_loc.transpose(-2, -1)            # (H, c, b, 3b)
        logits = torch.where(m_loc.view(1, j1 - j0, 1, 3 * b), logits,
                             torch.full_like(logits, neg))
        m_c = logits.amax(dim=-1)
        w = torch.exp(logits - m_c.unsqueeze(-1))
        del logits
        w = w * m_loc.view(1, j1 - j0, 1, 3 * b).to(w.dtype)
        m_blk[:, j0:j1] = m_c
        z_blk[:, j0:j1] = w.sum(dim=-1)
        s_blk[:, j0:j1] = w @ v_loc
        del w, k_loc, v_loc

    # low-rank correction over segments of consecutive blocks, each reduced
    # to (member count, key centroid, value sum); the locally attended
    # blocks are subtracted from their segments so no key counts twice
    nseg = max(1, min(params.low_rank, nb))
    seg_of_block = (torch.arange(nb, device=q.device) * nseg) // nb          # (nb,)
    blk_count = vmask.sum(dim=-1).to(q.dtype)                                # (nb,)
    blk_ksum = (kb * vmask.view(1, nb, b, 1)).sum(dim=2)                     # (H, nb, d)
    blk_vsum = (vb * vmask.view(1, nb, b, 1)).sum(dim=2)                     # (H, nb, d)

    one_hot = F.one_hot(seg_of_block, nseg).to(q.dtype)                      # (nb, nseg)
    seg_count = one_hot.transpose(0, 1) @ blk_count                          # (nseg,)
    seg_ksum = torch.einsum("bs,hbd->hsd", one_hot, blk_ksum)                # (H, nseg, d)
    seg_vsum = torch.einsum("bs,hbd->hsd", one_hot, blk_vsum)
    centroid = seg_ksum / seg_count.clamp(min=1.0).view(1, nseg, 1)

    oh_p = F.pad(one_hot, (0, 0, 1, 1))                                      # (nb+2, nseg)
    cnt_p = F.pad(blk_count, (1, 1))
    vsum_p = F.pad(blk_vsum, (0, 0, 1, 1))
    att_oh = oh_p[:-2] * cnt_p[:-2, None] + oh_p[1:-1] * cnt_p[1:-1, None] + oh_p[2:] * cnt_p[2:, None]
    cnt_corr = seg_count.view(1, nseg) - att_oh                              # (nb, nseg)
    vs_att = (torch.einsum("bs,hbd->hbsd", oh_p[:-2], vsum_p[:, :-2])
              + torch.einsum("bs,hbd->hbsd", oh_p[1:-1], vsum_p[:, 1:-1])
              + torch.einsum("bs,hbd->hbsd", oh_p[2:], vsum_p[:, 2:]))       # (H, nb, nseg, d)
    vsum_corr = seg_vsum.unsqueeze(1) - vs_att

    lr_logits = (qb * scale) @ centroid.unsqueeze(1).transpose(-2, -1)       # (H, nb, b, nseg)
    empty = (cnt_corr <= 0).view(1, nb, 1, nseg)
    lr_logits = torch.where(empty, torch.full_like(lr_logits, neg), lr_logits)
    m_lr = lr_logits.amax(dim=-1)                                            # (H, nb, b)
    w_lr = torch.exp(lr_logits - m_lr.unsqueeze(-1))
    w_lr = w_lr * (~empty).to(w_lr.dtype)
    z_lr = (w_lr * cnt_corr.clamp(min=0.0).view(1, nb, 1, nseg)).sum(dim=-1)  # (H, nb, b)
    s_lr = torch.einsum("hnbs,hnsd->hnbd", w_lr, vsum_corr)                  # (H, nb, b, d)

    # lifeline: a key can hash away from its neighbors, stranding its own
    # query outside the heavy region. Each query therefore also attends the
    # two blocks where its *query* code lands in the sorted key order, with
    # the landmark model's estimate of those blocks subtracted so nothing
    # counts twice. Processed in chunks to keep memory linear.
    Np = nb * b
    parts_m = [m_blk.view(H, Np), m_lr.view(H, Np)]
    parts_s = [s_blk.view(H, Np, d), s_lr.view(H, Np, d)]
    parts_z = [z_blk.view(H, Np), z_lr.view(H, Np)]

    own_block = torch.arange(Np, device=q.device) // b                       # (Np,)
    land = torch.searchsorted(sorted_k_codes, sorted_q_codes)                # (H, N)
    land = F.pad(land, (0, pad))                                             # pad queries: dummy
    lr_flat = lr_logits.view(H, Np, nseg)
    qflat = qs.view(H, Np, d)

    je0 = (land.clamp(max=N - 1) // b).clamp(max=nb - 1)
    je1 = (je0 + 1).clamp(max=nb - 1)
    for shift, je in ((0, je0), (1, je1)):
        active = ((je - own_block.view(1, Np)).abs() > 1) & valid.view(1, Np)
        if shift == 1:
            active &= je != je0                                              # clamp can collapse the pair
        if not bool(active.any()):
            continue
        m_e = torch.full((H, Np), neg, dtype=q.dtype, device=q.device)
        s_e = torch.zeros(H, Np, d, dtype=q.dtype, device=q.device)
        z_e = torch.zeros(H, Np, dtype=q.dtype, device=q.device)
        m_s = torch.full((H, Np), neg, dtype=q.dtype, device=q.device)
        s_s = torch.zeros(H, Np, d, dtype=q.dtype, device=q.device)
        z_s = torch.zeros(H, Np, dtype=q.dtype, device=q.device)
        # chunk the per-query gathers to an ~8 MB working set
        chunk = max(b, 8_000_000 // max(1, H * b * d * q.element_size() * 2))
        for lo in range(0, Np, chunk):
            hi = min(lo + chunk, Np)
            je_c = je[:, lo:hi]                                              # (H, c)
            idx = je_c.unsqueeze(-1).unsqueeze(-1)
            k_e = kb.gather(1, idx.expand(-1, -1, b, d))                     # (H, c, b, d)
            v_e = vb.gather(1, idx.expand(-1, -1, b, d))
            km = vmask.to(q.device)[je_c]                                    # (H, c, b)
            lg = torch.einsum("hcd,hcbd->hcb", qflat[:, lo:hi] * scale, k_e)
            lg = torch.where(km, lg, torch.full_like(lg, neg))
            act = active[:, lo:hi]
            lg = torch.where(act.unsqueeze(-1), lg, torch.full_like(lg, neg))
            m_c = lg.amax(dim=-1)
            w_c = torch.exp(lg - m_c.unsqueeze(-1)) * (km & act.unsqueeze(-1)).to(lg.dtype)
            m_e[:, lo:hi] = m_c
            z_e[:, lo:hi] = w_c.sum(dim=-1)
            s_e[:, lo:hi] = torch.einsum("hcb,hcbd->hcd", w_c, v_e)
            # model's view of the same block: weight at its segment centroid
            seg_e = seg_of_block.to(q.device)[je_c]                          # (H, c)
            l_model = lr_flat[:, lo:hi].gather(2, seg_e.unsqueeze(-1)).squeeze(-1)
            l_model = torch.where(act, l_model, torch.full_like(l_model, neg))
            m_s[:, lo:hi] = l_model
            z_s[:, lo:hi] = -act.to(lg.dtype) * blk_count.to(q.device)[je_c]
            s_s[:, lo:hi] = -act.unsqueeze(-1).to(lg.dtype) * blk_vsum.gather(
                1, je_c.unsqueeze(-1).expand(-1, -1, d))
        parts_m += [m_e, m_s]
        parts_s += [s_e, s_s]
        parts_z += [z_e, z_s]

    m_all = parts_m[0]
    for m in parts_m[1:]:
        m_all = torch.maximum(m_all, m)
    num = torch.zeros(H, Np, d, dtype=q.dtype, device=q.device)
    den = torch.zeros(H, Np, dtype=q.dtype, device=q.device)
    for m, s, z in zip(parts_m, parts_s, parts_z):
        w = torch.exp(m - m_all)
        num = num + s * w.unsqueeze(-1)
        den = den + z * w
    out = num / den.unsqueeze(-1)

    out = out[:, :N]
    inv = torch.empty_like(order)
    inv.scatter_(1, order, torch.arange(N, device=q.device).unsqueeze(0).expand(H, -1))
    return take(out, inv)


class GlobalAttention(nn.Module):
    """Multi-head attention over the whole token sequence."""

    def __init__(self, cfg: BottleneckConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.token_dim
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        if cfg.attention_mode == "approximate":
            num_projs = max(1, int(round(math.log2(max(2, cfg.approx.hash_buckets)))))
            gen = torch.Generator(device="cpu").manual_seed(cfg.approx.seed)
            proj = torch.randn(num_projs, dim // cfg.num_heads, generator=gen)
            self.register_buffer("lsh_proj", proj, persistent=True)
        else:
            self.lsh_proj = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        N, D = x.shape
        h = self.cfg.num_heads
        qkv = self.qkv(x).reshape(N, 3, h, D // h).permute(1, 2, 0, 3)       # 3, H, N, d
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.cfg.attention_mode == "approximate":
            out = approximate_attention(q, k, v, self.cfg.approx,
                                        projections=self.lsh_proj.to(x.dtype))
        else:
            out = exact_attention(q, k, v)
        return self.proj(out.permute(1, 0, 2).reshape(N, D))


class GatedFeedForward(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.gate = nn.Linear(dim, hidden)
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class BottleneckBlock(nn.Module):
    """Pre-norm: x + attn(rms(x)); then x + ffn(rms(x))."""

    def __init__(self, cfg: BottleneckConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.token_dim)
        self.attn = GlobalAttention(cfg)
        self.norm2 = RMSNorm(cfg.token_dim)
        self.ffn = GatedFeedForward(cfg.token_dim, cfg.ffn_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PositionalEmbedding2D(nn.Module):
    """Learned position signal over (patch row, patch col, intra position).

    The intra-patch part is a fixed learned table; the patch-grid part is a
    small MLP on normalized (row, col) centers so any grid size works.
    """

    def __init__(self, token_spatial: int, dim: int):
        super().__init__()
        self.token_spatial = token_spatial
        self.intra = nn.Parameter(torch.zeros(token_spatial * token_spatial, dim))
        nn.init.trunc_normal_(self.intra, std=0.02)
        hidden = max(16, dim // 2)
        self.grid_mlp = nn.Sequential(nn.Linear(2, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, seq: GlobalSequence) -> torch.Tensor:
        device = seq.tokens.device
        dtype = seq.tokens.dtype
        rows = (seq.patch_index // seq.grid_cols).to(dtype)
        cols = (seq.patch_index % seq.grid_cols).to(dtype)
        coords = torch.stack([(rows + 0.5) / seq.grid_rows, (cols + 0.5) / seq.grid_cols], dim=-1)
        grid_part = self.grid_mlp(coords.to(device))
        intra_part = self.intra.to(dtype)[seq.intra_position]
        return grid_part + intra_part


class GlobalBottleneck(nn.Module):
    """Stack of global-attention blocks that enriches every token with
    image-wide context; never changes sequence length or width."""

    def __init__(self, cfg: BottleneckConfig):
        super().__init__()
        self.cfg = cfg
        self.pos = PositionalEmbedding2D(cfg.token_spatial, cfg.token_dim) \
            if cfg.positional_embedding == "learned-2d" else None
        self.blocks = nn.ModuleList(BottleneckBlock(cfg) for _ in range(cfg.depth))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, seq: GlobalSequence) -> GlobalSequence:
        if seq.tokens.shape[-1] != self.cfg.token_dim:
            raise DataError(
                f"sequence dim {seq.tokens.shape[-1]} does not match bottleneck token_dim {self.cfg.token_dim}")
        if seq.token_spatial != self.cfg.token_spatial:
            raise DataError(
                f"sequence token_spatial {seq.token_spatial} does not match config {self.cfg.token_spatial}")
        x = seq.tokens
        if self.pos is not None:
            x = x + self.pos(seq)
        for block in self.blocks:
            x = block(x)
        return replace(seq, tokens=x)
