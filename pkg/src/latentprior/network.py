"""Transformer denoiser that maps (condition, timestep, noised latent) to a clean latent.

The input sequence is, in order: one condition-embedding token, one timestep
token, one token per latent block, and a learned query token. The causal
transformer output at the query position is projected back to the flat
latent. Attention uses one shared key/value head (multi-query), and the
feed-forward layers are SwiGLU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError, NumericFailureError


@dataclass
class PriorConfig:
    model_dim: int = 512
    depth: int = 12
    heads: int = 12
    head_dim: int = 64
    ff_mult: int = 4
    cond_drop_prob: float = 0.2
    predict_x_start: bool = True
    latent_dim: int = 512
    num_latent_blocks: int = 1
    embed_dim: int = 512
    num_timesteps: int = 1000

    def __post_init__(self):
        for name in ("model_dim", "depth", "heads", "head_dim", "ff_mult",
                     "latent_dim", "num_latent_blocks", "embed_dim", "num_timesteps"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise InvalidArgumentError(f"cond_drop_prob must lie in [0, 1], got {self.cond_drop_prob}")
        if not self.predict_x_start:
            raise InvalidArgumentError("only x0 prediction (predict_x_start=True) is supported")

    @property
    def flat_dim(self) -> int:
        return self.num_latent_blocks * self.latent_dim

    @property
    def seq_len(self) -> int:
        return self.num_latent_blocks + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)

    @classmethod
    def toy(cls, **overrides) -> "PriorConfig":
        kw = dict(model_dim=64, depth=2, heads=4, head_dim=16, latent_dim=16, embed_dim=16)
        kw.update(overrides)
        return cls(**kw)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.to_q = nn.Linear(dim, heads * head_dim, bias=False)
        self.to_kv = nn.Linear(dim, 2 * head_dim, bias=False)
        self.to_out = nn.Linear(heads * head_dim, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        q = self.to_q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.to_kv(x).chunk(2, dim=-1)
        scores = q @ k.unsqueeze(1).transpose(-1, -2) / math.sqrt(self.head_dim)
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = scores.softmax(dim=-1) @ v.unsqueeze(1)
        return self.to_out(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.proj_in = nn.Linear(dim, 2 * mult * dim, bias=False)
        self.proj_out = nn.Linear(mult * dim, dim, bias=False)

    def forward(self, x):
        a, gate = self.proj_in(x).chunk(2, dim=-1)
        return self.proj_out(a * F.silu(gate))


class Block(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.model_dim)
        self.attn = Attention(cfg.model_dim, cfg.heads, cfg.head_dim)
        self.ff_norm = nn.LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_mult)

    def forward(self, x):
        x = x + self.attn(self.attn_norm(x))
        return x + self.ff(self.ff_norm(x))


class PriorNetwork(nn.Module):
    def __init__(self, config: PriorConfig):
        super().__init__()
        self.config = cfg = config
        self.cond_proj = nn.Linear(cfg.embed_dim, cfg.model_dim)
        self.time_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.latent_proj = nn.Linear(cfg.latent_dim, cfg.model_dim)
        self.learned_query = nn.Parameter(torch.randn(cfg.model_dim) * 0.02)
        self.pos_emb = nn.Parameter(torch.randn(cfg.seq_len, cfg.model_dim) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.model_dim)
        self.out_proj = nn.Linear(cfg.model_dim, cfg.flat_dim)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def tokens(self, x_t, t, cond, cond_mask) -> torch.Tensor:
        """Assemble the ``[B, seq_len, model_dim]`` input sequence."""
        cfg = self.config
        b = x_t.shape[0]
        cond = torch.where(cond_mask[:, None], cond, torch.zeros_like(cond))
        cond_tok = self.cond_proj(cond)[:, None]
        time_tok = self.time_proj(sinusoidal_embedding(t, cfg.model_dim).to(x_t.dtype))[:, None]
        latent_tok = self.latent_proj(x_t.view(b, cfg.num_latent_blocks, cfg.latent_dim))
        query_tok = self.learned_query.expand(b, 1, -1)
        seq = torch.cat([cond_tok, time_tok, latent_tok, query_tok], dim=1)
        return seq + self.pos_emb

    def forward(self, x_t, t, cond, cond_mask=True) -> torch.Tensor:
        unbatched = x_t.ndim == 1
        if unbatched:
            x_t, cond = x_t[None], cond[None]
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long, device=x_t.device).expand(b)
        cond_mask = torch.as_tensor(cond_mask, dtype=torch.bool, device=x_t.device).expand(b)
        if x_t.shape[-1] != self.config.flat_dim or cond.shape[-1] != self.config.embed_dim:
            raise InvalidArgumentError(
                f"expected latent width {self.config.flat_dim} and condition width "
                f"{self.config.embed_dim}, got {x_t.shape[-1]} and {cond.shape[-1]}"
            )
        if not (torch.isfinite(x_t).all() and torch.isfinite(cond).all()):
            raise NumericFailureError("non-finite input to prior network")

        h = self.tokens(x_t, t, cond, cond_mask)
        for block in self.blocks:
            h = block(h)
        out = self.out_proj(self.final_norm(h[:, -1]))
        return out[0] if unbatched else out


def build_prior(config: PriorConfig, init_seed: int = 0) -> PriorNetwork:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return PriorNetwork(config)


def drop_condition(cond: torch.Tensor, prob: float, generator: torch.Generator | None = None):
    """Replace each row of ``cond`` by zeros with probability ``prob``.

    Returns the (possibly zeroed) condition and a boolean keep-mask.
    """
    if not 0.0 <= prob <= 1.0:
        raise InvalidArgumentError(f"drop probability must lie in [0, 1], got {prob}")
    unbatched = cond.ndim == 1
    rows = cond[None] if unbatched else cond
    keep = torch.rand(rows.shape[0], generator=generator) >= prob
    out = torch.where(keep[:, None], rows, torch.zeros_like(rows))
    if unbatched:
        return out[0], bool(keep[0])
    return out, keep
