"""Pre-norm decoder-only transformer with separable embedding / head groups.

The token-embedding table and the LM head are distinct parameters (untied):
training stages freeze, reset, and resize them independently of the trunk.
"Trunk" means every parameter that is not ``token_embedding`` or ``lm_head``.

Architecture: RMS normalization, rotary position encoding, gated (SwiGLU)
MLP, no biases, no dropout. Attention masking uses additive -inf, so
causality is exact in floating point, not merely approximate.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .rng import torch_generator

TRUNK_GROUP = "trunk"
EMBEDDING_NAME = "token_embedding"
HEAD_NAME = "lm_head"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    block_size: int
    norm_epsilon: float = 1e-5
    rope_base: float = 10000.0
    init_std: float = 0.02

    def validate(self) -> None:
        problems = []
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "block_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        elif (self.d_model // self.n_heads) % 2 != 0:
            problems.append("head dimension must be even for rotary position encoding")
        if self.norm_epsilon <= 0:
            problems.append("norm_epsilon must be positive")
        if self.rope_base <= 0:
            problems.append("rope_base must be positive")
        if self.init_std < 0:
            problems.append("init_std must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))


# Desk-scale presets; the paper-scale models are far larger.
PRESETS: dict[str, dict] = {
    "nano": dict(n_layers=2, n_heads=2, d_model=32, d_ff=96, block_size=64),
    "micro": dict(n_layers=4, n_heads=4, d_model=128, d_ff=384, block_size=128),
    "mini": dict(n_layers=6, n_heads=8, d_model=256, d_ff=768, block_size=256),
}


def preset_config(name: str, vocab_size: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    cfg = ModelConfig(vocab_size=vocab_size, **kwargs)
    cfg.validate()
    return cfg


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * rms * self.weight


def _rope_angles(seq_len: int, head_dim: int, base: float, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = torch.arange(seq_len, dtype=torch.float64)[:, None] * inv_freq[None, :]
    angles = torch.cat([angles, angles], dim=-1)  # [T, head_dim]
    return angles.cos().to(dtype=dtype, device=device), angles.sin().to(dtype=dtype, device=device)


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.attn_norm = RMSNorm(d, cfg.norm_epsilon)
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.mlp_norm = RMSNorm(d, cfg.norm_epsilon)
        self.w_gate = nn.Parameter(torch.empty(cfg.d_ff, d))
        self.w_up = nn.Parameter(torch.empty(cfg.d_ff, d))
        self.w_down = nn.Parameter(torch.empty(d, cfg.d_ff))

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.attn_norm(x)
        q = (h @ self.wq.T).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = (h @ self.wk.T).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = (h @ self.wv.T).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        q = q * cos + _rotate_half(q) * sin
        k = k * cos + _rotate_half(k) * sin
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = F.softmax(scores, dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(b, t, d)
        x = x + attn @ self.wo.T
        h = self.mlp_norm(x)
        x = x + (F.silu(h @ self.w_gate.T) * (h @ self.w_up.T)) @ self.w_down.T
        return x


class TransformerLM(nn.Module):
    """Decoder-only causal LM; forward returns logits plus final hidden states."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.token_embedding = nn.Parameter(torch.empty(config.vocab_size, config.d_model))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = RMSNorm(config.d_model, config.norm_epsilon)
        self.lm_head = nn.Parameter(torch.empty(config.vocab_size, config.d_model))

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        b, t = ids.shape
        if t > self.config.block_size:
            raise DataError(f"sequence length {t} exceeds block_size {self.config.block_size}")
        if ids.numel() == 0:
            raise DataError("empty input sequence")
        if int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0:
            raise DataError(f"token IDs outside [0, {self.config.vocab_size})")
        dtype = self.token_embedding.dtype
        x = self.token_embedding[ids]
        cos, sin = _rope_angles(t, self.config.d_model // self.config.n_heads,
                                self.config.rope_base, dtype, ids.device)
        for block in self.blocks:
            x = block(x, cos, sin)
        hidden = self.final_norm(x)
        logits = hidden @ self.lm_head.T
        return logits, hidden

    def trunk_parameters(self) -> dict[str, nn.Parameter]:
        return {
            name: p
            for name, p in self.named_parameters()
            if name not in (EMBEDDING_NAME, HEAD_NAME)
        }

    def parameter_group(self, name: str) -> str:
        if name in (EMBEDDING_NAME, HEAD_NAME):
            return name
        return TRUNK_GROUP


def _is_norm_weight(name: str) -> bool:
    return "norm" in name


def init_model(config: ModelConfig, seed: int) -> TransformerLM:
    """Fresh model: weight matrices ~ Normal(0, init_std^2), norm scales = 1."""
    config.validate()
    model = TransformerLM(config)
    g = torch_generator(seed, "init")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if _is_norm_weight(name):
                p.fill_(1.0)
            else:
                p.copy_(torch.normal(0.0, 1.0, p.shape, generator=g) * config.init_std)
    return model


def draw_matrix(shape: tuple[int, ...], std: float, *seed_parts, dtype=torch.float32) -> torch.Tensor:
    """Seeded Normal(0, std^2) draw — the distribution used for init, vocabulary
    expansion, and embedding resets, so all three are mutually consistent."""
    g = torch_generator(*seed_parts)
    return (torch.normal(0.0, 1.0, shape, generator=g) * std).to(dtype)


def forward_logits(model: TransformerLM, ids) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-sequence forward: [T] ids -> ([T, vocab] logits, [T, d] hidden)."""
    t = torch.as_tensor(ids, dtype=torch.long)
    logits, hidden = model(t.unsqueeze(0))
    return logits[0], hidden[0]


def masked_nll(logits: torch.Tensor, ids: torch.Tensor, target_mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Sum (float64) and count of next-token NLLs over masked-in targets.

    logits, ids, target_mask: [B, T, V] / [B, T] / [B, T]. target_mask[j]
    marks token j as a prediction target; position 0 is never a target.
    """
    if ids.shape[1] < 2:
        raise DataError("need at least 2 tokens for a next-token loss")
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    targets = ids[:, 1:]
    mask = target_mask[:, 1:].to(torch.bool)
    count = int(mask.sum())
    if count == 0:
        raise DataError("target mask selects no positions")
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).double().sum(), count


def sequence_nll(model: TransformerLM, ids: torch.Tensor, target_mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Forward pass plus masked_nll for [T] or [B, T] inputs."""
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
        target_mask = target_mask.unsqueeze(0)
    logits, _ = model(ids)
    return masked_nll(logits, ids, target_mask)


def loss_lm(model: TransformerLM, ids, target_mask=None) -> torch.Tensor:
    """Mean next-token NLL in nats over masked-in targets (mask defaults to all)."""
    t = torch.as_tensor(ids, dtype=torch.long)
    if target_mask is None:
        mask = torch.ones_like(t, dtype=torch.bool)
    else:
        mask = torch.as_tensor(target_mask, dtype=torch.bool)
    total, count = sequence_nll(model, t, mask)
    return total / count


def expand_vocab(model: TransformerLM, merged_size: int, seed: int) -> TransformerLM:
    """Grow the embedding table to merged_size and replace the LM head.

    Old embedding rows and the whole trunk are copied bit-exactly; new rows
    and the (unconditionally re-drawn) head come from seeded Normal draws.
    """
    cfg = model.config
    if merged_size < cfg.vocab_size:
        raise ConfigError(
            f"merged_size {merged_size} smaller than current vocab {cfg.vocab_size}"
        )
    new_cfg = dataclasses.replace(cfg, vocab_size=merged_size)
    new_model = TransformerLM(new_cfg)
    dtype = model.token_embedding.dtype
    new_model.to(dtype)
    old_params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in new_model.named_parameters():
            if name == EMBEDDING_NAME:
                p[: cfg.vocab_size].copy_(model.token_embedding)
                if merged_size > cfg.vocab_size:
                    rows = draw_matrix(
                        (merged_size - cfg.vocab_size, cfg.d_model),
                        cfg.init_std, seed, "expand-embed", dtype=dtype,
                    )
                    p[cfg.vocab_size :].copy_(rows)
            elif name == HEAD_NAME:
                p.copy_(draw_matrix((merged_size, cfg.d_model), cfg.init_std,
                                    seed, "expand-head", dtype=dtype))
            else:
                p.copy_(old_params[name])
    return new_model


@torch.no_grad()
def generate_greedy(model: TransformerLM, prompt_ids, max_new_tokens: int, eos_id: int) -> list[int]:
    """Append argmax tokens (lowest ID wins ties) until eos_id or the cap."""
    ids = list(int(i) for i in prompt_ids)
    if not ids:
        raise DataError("empty prompt")
    if len(ids) > model.config.block_size:
        raise DataError(
            f"prompt length {len(ids)} exceeds block_size {model.config.block_size}"
        )
    out: list[int] = []
    for _ in range(max_new_tokens):
        window = ids[-model.config.block_size :]
        logits, _ = model(torch.tensor(window, dtype=torch.long).unsqueeze(0))
        row = logits[0, -1]
        next_id = int((row == row.max()).nonzero()[0])
        out.append(next_id)
        ids.append(next_id)
        if next_id == eos_id:
            break
    return out
