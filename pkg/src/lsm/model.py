"""Decoder-only transformer with pluggable attention, norm, activation and RoPE.

One ``LsmConfig`` covers all five architecture flavours: multi-head,
multi-query and grouped-query attention differ only in ``n_kv_heads``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .tokenizer import FORECAST_START, PSD_OFFSET, PSD_TOKEN_MAX, PSD_TOKEN_MIN, SEQ_LEN, VOCAB_SIZE

ACTIVATIONS = ("gelu_tanh", "gelu_new", "silu")
NORMS = ("rms", "layer")
ROPES = ("fixed", "learned_frequency")
INIT_STD = 0.02


@dataclass(frozen=True)
class LsmConfig:
    d_model: int = 64
    n_layers: int = 2
    n_q_heads: int = 4
    n_kv_heads: int = 2
    ffn_hidden: int = 256
    ffn_gated: bool = True
    activation: str = "silu"
    norm: str = "rms"
    rope: str = "fixed"
    dropout_rate: float = 0.0
    max_seq_len: int = SEQ_LEN
    vocab_size: int = VOCAB_SIZE
    rope_base: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    def validate(self) -> "LsmConfig":
        if min(self.d_model, self.n_layers, self.n_q_heads, self.n_kv_heads, self.ffn_hidden) <= 0:
            raise ConfigError("dimensions, layer and head counts must be positive")
        if self.d_model % self.n_q_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_q_heads={self.n_q_heads}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")
        if self.rope not in ROPES:
            raise ConfigError(f"rope must be one of {ROPES}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.max_seq_len < SEQ_LEN:
            raise ConfigError(f"max_seq_len must be at least {SEQ_LEN}")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size is fixed at {VOCAB_SIZE}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LsmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data).validate()


_BASE = dict(d_model=768, n_layers=12, n_q_heads=12, dropout_rate=0.2)

PRESETS = {
    "lsm-gpt": LsmConfig(**_BASE, n_kv_heads=12, ffn_hidden=3072, ffn_gated=False,
                         activation="gelu_new", norm="layer", rope="learned_frequency"),
    "lsm-phi": LsmConfig(**_BASE, n_kv_heads=12, ffn_hidden=3072, ffn_gated=False,
                         activation="gelu_new", norm="layer", rope="fixed"),
    "lsm-gemma": LsmConfig(**_BASE, n_kv_heads=1, ffn_hidden=3072, ffn_gated=True,
                           activation="gelu_tanh", norm="rms", rope="fixed"),
    "lsm-mistral": LsmConfig(**_BASE, n_kv_heads=1, ffn_hidden=3072, ffn_gated=True,
                             activation="silu", norm="rms", rope="fixed"),
    "lsm-llama": LsmConfig(d_model=768, n_layers=12, n_q_heads=8, n_kv_heads=2, ffn_hidden=6656,
                           ffn_gated=True, activation="silu", norm="rms", rope="fixed",
                           dropout_rate=0.2),
    "tiny": LsmConfig(),
}


def get_preset(name: str) -> LsmConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def count_params(config: LsmConfig) -> int:
    """Closed-form parameter count for ``config``."""
    d, hd, v = config.d_model, config.head_dim, config.vocab_size
    norm = d if config.norm == "rms" else 2 * d
    attn = d * config.n_q_heads * hd * 2 + d * config.n_kv_heads * hd * 2
    ffn = (3 if config.ffn_gated else 2) * d * config.ffn_hidden
    rope = hd // 2 if config.rope == "learned_frequency" else 0
    per_layer = attn + ffn + 2 * norm + rope
    return v * d + d * v + norm + config.n_layers * per_layer


# --------------------------------------------------------------------------
# building blocks


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def gelu_new(x):
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x.pow(3))))


def activation_fn(name: str):
    if name == "gelu_new":
        return gelu_new
    if name == "gelu_tanh":
        return lambda x: F.gelu(x, approximate="tanh")
    return F.silu


def rope_inv_freq(head_dim: int, base: float = 10000.0) -> torch.Tensor:
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    return base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, inv_freq: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs ``(x[2j], x[2j+1])`` by ``pos * inv_freq[j]``.

    ``x`` has shape ``(..., T, head_dim)`` and ``positions`` shape ``(T,)``.
    """
    if x.shape[-1] % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {x.shape[-1]}")
    angles = positions.to(inv_freq.dtype)[:, None] * inv_freq[None, :]
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


class Rotary(nn.Module):
    def __init__(self, head_dim: int, base: float, learned: bool):
        super().__init__()
        inv_freq = rope_inv_freq(head_dim, base).float()
        if learned:
            self.inv_freq = nn.Parameter(inv_freq)
        else:
            self.register_buffer("inv_freq", inv_freq, persistent=False)
        self.learned = learned
        self.base = base

    def reset_parameters(self):
        with torch.no_grad():
            self.inv_freq.copy_(rope_inv_freq(self.inv_freq.numel() * 2, self.base))

    def forward(self, x, positions):
        return rope_rotate(x, positions, self.inv_freq)


def grouped_attention(q, k, v, dropout: nn.Module | None = None):
    """Causal softmax attention with key/value heads shared by query groups.

    ``q``: ``(B, Hq, T, D)``; ``k``, ``v``: ``(B, Hkv, S, D)`` with
    ``Hq % Hkv == 0`` and ``S >= T``. Query head ``h`` reads key/value head
    ``h // (Hq // Hkv)``. The queries are the last ``T`` of the ``S`` positions.
    """
    b, hq, t, d = q.shape
    hkv, s = k.shape[1], k.shape[2]
    if hq % hkv or k.shape != v.shape or s < t:
        raise RuntimeError(f"attention shape mismatch: q={tuple(q.shape)} k={tuple(k.shape)}")
    group = hq // hkv
    qg = q.reshape(b, hkv, group, t, d)
    scores = qg @ k.unsqueeze(2).transpose(-1, -2) / math.sqrt(d)
    causal = torch.ones(t, s, dtype=torch.bool, device=q.device).triu(1 + s - t)
    scores = scores.masked_fill(causal, float("-inf"))
    weights = scores.softmax(dim=-1)
    if dropout is not None:
        weights = dropout(weights)
    return (weights @ v.unsqueeze(2)).reshape(b, hq, t, d)


def fused_attention(q, k, v):
    """Same contract as :func:`grouped_attention` (no dropout) on torch's fused kernel."""
    t, s = q.shape[2], k.shape[2]
    if q.shape[1] % k.shape[1] or k.shape != v.shape or s < t:
        raise RuntimeError(f"attention shape mismatch: q={tuple(q.shape)} k={tuple(k.shape)}")
    if t == s:
        return F.scaled_dot_product_attention(q, k, v, is_causal=True, enable_gqa=True)
    allowed = torch.ones(t, s, dtype=torch.bool, device=q.device).tril(s - t)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=allowed, enable_gqa=True)


class Attention(nn.Module):
    def __init__(self, config: LsmConfig):
        super().__init__()
        d, hd = config.d_model, config.head_dim
        self.n_q, self.n_kv, self.head_dim = config.n_q_heads, config.n_kv_heads, hd
        self.wq = nn.Linear(d, self.n_q * hd, bias=False)
        self.wk = nn.Linear(d, self.n_kv * hd, bias=False)
        self.wv = nn.Linear(d, self.n_kv * hd, bias=False)
        self.wo = nn.Linear(self.n_q * hd, d, bias=False)
        self.rotary = Rotary(hd, config.rope_base, config.rope == "learned_frequency")
        self.attn_drop = nn.Dropout(config.dropout_rate)
        self.resid_drop = nn.Dropout(config.dropout_rate)

    def forward(self, x, cache: dict | None = None):
        """``cache`` (inference only) holds the rotated keys and values seen so far."""
        b, t, _ = x.shape
        start = 0 if not cache else cache["k"].shape[2]
        q = self.wq(x).view(b, t, self.n_q, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, t, self.n_kv, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, t, self.n_kv, self.head_dim).transpose(1, 2)
        pos = torch.arange(start, start + t, device=x.device)
        q, k = self.rotary(q, pos), self.rotary(k, pos)
        if cache is not None:
            if cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        if self.training and self.attn_drop.p > 0:
            out = grouped_attention(q, k, v, self.attn_drop)
        else:
            out = fused_attention(q, k, v)
        return self.resid_drop(self.wo(out.transpose(1, 2).reshape(b, t, -1)))


class FeedForward(nn.Module):
    def __init__(self, config: LsmConfig):
        super().__init__()
        d, h = config.d_model, config.ffn_hidden
        self.gated = config.ffn_gated
        if self.gated:
            self.w_gate = nn.Linear(d, h, bias=False)
        self.w_up = nn.Linear(d, h, bias=False)
        self.w_down = nn.Linear(h, d, bias=False)
        self.act = activation_fn(config.activation)
        self.drop = nn.Dropout(config.dropout_rate)

    def forward(self, x):
        if self.gated:
            hidden = self.act(self.w_gate(x)) * self.w_up(x)
        else:
            hidden = self.act(self.w_up(x))
        return self.drop(self.w_down(hidden))


def make_norm(config: LsmConfig) -> nn.Module:
    if config.norm == "rms":
        return RMSNorm(config.d_model)
    return nn.LayerNorm(config.d_model)


class Block(nn.Module):
    def __init__(self, config: LsmConfig):
        super().__init__()
        self.attn_norm = make_norm(config)
        self.attn = Attention(config)
        self.ffn_norm = make_norm(config)
        self.ffn = FeedForward(config)

    def forward(self, x, cache=None):
        x = x + self.attn(self.attn_norm(x), cache)
        return x + self.ffn(self.ffn_norm(x))


class LsmModel(nn.Module):
    def __init__(self, config: LsmConfig):
        super().__init__()
        self.config = config.validate()
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.emb_drop = nn.Dropout(config.dropout_rate)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.norm = make_norm(config)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def new_cache(self) -> list[dict]:
        return [{} for _ in self.blocks]

    def forward(self, tokens: torch.Tensor, cache: list[dict] | None = None) -> torch.Tensor:
        """Logits for ``tokens``; with ``cache`` (from :meth:`new_cache`) only the new tokens are fed."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        seen = cache[0]["k"].shape[2] if cache and cache[0] else 0
        if seen + tokens.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence of {tokens.shape[1]} tokens exceeds max_seq_len")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise ValueError("token outside the model vocabulary")
        x = self.emb_drop(self.tok_emb(tokens.long()))
        for i, block in enumerate(self.blocks):
            x = block(x, None if cache is None else cache[i])
        return self.head(self.norm(x))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_weights(model: LsmModel, seed: int) -> LsmModel:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, 0.0, INIT_STD, generator=gen)
            elif isinstance(module, RMSNorm):
                module.weight.fill_(1.0)
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, Rotary) and module.learned:
                module.reset_parameters()
    return model


def build_model(config: LsmConfig, seed: int = 0) -> LsmModel:
    return init_weights(LsmModel(config), seed)


def with_overrides(config: LsmConfig, **overrides) -> LsmConfig:
    return replace(config, **overrides).validate()


# --------------------------------------------------------------------------
# objective


def forecast_mask(batch: int, length: int = SEQ_LEN - 1, device=None) -> torch.Tensor:
    """Next-token positions whose targets are the forecast PSD tokens.

    Position ``j`` of the shifted targets holds token ``j + 1``; the forecast
    span covers tokens ``FORECAST_START .. SEQ_LEN - 2``.
    """
    mask = torch.zeros(batch, length, dtype=torch.bool, device=device)
    mask[:, FORECAST_START - 1 : SEQ_LEN - 2] = True
    return mask


def loss_terms(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor):
    """Masked cross-entropy and RMS dB error of the expected PSD level."""
    mask = loss_mask.bool()
    sel_logits = logits[mask]
    sel_targets = targets[mask].long()
    if sel_targets.numel() == 0:
        zero = logits.sum() * 0.0
        return zero, zero
    if int(sel_targets.min()) < PSD_TOKEN_MIN or int(sel_targets.max()) > PSD_TOKEN_MAX:
        raise ValueError("loss_mask selects a non-PSD target token")
    ce = F.cross_entropy(sel_logits, sel_targets)
    probs = sel_logits[:, PSD_TOKEN_MIN : PSD_TOKEN_MAX + 1].softmax(dim=-1)
    levels = torch.arange(PSD_TOKEN_MIN, PSD_TOKEN_MAX + 1, dtype=logits.dtype, device=logits.device)
    expected_db = probs @ (levels - PSD_OFFSET)
    target_db = (sel_targets - PSD_OFFSET).to(logits.dtype)
    # the clamp keeps the gradient finite when the error is exactly zero
    rms = torch.sqrt(torch.clamp_min(torch.mean((expected_db - target_db) ** 2), 1e-24))
    return ce, rms


def hybrid_loss(logits, targets, alpha: float, loss_mask) -> torch.Tensor:
    """``alpha * CE + (1 - alpha) * RMS`` over the masked positions."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    ce, rms = loss_terms(logits, targets, loss_mask)
    return alpha * ce + (1.0 - alpha) * rms


def sequence_loss(model: LsmModel, tokens: torch.Tensor, alpha: float, loss_mask=None) -> torch.Tensor:
    """Next-token hybrid loss of ``model`` on whole 292-token sequences."""
    tokens = tokens.long()
    logits = model(tokens[:, :-1])
    if loss_mask is None:
        loss_mask = forecast_mask(tokens.shape[0], tokens.shape[1] - 1, tokens.device)
    return hybrid_loss(logits, tokens[:, 1:], alpha, loss_mask)
