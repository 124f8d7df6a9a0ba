"""Dual-encoder transformer for labeled note-token prediction.

Score and performance patch sequences go through separate branch encoders,
are concatenated (with a learned branch embedding) into one joint sequence,
re-encoded jointly, projected to the decoder width, and attended to by an
autoregressive decoder predicting the token vocabulary.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import token_codec as tc


@dataclass(frozen=True)
class ModelConfig:
    enc_dim: int = 64
    dec_dim: int = 48
    enc_layers: int = 2
    joint_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ff_multiplier: int = 4
    max_decoder_len: int = 512
    vocab_size: int = tc.VOCAB_SIZE
    alpha_error: float = 10.0
    alpha_scope: str = "event_group"
    dropout: float = 0.1
    seed: int = 0
    n_patches: int = 512
    patch_dim: int = 256
    share_branch_weights: bool = False

    def validate(self) -> None:
        if self.enc_dim % self.heads or self.dec_dim % self.heads:
            raise ValueError("enc_dim and dec_dim must be divisible by heads")
        if self.vocab_size != tc.VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {tc.VOCAB_SIZE}")
        if self.alpha_scope not in ("label_only", "event_group"):
            raise ValueError(f"unknown alpha_scope {self.alpha_scope!r}")

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        return cls(**{"enc_dim": 768, "dec_dim": 512, "heads": 8, **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(enc_dim=8, dec_dim=8, enc_layers=1, joint_layers=1, dec_layers=1, heads=2, dropout=0.0, max_decoder_len=16)
        return cls(**{**base, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = dropout

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: Tensor, context: Tensor | None = None, causal: bool = False) -> Tensor:
        ctx = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        p = self.dropout if self.training else 0.0
        o = F.scaled_dot_product_attention(q, k, v, dropout_p=p, is_causal=causal)
        return self.out(o.transpose(1, 2).reshape(x.shape))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int, dropout: float):
        super().__init__(nn.Linear(dim, dim * mult), nn.GELU(), nn.Dropout(dropout), nn.Linear(dim * mult, dim))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, mult, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, mult, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory):
        x = x + self.drop(self.self_attn(self.norm1(x), causal=True))
        x = x + self.drop(self.cross_attn(self.norm2(x), context=memory))
        return x + self.drop(self.ff(self.norm3(x)))


class BranchEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.enc_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.n_patches, cfg.enc_dim))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.enc_dim, cfg.heads, cfg.ff_multiplier, cfg.dropout) for _ in range(cfg.enc_layers)
        )
        self.norm = nn.LayerNorm(cfg.enc_dim)

    def forward(self, patches: Tensor) -> Tensor:
        x = self.patch_proj(patches) + self.pos
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class ErrorDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.score_branch = BranchEncoder(cfg)
        self.perf_branch = self.score_branch if cfg.share_branch_weights else BranchEncoder(cfg)
        self.branch_emb = nn.Parameter(torch.zeros(2, cfg.enc_dim))
        self.joint = nn.ModuleList(
            EncoderLayer(cfg.enc_dim, cfg.heads, cfg.ff_multiplier, cfg.dropout) for _ in range(cfg.joint_layers)
        )
        self.joint_norm = nn.LayerNorm(cfg.enc_dim)
        self.proj = nn.Linear(cfg.enc_dim, cfg.dec_dim)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dec_dim)
        self.dec_pos = nn.Parameter(torch.zeros(cfg.max_decoder_len, cfg.dec_dim))
        self.dec = nn.ModuleList(
            DecoderLayer(cfg.dec_dim, cfg.heads, cfg.ff_multiplier, cfg.dropout) for _ in range(cfg.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(cfg.dec_dim)
        self.emb_drop = nn.Dropout(cfg.dropout)
        self._init_weights()

    def _init_weights(self):
        gen = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            if "norm" in name:
                continue
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() >= 2:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=gen)

    def encode(self, score_patches: Tensor, perf_patches: Tensor) -> Tensor:
        """Joint memory of shape (B, 2 * n_patches, dec_dim)."""
        expected = (self.cfg.n_patches, self.cfg.patch_dim)
        if score_patches.shape[-2:] != expected or perf_patches.shape != score_patches.shape:
            raise ValueError(f"patch inputs must both have trailing shape {expected}")
        s = self.score_branch(score_patches) + self.branch_emb[0]
        p = self.perf_branch(perf_patches) + self.branch_emb[1]
        x = torch.cat([s, p], dim=1)
        for layer in self.joint:
            x = layer(x)
        return self.proj(self.joint_norm(x))

    def decode(self, memory: Tensor, prefix: Tensor) -> Tensor:
        n = prefix.shape[1]
        if n > self.cfg.max_decoder_len:
            raise ValueError(f"prefix length {n} exceeds max_decoder_len {self.cfg.max_decoder_len}")
        x = self.emb_drop(self.tok_emb(prefix) + self.dec_pos[:n])
        for layer in self.dec:
            x = layer(x, memory)
        h = self.dec_norm(x)
        return h @ self.tok_emb.weight.t() * (self.cfg.dec_dim ** -0.5)

    def forward(self, score_patches: Tensor, perf_patches: Tensor, prefix: Tensor) -> Tensor:
        unbatched = score_patches.dim() == 2
        if unbatched:
            score_patches, perf_patches, prefix = score_patches[None], perf_patches[None], prefix[None]
        logits = self.decode(self.encode(score_patches, perf_patches), prefix)
        return logits[0] if unbatched else logits


def error_token_mask(targets: Tensor, scope: str = "event_group") -> Tensor:
    """True at error tokens: Label(Missed|Extra) and, for ``event_group``, the
    OnOff/Note tokens that the label governs."""
    is_err_label = torch.zeros_like(targets, dtype=torch.bool)
    for t in tc.ERROR_LABEL_IDS:
        is_err_label |= targets == t
    if scope == "label_only":
        return is_err_label
    mask = is_err_label.clone()
    active = torch.zeros(targets.shape[:-1], dtype=torch.bool, device=targets.device)
    for i in range(targets.shape[-1]):
        tok = targets[..., i]
        is_label = (tok >= tc.LABEL_OFFSET) & (tok < tc.ON)
        is_member = (tok == tc.ON) | (tok == tc.OFF) | ((tok >= tc.NOTE_OFFSET) & (tok < tc.VOCAB_SIZE))
        active = torch.where(is_label, is_err_label[..., i], active & is_member)
        mask[..., i] |= active & is_member
        # the Note token closes the group
        active = active & ~((tok >= tc.NOTE_OFFSET) & (tok < tc.VOCAB_SIZE))
    return mask


def token_weights(targets: Tensor, alpha_error: float, scope: str = "event_group", dtype=torch.float32) -> Tensor:
    mask = error_token_mask(targets, scope)
    return torch.where(mask, torch.tensor(alpha_error, dtype=dtype), torch.tensor(1.0, dtype=dtype))


def weighted_loss(logits: Tensor, targets: Tensor, alpha_error: float = 10.0, scope: str = "event_group",
                  valid: Tensor | None = None) -> Tensor:
    """Mean over valid tokens of alpha(y) * CE(y, logits)."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} are misaligned")
    if valid is None:
        valid = torch.ones(targets.shape, dtype=torch.bool)
    safe = torch.where(valid, targets, torch.zeros_like(targets))
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), safe.reshape(-1), reduction="none").view(targets.shape)
    w = token_weights(safe, alpha_error, scope, dtype=ce.dtype)
    w = torch.where(valid, w, torch.zeros_like(w))
    return (w * ce).sum() / valid.sum().clamp(min=1)


@torch.no_grad()
def greedy_decode(model: ErrorDetector, score_patches: Tensor, perf_patches: Tensor, max_len: int | None = None):
    """Argmax decoding from SOS. Returns (list of token lists, list of truncated flags)."""
    was_training = model.training
    model.eval()
    if score_patches.dim() == 2:
        score_patches, perf_patches = score_patches[None], perf_patches[None]
    max_len = min(max_len or model.cfg.max_decoder_len, model.cfg.max_decoder_len)
    memory = model.encode(score_patches, perf_patches)
    b = memory.shape[0]
    seq = torch.full((b, 1), tc.SOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    while seq.shape[1] < max_len and not bool(done.all()):
        nxt = model.decode(memory, seq)[:, -1].argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, tc.EOS), nxt)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        done |= nxt == tc.EOS
    model.train(was_training)
    outs, truncated = [], []
    for row in seq.tolist():
        if tc.EOS in row:
            outs.append(row[: row.index(tc.EOS) + 1])
            truncated.append(False)
        else:
            outs.append(row)
            truncated.append(True)
    return outs, truncated
