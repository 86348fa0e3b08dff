"""Miniature LVLM stack: visual encoder, the two projector families and a toy
answer head standing in for the language model.

All modules are plain ``nn.Module`` parameter records; forward passes never
mutate them, so one set of weights can be shared by concurrent evaluations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import data as vocab
from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    depth: int = 2
    n_heads: int = 4
    d_ff: int = 128
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2


@dataclass(frozen=True)
class CompressedConfig:
    d_in: int = 64
    n_queries: int = 4
    d_model: int = 64
    d_out: int = 64
    depth: int = 2
    n_heads: int = 4
    d_ff: int = 128
    n_tokens: int = vocab.N_TOKENS
    max_text_len: int = vocab.CAPTION_LEN
    instruction_conditioning: bool = True
    seed: int = 0


@dataclass(frozen=True)
class UncompressedConfig:
    d_in: int = 64
    d_hidden: int = 128
    d_out: int = 64
    pool_factor: int = 1
    seed: int = 0


@dataclass(frozen=True)
class HeadConfig:
    d_vis: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    depth: int = 1
    n_tokens: int = vocab.N_TOKENS
    max_text_len: int = vocab.CAPTION_LEN
    n_answers: int = vocab.N_ANSWERS
    variant: str = "A"
    seed: int = 0


# Stand-ins for distinct language models: widths and seeds differ per variant.
HEAD_VARIANTS = {
    "A": dict(d_model=64, n_heads=4, d_ff=128, seed=101),
    "B": dict(d_model=96, n_heads=4, d_ff=192, seed=202),
    "C": dict(d_model=48, n_heads=4, d_ff=96, seed=303),
    "D": dict(d_model=80, n_heads=4, d_ff=160, seed=404),
}


def head_config(variant: str, d_vis: int = 64, **overrides) -> HeadConfig:
    if variant not in HEAD_VARIANTS:
        raise ConfigurationError(f"unknown head variant {variant!r}; known: {sorted(HEAD_VARIANTS)}")
    kw = dict(HEAD_VARIANTS[variant], d_vis=d_vis, variant=variant)
    kw.update(overrides)
    return HeadConfig(**kw)


def attention(q, k, v, n_heads: int, mask=None):
    """Scaled dot-product attention over already-projected q, k, v.

    q: (B, Lq, D), k/v: (B, Lk, D). ``mask`` is boolean, broadcastable to
    (B, heads, Lq, Lk), True = keep.
    """
    B, Lq, D = q.shape
    Lk = k.shape[1]
    hd = D // n_heads
    q = q.reshape(B, Lq, n_heads, hd).transpose(1, 2)
    k = k.reshape(B, Lk, n_heads, hd).transpose(1, 2)
    v = v.reshape(B, Lk, n_heads, hd).transpose(1, 2)
    scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(B, Lq, D)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, n_heads, d_kv=None):
        super().__init__()
        if d_model % n_heads:
            raise ConfigurationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        d_kv = d_kv or d_model
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_kv, d_model)
        self.wv = nn.Linear(d_kv, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        out = attention(self.wq(x), self.wk(context), self.wv(context), self.n_heads, mask)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ff(self.ln2(x))


def _check_finite(x, layer):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations after layer {layer}", layer=layer)


class VisualEncoder(nn.Module):
    """Patch-embedding transformer; pixels in [0, 1] are normalised internally."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        if cfg.image_size % cfg.patch_size:
            raise ConfigurationError(
                f"image size {cfg.image_size} not divisible by patch size {cfg.patch_size}")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.d_model
        self.patch = nn.Linear(3 * cfg.patch_size ** 2, d)
        self.pos = nn.Parameter(torch.zeros(cfg.n_tokens, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)
        _init_weights(self, gen)

    @property
    def n_tokens(self):
        return self.cfg.n_tokens

    @property
    def d_out(self):
        return self.cfg.d_model

    def patchify(self, images):
        B, C, H, W = images.shape
        p, g = self.cfg.patch_size, self.cfg.grid
        x = images.reshape(B, C, g, p, g, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, C * p * p)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != 3 or \
                images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ConfigurationError(
                f"expected images (B, 3, {self.cfg.image_size}, {self.cfg.image_size}), "
                f"got {tuple(images.shape)}")
        x = (images - 0.5) / 0.25
        x = self.patch(self.patchify(x)) + self.pos
        for i, block in enumerate(self.blocks):
            x = block(x)
            _check_finite(x, i)
        x = self.out(self.norm(x))
        _check_finite(x, len(self.blocks))
        return x


class QFormerBlock(nn.Module):
    """Queries and instruction tokens self-attend jointly; only queries
    cross-attend to the visual tokens."""

    def __init__(self, d_model, n_heads, d_ff, d_visual):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ln_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, d_kv=d_visual)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, h, visual, n_queries, mask=None):
        h = h + self.self_attn(self.ln1(h), mask=mask)
        if n_queries:
            q = h[:, :n_queries]
            q = q + self.cross_attn(self.ln_cross(q), context=visual)
            h = torch.cat([q, h[:, n_queries:]], dim=1)
        return h + self.ff(self.ln2(h))


class CompressedProjector(nn.Module):
    """Query-token projector: always emits ``n_queries`` tokens."""

    kind = "compressed"

    def __init__(self, cfg: CompressedConfig = CompressedConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.d_model
        self.queries = nn.Parameter(torch.zeros(cfg.n_queries, d))
        self.text_embed = nn.Embedding(cfg.n_tokens, d)
        self.text_pos = nn.Parameter(torch.zeros(cfg.max_text_len, d))
        self.visual_norm = nn.LayerNorm(cfg.d_in)
        self.blocks = nn.ModuleList(
            QFormerBlock(d, cfg.n_heads, cfg.d_ff, cfg.d_in) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.d_out)
        _init_weights(self, gen)
        with torch.no_grad():
            self.queries.normal_(0.0, 1.0, generator=gen)

    @property
    def d_in(self):
        return self.cfg.d_in

    @property
    def d_out(self):
        return self.cfg.d_out

    def output_tokens(self, n_in: int) -> int:
        return self.cfg.n_queries

    def embed_instruction(self, ids):
        T = ids.shape[1]
        if T > self.cfg.max_text_len:
            raise ConfigurationError(f"instruction length {T} exceeds {self.cfg.max_text_len}")
        return self.text_embed(ids) + self.text_pos[:T]

    def forward(self, visual, instr=None):
        """visual: (B, N, d_in); instr: token ids (B, T) or embeddings (B, T, d)."""
        if visual.shape[-1] != self.cfg.d_in:
            raise ConfigurationError(
                f"compressed projector expects feature dim {self.cfg.d_in}, got {visual.shape[-1]}")
        B = visual.shape[0]
        h = self.queries.unsqueeze(0).expand(B, -1, -1)
        if instr is not None and self.cfg.instruction_conditioning:
            if not torch.is_floating_point(instr):
                instr = self.embed_instruction(instr)
            h = torch.cat([h, instr.to(h.dtype)], dim=1)
        visual = self.visual_norm(visual)
        for block in self.blocks:
            h = block(h, visual, self.cfg.n_queries)
        return self.out(self.norm(h[:, :self.cfg.n_queries]))

    def encode_text(self, ids):
        """Text-only pass through the shared transformer; masked mean over
        non-pad tokens -> (B, d_model)."""
        h = self.embed_instruction(ids)
        keep = ids != vocab.PAD
        mask = keep[:, None, None, :]
        for block in self.blocks:
            h = block(h, None, 0, mask=mask)
        h = self.norm(h)
        w = keep.unsqueeze(-1).to(h.dtype)
        return (h * w).sum(1) / w.sum(1).clamp_min(1.0)


def pool_tokens(visual, factor: int):
    """2-D mean pooling of a square token grid by ``factor`` along each side."""
    B, I, J = visual.shape
    side = math.isqrt(I)
    if side * side != I:
        raise ConfigurationError(f"token count {I} is not a square grid")
    if factor < 1 or side % factor:
        raise ConfigurationError(f"grid side {side} not divisible by pooling factor {factor}")
    if factor == 1:
        return visual
    g = side // factor
    x = visual.reshape(B, g, factor, g, factor, J)
    return x.mean(dim=(2, 4)).reshape(B, g * g, J)


class UncompressedProjector(nn.Module):
    """Pool the token grid, then apply a two-layer GELU MLP token-wise."""

    kind = "uncompressed"

    def __init__(self, cfg: UncompressedConfig = UncompressedConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.fc1 = nn.Linear(cfg.d_in, cfg.d_hidden)
        self.fc2 = nn.Linear(cfg.d_hidden, cfg.d_out)
        _init_weights(self, gen)

    @property
    def d_in(self):
        return self.cfg.d_in

    @property
    def d_out(self):
        return self.cfg.d_out

    @property
    def pool_factor(self):
        return self.cfg.pool_factor

    def output_tokens(self, n_in: int) -> int:
        return n_in // self.cfg.pool_factor ** 2

    def forward(self, visual, instr=None):
        if visual.shape[-1] != self.cfg.d_in:
            raise ConfigurationError(
                f"uncompressed projector expects feature dim {self.cfg.d_in}, got {visual.shape[-1]}")
        x = pool_tokens(visual, self.cfg.pool_factor)
        return self.fc2(F.gelu(self.fc1(x)))


class AnswerHead(nn.Module):
    """Toy language model: [instruction; visual] tokens -> one or more blocks ->
    mean pool -> answer logits."""

    def __init__(self, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.n_tokens, d)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_len, d))
        self.vis_in = nn.Linear(cfg.d_vis, d)
        self.type_embed = nn.Parameter(torch.zeros(2, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.answer = nn.Linear(d, cfg.n_answers)
        _init_weights(self, gen)

    @property
    def variant(self):
        return self.cfg.variant

    def embed_instruction(self, ids):
        return self.embed(ids) + self.pos[:ids.shape[1]]

    def forward(self, visual, instr):
        if visual.shape[-1] != self.cfg.d_vis:
            raise ConfigurationError(
                f"head expects visual dim {self.cfg.d_vis}, got {visual.shape[-1]}")
        if not torch.is_floating_point(instr):
            instr = self.embed_instruction(instr)
        v = self.vis_in(visual) + self.type_embed[1]
        t = instr.to(v.dtype) + self.type_embed[0]
        x = torch.cat([t, v], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.answer(self.norm(x.mean(dim=1)))


class ToyLVLM(nn.Module):
    def __init__(self, encoder: VisualEncoder, projector, head: AnswerHead):
        super().__init__()
        if projector.d_in != encoder.d_out:
            raise ConfigurationError(
                f"projector input dim {projector.d_in} != encoder output dim {encoder.d_out}")
        if head.cfg.d_vis != projector.d_out:
            raise ConfigurationError(
                f"head input dim {head.cfg.d_vis} != projector output dim {projector.d_out}")
        self.encoder = encoder
        self.projector = projector
        self.head = head

    def forward(self, images, questions):
        return forward_full(self, images, questions)


def encode_image(params: VisualEncoder, images):
    return params(images)


def project_compressed(params: CompressedProjector, visual, instr=None):
    if params.cfg.instruction_conditioning and instr is None:
        raise ConfigurationError("instruction-conditioned projector needs instruction tokens")
    return params(visual, instr)


def project_uncompressed(params: UncompressedProjector, visual):
    return params(visual)


def project(params, visual, instr=None):
    if isinstance(params, CompressedProjector):
        return project_compressed(params, visual, instr)
    return project_uncompressed(params, visual)


def forward_full(model: ToyLVLM, images, questions):
    """Answer logits for token-id questions (B, T)."""
    visual = encode_image(model.encoder, images)
    projected = project(model.projector, visual, questions)
    return model.head(projected, questions)


def _init_weights(module: nn.Module, gen: torch.Generator):
    """Seeded init: truncated-normal-ish linears, small positional tables."""
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 2 and ("pos" in name or name.endswith("type_embed")):
                p.normal_(0.0, 0.02, generator=gen)
            elif p.dim() == 2:
                std = 1.0 / math.sqrt(p.shape[1])
                p.normal_(0.0, std, generator=gen)
            elif p.dim() == 1:
                p.fill_(1.0)  # LayerNorm weights


PROJECTOR_TYPES = {"compressed": (CompressedProjector, CompressedConfig),
                   "uncompressed": (UncompressedProjector, UncompressedConfig)}


def build_projector(kind: str, **cfg):
    if kind not in PROJECTOR_TYPES:
        raise ConfigurationError(f"unknown projector kind {kind!r}")
    cls, cfg_cls = PROJECTOR_TYPES[kind]
    return cls(cfg_cls(**cfg))


def module_config(module) -> dict:
    return asdict(module.cfg)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
