"""Text-conditioned box proposal generator.

Frame -> patch tokens, sentence -> frozen token embeddings, language-guided
query selection, a stack of cross-modality decoder layers, then box and
confidence heads. Frames are handled independently so the same network
serves clip training and online, frame-by-frame inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import synthdata


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    num_queries: int = 8
    heads: int = 4
    layers: int = 6
    ffn_dim: int = 128
    stem_channels: int = 32
    vocab_size: int = len(synthdata.VOCAB)
    max_len: int = synthdata.MAX_LEN
    # seed of the frozen text table; stands in for pretrained weights
    text_seed: int = 20240
    zero_init_outputs: bool = False
    # 3x3 convolutions over the token grid so each token sees its neighbors
    context_layers: int = 1
    # layer norm between the decoder stack and the heads
    final_norm: bool = True
    # box head predicts offsets from an anchor at the seeding patch center
    anchored_boxes: bool = True
    anchor_size: float = 0.25
    # confidence logit includes the seeding token's text-similarity score
    score_coupled_confidence: bool = True

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2


@dataclass
class VisualTokens:
    tokens: torch.Tensor  # (B, N_v, D), positional encoding included


@dataclass
class TextTokens:
    tokens: torch.Tensor  # (L, D)
    pad_mask: torch.Tensor  # (L,) True at padding
    sentence_feature: torch.Tensor  # (D,)


@dataclass
class ObjectQuerySet:
    queries: torch.Tensor  # (B, N_q, D)
    provenance: torch.Tensor  # (B, N_q) visual token indices
    # text-similarity score of each seeding token, (B, N_q)
    scores: Optional[torch.Tensor] = None
    # current box estimate in logit space, (B, N_q, 4)
    reference: Optional[torch.Tensor] = None


@dataclass
class ProposalSet:
    boxes: torch.Tensor  # (..., N_q, 4) cxcywh in (0, 1)
    confidences: torch.Tensor  # (..., N_q) in (0, 1)
    confidence_logits: torch.Tensor

    def __len__(self):
        return self.boxes.shape[-2]

    def frame(self, t: int) -> "ProposalSet":
        return ProposalSet(self.boxes[t], self.confidences[t], self.confidence_logits[t])


@dataclass
class FrameOutput:
    proposals: ProposalSet
    box: torch.Tensor  # (4,)
    confidence: torch.Tensor  # ()
    index: int


def point_encoding(xy: torch.Tensor, dim: int) -> torch.Tensor:
    """Sine/cosine encoding of normalized (x, y) points, shape (..., dim)."""
    if dim % 4:
        raise ValueError("dim must be divisible by 4")
    nf = dim // 4
    freqs = math.pi * 2.0 ** torch.arange(nf, dtype=xy.dtype, device=xy.device) / 2.0
    parts = []
    for coord in (xy[..., 0], xy[..., 1]):
        ang = coord.unsqueeze(-1) * freqs
        parts += [ang.sin(), ang.cos()]
    return torch.cat(parts, dim=-1)


def patch_centers(grid: int) -> torch.Tensor:
    c = (torch.arange(grid, dtype=torch.float64) + 0.5) / grid
    ys, xs = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


class FrameBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stem = nn.Conv2d(3, cfg.stem_channels, 3, padding=1)
        self.patchify = nn.Conv2d(cfg.stem_channels, cfg.dim, cfg.patch, stride=cfg.patch)
        self.context = nn.ModuleList(nn.Conv2d(cfg.dim, cfg.dim, 3, padding=1)
                                     for _ in range(cfg.context_layers))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x):
        x = F.gelu(self.stem(x))
        x = self.patchify(x)
        for conv in self.context:
            x = x + conv(F.gelu(x))
        return self.norm(x.flatten(2).transpose(1, 2))


class FrozenTextEncoder(nn.Module):
    """Seeded token-embedding table, never updated."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = torch.Generator().manual_seed(cfg.text_seed)
        table = torch.randn(cfg.vocab_size, cfg.dim, generator=g)
        self.embedding = nn.Embedding.from_pretrained(table, freeze=True,
                                                      padding_idx=synthdata.PAD_ID)
        self.vocab_size = cfg.vocab_size

    def forward(self, token_ids) -> TextTokens:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.dim() != 1:
            raise ValueError("expected a single token-id sequence")
        if bool((ids < 0).any()) or bool((ids >= self.vocab_size).any()):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        tokens = self.embedding(ids)
        pad = ids == synthdata.PAD_ID
        keep = (~pad).to(tokens.dtype)
        z = (tokens * keep[:, None]).sum(0) / keep.sum().clamp(min=1)
        return TextTokens(tokens, pad, z)


class DecoderLayer(nn.Module):
    """Pre-norm block: self-attn, cross-attn to frame, cross-attn to text, FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.self_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.vis_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.txt_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d))
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(4))
        if cfg.zero_init_outputs:
            for proj in (self.self_attn.out_proj, self.vis_attn.out_proj,
                         self.txt_attn.out_proj, self.ffn[2]):
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)

    def forward(self, q, vis, txt, txt_pad):
        h = self.norms[0](q)
        q = q + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.norms[1](q)
        q = q + self.vis_attn(h, vis, vis, need_weights=False)[0]
        if not bool(txt_pad.all()):
            h = self.norms[2](q)
            mask = txt_pad.unsqueeze(0).expand(q.shape[0], -1)
            q = q + self.txt_attn(h, txt, txt, key_padding_mask=mask, need_weights=False)[0]
        return q + self.ffn(self.norms[3](q))


class MLP(nn.Module):
    def __init__(self, dims: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = F.relu(x)
        return x


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.image_size % cfg.patch:
            raise ValueError("image_size must be a multiple of patch")
        self.cfg = cfg
        self.backbone = FrameBackbone(cfg)
        grid = cfg.image_size // cfg.patch
        self.register_buffer("pos", point_encoding(patch_centers(grid), cfg.dim).float(),
                             persistent=False)
        self.text_encoder = FrozenTextEncoder(cfg)
        self.query_content = nn.Parameter(torch.zeros(cfg.num_queries, cfg.dim))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.decoder_norm = nn.LayerNorm(cfg.dim) if cfg.final_norm else nn.Identity()
        self.box_head = MLP([cfg.dim, cfg.dim, cfg.dim, 4])
        # proposals start exactly at their anchors
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)
        self.conf_head = nn.Linear(cfg.dim, 1)
        centers = patch_centers(grid)
        anchors = torch.cat([centers, torch.full_like(centers, cfg.anchor_size)], dim=-1)
        self.register_buffer("anchor_logits", torch.logit(anchors).float(), persistent=False)

    # parameter partition -------------------------------------------------
    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def frozen_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    # pipeline stages -----------------------------------------------------
    def _frames_to_tensor(self, frames) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        n = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (n, n, 3):
            raise ValueError(f"expected frames of shape (B, {n}, {n}, 3), got {tuple(x.shape)}")
        dtype = self.query_content.dtype
        return (x.to(dtype) / 255.0 - 0.5).permute(0, 3, 1, 2).contiguous()

    def encode_frame(self, frames) -> VisualTokens:
        x = self._frames_to_tensor(frames)
        tokens = self.backbone(x) + self.pos.to(x.dtype)
        return VisualTokens(tokens)

    def encode_text(self, token_ids) -> TextTokens:
        txt = self.text_encoder(token_ids)
        dtype = self.query_content.dtype
        return TextTokens(txt.tokens.to(dtype), txt.pad_mask, txt.sentence_feature.to(dtype))

    def generate_queries(self, vis: VisualTokens, txt: TextTokens) -> ObjectQuerySet:
        nq = self.cfg.num_queries
        tokens = vis.tokens
        if nq > tokens.shape[1]:
            raise ValueError(f"num_queries {nq} exceeds {tokens.shape[1]} visual tokens")
        score = token_scores(tokens, txt.tokens, txt.pad_mask)
        idx = top_indices(score.detach(), nq)
        picked = torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))
        ref = self.anchor_logits.to(tokens.dtype)[idx] if self.cfg.anchored_boxes else None
        return ObjectQuerySet(picked + self.query_content, idx, torch.gather(score, 1, idx), ref)

    def cross_modality_decode(self, q: ObjectQuerySet, vis: VisualTokens, txt: TextTokens,
                              text_mask: Optional[torch.Tensor] = None) -> ObjectQuerySet:
        pad = txt.pad_mask if text_mask is None else (txt.pad_mask | text_mask)
        B = q.queries.shape[0]
        t = txt.tokens.unsqueeze(0).expand(B, -1, -1)
        x = q.queries
        for layer in self.decoder:
            x = layer(x, vis.tokens, t, pad)
        return ObjectQuerySet(x, q.provenance, q.scores, q.reference)

    def predict_proposals(self, q: ObjectQuerySet) -> ProposalSet:
        x = self.decoder_norm(q.queries)
        box_logits = self.box_head(x)
        if q.reference is not None:
            box_logits = box_logits + q.reference
        boxes = torch.sigmoid(box_logits)
        logits = self.conf_head(x).squeeze(-1)
        if self.cfg.score_coupled_confidence and q.scores is not None:
            logits = logits + q.scores
        return ProposalSet(boxes, torch.sigmoid(logits), logits)

    def forward(self, frames, txt: TextTokens) -> ProposalSet:
        """Batched per-frame forward; frames never interact."""
        vis = self.encode_frame(frames)
        q = self.generate_queries(vis, txt)
        q = self.cross_modality_decode(q, vis, txt)
        return self.predict_proposals(q)

    def forward_clip(self, frames, token_ids) -> list[FrameOutput]:
        """Online processing: one frame at a time, text encoded once."""
        txt = self.encode_text(token_ids)
        out = []
        for t in range(len(frames)):
            p = self(frames[t], txt).frame(0)
            box, conf, k = select_top(p)
            out.append(FrameOutput(p, box, conf, k))
        return out


def token_scores(vis: torch.Tensor, txt: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
    """Max scaled dot product of each visual token with any non-pad text token, (B, N_v)."""
    sim = vis @ txt.transpose(0, 1) / math.sqrt(vis.shape[-1])
    sim = sim.masked_fill(pad[None, None, :], float("-inf"))
    return sim.max(dim=-1).values


def top_indices(score: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest scores; ties go to the lower index."""
    return torch.sort(score, dim=-1, descending=True, stable=True).indices[:, :k]


def select_query_indices(vis: torch.Tensor, txt: torch.Tensor, pad: torch.Tensor,
                         k: int) -> torch.Tensor:
    return top_indices(token_scores(vis, txt, pad), k)


def select_top(p: ProposalSet):
    """Highest-confidence proposal of one frame; ties go to the lowest index."""
    if len(p) == 0:
        raise ValueError("empty proposal set")
    k = int(torch.argmax(p.confidence_logits))
    return p.boxes[k], p.confidences[k], k


def build_model(cfg: Optional[ModelConfig] = None, seed: int = 0) -> GroundingModel:
    cfg = cfg or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GroundingModel(cfg)
