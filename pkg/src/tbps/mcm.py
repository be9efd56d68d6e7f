"""Masked caption modeling: token masking, cross-modal decoder, prediction loss.

Masking keeps the token ids intact and records positions; the text encoder
substitutes the learnable mask vector at those positions. The decoder is a
separate parameter group ("decoder." prefix in checkpoints) so it can be
stripped for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .configs import MCMConfig
from .data_synth import TokenizedCaption
from .layers import DTYPE, MultiheadAttention


@dataclass
class MaskPlan:
    """Masked positions (sorted, per caption) and the token ids they held.

    Positions never include the CLS slot (index 0) or padding.
    """

    masked_positions: list[list[int]]
    original_ids: list[list[int]]

    def __post_init__(self):
        if len(self.masked_positions) != len(self.original_ids):
            raise ValueError("positions and ids must be parallel lists")
        for pos, ids in zip(self.masked_positions, self.original_ids):
            if len(pos) != len(ids):
                raise ValueError("positions and ids must be parallel per caption")
            if sorted(set(pos)) != pos:
                raise ValueError("masked positions must be sorted and unique")
            if pos and pos[0] < 1:
                raise ValueError("CLS position cannot be masked")

    def total_masked(self) -> int:
        return sum(len(p) for p in self.masked_positions)

    def position_mask(self, n: int, width: int) -> torch.Tensor:
        out = torch.zeros(n, width, dtype=torch.bool)
        for i, positions in enumerate(self.masked_positions):
            for p in positions:
                out[i, p] = True
        return out


def mask_captions(captions: list[TokenizedCaption], cfg: MCMConfig,
                  seed: int | list[int]) -> tuple[list[TokenizedCaption], MaskPlan]:
    """Select content tokens to mask, independently with probability mask_ratio.

    Token ids are returned unchanged (substitution happens at the embedding
    layer). Captions with no content tokens contribute no positions. With
    ``force_min_one`` a caption that drew no mask gets one uniform content
    position, so every caption with content yields a prediction target.
    """
    rng = np.random.default_rng(seed)
    positions: list[list[int]] = []
    originals: list[list[int]] = []
    for cap in captions:
        content = list(range(1, cap.length))
        if not content:
            positions.append([])
            originals.append([])
            continue
        draws = rng.random(len(content))
        chosen = [p for p, u in zip(content, draws) if u < cfg.mask_ratio]
        if not chosen and cfg.force_min_one:
            chosen = [int(rng.integers(1, cap.length))]
        positions.append(chosen)
        originals.append([cap.token_ids[p] for p in chosen])
    return captions, MaskPlan(masked_positions=positions, original_ids=originals)


class DecoderBlock(nn.Module):
    """Residual text self-attention followed by residual text-to-image cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln_self = nn.LayerNorm(dim, dtype=DTYPE)
        self.self_attn = MultiheadAttention(dim, heads)
        self.ln_cross = nn.LayerNorm(dim, dtype=DTYPE)
        self.cross_attn = MultiheadAttention(dim, heads)

    def forward(self, x: torch.Tensor, image_ctx: torch.Tensor,
                text_key_mask: torch.Tensor) -> torch.Tensor:
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, key_mask=text_key_mask)
        x = x + self.cross_attn(self.ln_cross(x), image_ctx)
        return x


class CrossModalDecoder(nn.Module):
    """Stack of decoder blocks plus a linear projection onto the word vocabulary.

    Operates on content tokens only (both CLS slots are stripped, mirroring
    the training pipeline's content-token handoff); the emitted logits tensor
    still covers every text position, with zeros at the CLS slot and at
    padding so downstream indexing stays aligned with the encoder.
    """

    def __init__(self, dim: int, heads: int, blocks: int, vocab_size: int):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads) for _ in range(blocks))
        self.ln_f = nn.LayerNorm(dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, vocab_size, dtype=DTYPE)

    def forward(self, text_seq: torch.Tensor, image_seq: torch.Tensor,
                lengths: torch.Tensor) -> torch.Tensor:
        if text_seq.shape[0] != image_seq.shape[0] or text_seq.shape[2] != image_seq.shape[2]:
            raise ValueError("text and image sequences must agree on batch and feature dims")
        n, c2, _ = text_seq.shape
        x = text_seq[:, 1:]
        image_ctx = image_seq[:, 1:]
        content_valid = torch.arange(1, c2)[None, :] < lengths[:, None]
        for block in self.blocks:
            x = block(x, image_ctx, content_valid)
        logits = self.proj(self.ln_f(x))
        logits = logits * content_valid.to(logits.dtype)[:, :, None]
        cls_row = torch.zeros(n, 1, logits.shape[-1], dtype=logits.dtype)
        return torch.cat([cls_row, logits], dim=1)


def mcm_loss(logits: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Mean cross-entropy of the masked positions against their original ids."""
    rows, cols, targets = [], [], []
    for i, (positions, ids) in enumerate(zip(plan.masked_positions, plan.original_ids)):
        for p, t in zip(positions, ids):
            if p >= logits.shape[1]:
                raise ValueError(f"masked position {p} outside logits width {logits.shape[1]}")
            rows.append(i)
            cols.append(p)
            targets.append(t)
    if not rows:
        return torch.zeros((), dtype=logits.dtype)
    picked = logits[torch.tensor(rows), torch.tensor(cols)]
    return F.cross_entropy(picked, torch.tensor(targets))


def masked_token_accuracy(logits: torch.Tensor, plan: MaskPlan) -> float:
    """Top-1 accuracy over the masked positions; NaN when nothing is masked."""
    total = plan.total_masked()
    if total == 0:
        return float("nan")
    hits = 0
    for i, (positions, ids) in enumerate(zip(plan.masked_positions, plan.original_ids)):
        for p, t in zip(positions, ids):
            hits += int(torch.argmax(logits[i, p]).item() == t)
    return hits / total
