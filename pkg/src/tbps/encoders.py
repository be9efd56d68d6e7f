"""Toy dual-encoder: patch-grid image transformer and word-id text transformer.

Both encoders operate strictly per sample (no cross-batch reductions), so a
sample's pre-BatchNorm embedding is bitwise independent of its batchmates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .configs import EncoderConfig
from .data_synth import SyntheticPersonImage, TokenizedCaption
from .layers import DTYPE, TransformerBlock


@dataclass
class EmbeddingBatch:
    """Per-batch encoder outputs plus labels and caption lengths."""

    image_cls: torch.Tensor   # [n, d]
    text_cls: torch.Tensor    # [n, d]
    image_seq: torch.Tensor   # [n, c1, d], position 0 is the CLS slot
    text_seq: torch.Tensor    # [n, c2, d], position 0 is the CLS slot
    labels: torch.Tensor      # [n] int64
    caption_lengths: torch.Tensor  # [n] int64

    def __post_init__(self):
        n = self.image_cls.shape[0]
        for t in (self.text_cls, self.image_seq, self.text_seq, self.labels, self.caption_lengths):
            if t.shape[0] != n:
                raise ValueError("all EmbeddingBatch fields must share the batch dimension")
        if (self.caption_lengths < 1).any():
            raise ValueError("caption lengths must be >= 1")


def images_to_tensor(images: list[SyntheticPersonImage], grid_size: int) -> torch.Tensor:
    ids = []
    for im in images:
        if len(im.patch_tokens) != grid_size or any(len(r) != grid_size for r in im.patch_tokens):
            raise ValueError(f"image grid does not match configured size {grid_size}")
        ids.append([t for row in im.patch_tokens for t in row])
    return torch.tensor(ids, dtype=torch.int64)


def captions_to_tensor(captions: list[TokenizedCaption], max_text_tokens: int,
                       pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad token ids to the fixed text capacity; returns (ids, lengths)."""
    n = len(captions)
    ids = torch.full((n, max_text_tokens), pad_id, dtype=torch.int64)
    lengths = torch.zeros(n, dtype=torch.int64)
    for i, cap in enumerate(captions):
        if cap.length > max_text_tokens:
            raise ValueError(f"caption length {cap.length} exceeds capacity {max_text_tokens}")
        ids[i, :cap.length] = torch.tensor(cap.token_ids, dtype=torch.int64)
        lengths[i] = cap.length
    return ids, lengths


class ImageEncoder(nn.Module):
    """Patch-id embedding + learned CLS vector + positional embedding + blocks."""

    def __init__(self, cfg: EncoderConfig, patch_vocab_size: int):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.embed = nn.Embedding(patch_vocab_size, d, dtype=DTYPE)
        self.cls_vec = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.pos = nn.Parameter(torch.zeros(cfg.max_image_tokens, d, dtype=DTYPE))
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(d, dtype=DTYPE)

    def forward(self, patch_ids: torch.Tensor) -> torch.Tensor:
        n, n_patches = patch_ids.shape
        if n_patches + 1 != self.cfg.max_image_tokens:
            raise ValueError(f"got {n_patches} patches; config expects {self.cfg.max_image_tokens - 1}")
        tok = self.embed(patch_ids)
        cls = self.cls_vec.expand(n, 1, -1)
        x = torch.cat([cls, tok], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class TextEncoder(nn.Module):
    """Word-id embedding + positional embedding + key-masked blocks.

    Position 0 must carry the CLS word id. Masked positions (from the caption
    masking plan) get the supplied mask vector instead of their word
    embedding; the ids themselves are left untouched. Rows at or beyond a
    caption's length are zeroed in the output.
    """

    def __init__(self, cfg: EncoderConfig, word_vocab_size: int):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.embed = nn.Embedding(word_vocab_size, d, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_tokens, d, dtype=DTYPE))
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(d, dtype=DTYPE)

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor,
                mask_positions: torch.Tensor | None = None,
                mask_vector: torch.Tensor | None = None) -> torch.Tensor:
        n, c2 = token_ids.shape
        if c2 != self.cfg.max_text_tokens:
            raise ValueError(f"token tensor width {c2} must equal capacity {self.cfg.max_text_tokens}")
        tok = self.embed(token_ids)
        if mask_positions is not None:
            if mask_vector is None:
                raise ValueError("mask_positions requires the learnable mask vector")
            tok = torch.where(mask_positions[:, :, None], mask_vector.expand(n, c2, -1), tok)
        x = tok + self.pos
        valid = torch.arange(c2)[None, :] < lengths[:, None]
        for block in self.blocks:
            x = block(x, key_mask=valid)
        x = self.ln_f(x)
        return x * valid.to(x.dtype)[:, :, None]
