"""Full trainable model: dual encoder, CLS BatchNorms, classifier, decoder.

Parameter bookkeeping contract: the flat parameter view concatenates all
trainable arrays in ascending name order (as reported by named_parameters),
each flattened row-major. BatchNorm running statistics are buffers, present
in checkpoints but not in the flat view.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .configs import EncoderConfig
from .data_synth import SyntheticPersonImage, TokenizedCaption
from .encoders import EmbeddingBatch, ImageEncoder, TextEncoder, captions_to_tensor, images_to_tensor
from .layers import DTYPE, ModalityBatchNorm
from .mcm import CrossModalDecoder, MaskPlan


class PersonSearchModel(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, word_vocab_size: int,
                 patch_vocab_size: int, num_classes: int, decoder_blocks: int = 1):
        super().__init__()
        d = encoder_cfg.embed_dim
        self.encoder_cfg = encoder_cfg
        self.word_vocab_size = word_vocab_size
        self.patch_vocab_size = patch_vocab_size
        self.num_classes = num_classes
        self.decoder_blocks = decoder_blocks

        self.image_encoder = ImageEncoder(encoder_cfg, patch_vocab_size)
        self.text_encoder = TextEncoder(encoder_cfg, word_vocab_size)
        self.image_bn = ModalityBatchNorm(d)
        self.text_bn = ModalityBatchNorm(d)
        self.classifier_weight = nn.Parameter(torch.zeros(num_classes, d, dtype=DTYPE))
        self.mask_token = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.decoder = CrossModalDecoder(d, encoder_cfg.heads, decoder_blocks, word_vocab_size)

    # ----- forward pieces -------------------------------------------------

    def encode_image(self, images: list[SyntheticPersonImage] | torch.Tensor):
        """Returns (cls [n, d], seq [n, c1, d])."""
        if not isinstance(images, torch.Tensor):
            grid = self.encoder_cfg.max_image_tokens - 1
            side = int(grid ** 0.5)
            images = images_to_tensor(images, side)
        seq = self.image_encoder(images)
        return seq[:, 0], seq

    def encode_text(self, captions: list[TokenizedCaption], mask_plan: MaskPlan | None = None):
        """Returns (cls [n, d], seq [n, c2, d], lengths [n])."""
        ids, lengths = captions_to_tensor(captions, self.encoder_cfg.max_text_tokens)
        mask_positions = None
        if mask_plan is not None:
            mask_positions = mask_plan.position_mask(len(captions), self.encoder_cfg.max_text_tokens)
        seq = self.text_encoder(ids, lengths, mask_positions, self.mask_token)
        return seq[:, 0], seq, lengths

    def batchnorm_cls(self, image_cls: torch.Tensor, text_cls: torch.Tensor,
                      train: bool, update_running_stats: bool = True):
        """Per-modality BatchNorm on the two CLS streams (separate statistics)."""
        return (self.image_bn(image_cls, train, update_running_stats),
                self.text_bn(text_cls, train, update_running_stats))

    def decode(self, text_seq: torch.Tensor, image_seq: torch.Tensor,
               lengths: torch.Tensor) -> torch.Tensor:
        return self.decoder(text_seq, image_seq, lengths)

    def embed_batch(self, images: list[SyntheticPersonImage], captions: list[TokenizedCaption],
                    labels: torch.Tensor, mask_plan: MaskPlan | None = None,
                    bn_train: bool | None = None) -> EmbeddingBatch:
        """Run both encoders; apply CLS BatchNorm when bn_train is not None."""
        image_cls, image_seq = self.encode_image(images)
        text_cls, text_seq, lengths = self.encode_text(captions, mask_plan)
        if bn_train is not None:
            image_cls, text_cls = self.batchnorm_cls(image_cls, text_cls, train=bn_train)
        return EmbeddingBatch(image_cls=image_cls, text_cls=text_cls,
                              image_seq=image_seq, text_seq=text_seq,
                              labels=labels, caption_lengths=lengths)

    # ----- parameter bookkeeping -------------------------------------------

    def sorted_parameter_names(self) -> list[str]:
        return sorted(name for name, _ in self.named_parameters())

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_params(self) -> torch.Tensor:
        params = dict(self.named_parameters())
        return torch.cat([params[n].detach().reshape(-1) for n in self.sorted_parameter_names()])

    def set_flat_params(self, vec: torch.Tensor) -> None:
        params = dict(self.named_parameters())
        offset = 0
        with torch.no_grad():
            for name in self.sorted_parameter_names():
                p = params[name]
                p.copy_(vec[offset:offset + p.numel()].reshape(p.shape))
                offset += p.numel()
        if offset != vec.numel():
            raise ValueError(f"flat vector length {vec.numel()} != parameter count {offset}")

    def flat_grad(self) -> torch.Tensor:
        params = dict(self.named_parameters())
        chunks = []
        for name in self.sorted_parameter_names():
            p = params[name]
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            chunks.append(g.reshape(-1))
        return torch.cat(chunks)

    def meta(self) -> dict:
        return {
            "encoder": {
                "embed_dim": self.encoder_cfg.embed_dim,
                "depth": self.encoder_cfg.depth,
                "heads": self.encoder_cfg.heads,
                "max_image_tokens": self.encoder_cfg.max_image_tokens,
                "max_text_tokens": self.encoder_cfg.max_text_tokens,
                "mlp_ratio": self.encoder_cfg.mlp_ratio,
            },
            "word_vocab_size": self.word_vocab_size,
            "patch_vocab_size": self.patch_vocab_size,
            "num_classes": self.num_classes,
            "decoder_blocks": self.decoder_blocks,
        }


def init_params(encoder_cfg: EncoderConfig, word_vocab_size: int, patch_vocab_size: int,
                num_classes: int, decoder_blocks: int, seed: int) -> PersonSearchModel:
    """Deterministic model init.

    Scheme: biases zero; LayerNorm/BatchNorm scale 1, shift 0; every other
    array is uniform on (-1/sqrt(fan), 1/sqrt(fan)) with fan = last dim,
    drawn from one seeded generator in ascending parameter-name order.
    """
    model = PersonSearchModel(encoder_cfg, word_vocab_size, patch_vocab_size,
                              num_classes, decoder_blocks)
    norm_weight_ids = set()
    for module in model.modules():
        if isinstance(module, (nn.LayerNorm, ModalityBatchNorm)):
            norm_weight_ids.add(id(module.weight))
    gen = torch.Generator().manual_seed(seed)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name in model.sorted_parameter_names():
            p = params[name]
            if id(p) in norm_weight_ids:
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                bound = p.shape[-1] ** -0.5
                p.uniform_(-bound, bound, generator=gen)
    return model


def model_from_meta(meta: dict) -> PersonSearchModel:
    cfg = EncoderConfig(**meta["encoder"])
    return PersonSearchModel(cfg, meta["word_vocab_size"], meta["patch_vocab_size"],
                             meta["num_classes"], meta["decoder_blocks"])
