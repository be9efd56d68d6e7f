"""Dataclass configs for corpus generation, model, losses, and training."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class CorpusConfig:
    """Knobs for the synthetic person/caption corpus.

    ``verbosity_min``/``verbosity_max`` bound the number of words per caption
    (the tokenized length adds one for the leading CLS token). Varying caption
    length is what makes per-pair adaptive margins differ within a batch.
    """

    num_identities: int = 32
    images_per_identity: int = 4
    captions_per_image: int = 2
    num_test_identities: int = 8
    grid_size: int = 4
    verbosity_min: int = 10
    verbosity_max: int = 24
    noise_vocab_size: int = 8
    occlusion_prob: float = 0.15

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")
        if self.images_per_identity < 1 or self.captions_per_image < 1:
            raise ValueError("need at least one image and one caption per identity")
        if not 0 <= self.num_test_identities < self.num_identities:
            raise ValueError("num_test_identities must leave at least one train identity")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.verbosity_min > self.verbosity_max:
            raise ValueError("verbosity range has min > max")
        if self.verbosity_min < 1:
            raise ValueError("verbosity_min must be >= 1")
        if self.noise_vocab_size < 1:
            raise ValueError("noise_vocab_size must be >= 1")


@dataclass
class EncoderConfig:
    """Shared architecture knobs for the toy image/text transformer encoders.

    ``max_image_tokens`` must equal grid_size**2 + 1 (patches plus CLS).
    Defaults are sized for fast CPU runs; the full-scale counterparts would be
    embed_dim 768 with sequence lengths 197 and 100.
    """

    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    max_image_tokens: int = 17
    max_text_tokens: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.max_image_tokens < 2 or self.max_text_tokens < 1:
            raise ValueError("token capacities too small")


@dataclass
class SewConfig:
    """Margin and scale settings for the pull/push matching and
    projection-classification losses.

    With ``margin_mode="adaptive"`` each pair's margin is interpolated from
    its caption token length between (margin_min, margin_max) over
    (len_min, len_max) and clamped to the margin bounds outside that interval.
    ``count_special_tokens`` controls whether the CLS token counts toward the
    caption length used for margin interpolation.
    """

    alpha: float = 32.0
    margin_min: float = 0.4
    margin_max: float = 0.6
    len_min: int = 11
    len_max: int = 25
    margin_mode: str = "adaptive"
    fixed_margin: float = 0.5
    count_special_tokens: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.margin_min > self.margin_max:
            raise ValueError("margin_min must be <= margin_max")
        if self.len_min >= self.len_max:
            raise ValueError("len_min must be < len_max")
        if self.margin_mode not in ("adaptive", "fixed"):
            raise ValueError("margin_mode must be 'adaptive' or 'fixed'")


@dataclass
class MCMConfig:
    """Masked caption prediction settings."""

    mask_ratio: float = 0.1
    decoder_blocks: int = 1
    vocab_size: int = 0
    force_min_one: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be >= 1")


@dataclass
class TrainConfig:
    """Training loop settings, including the ablation switches.

    ``mask_only`` masks captions but skips the decoder and its loss (text
    random-erase behaviour); ``attn_only`` runs the decoder without masking or
    prediction loss. Both require ``mcm_on``.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sew_on: bool = True
    mcm_on: bool = True
    mask_only: bool = False
    attn_only: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sew_on and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when the matching loss is enabled")
        if self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even (identity-balanced Px2 sampling)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mask_only and self.attn_only:
            raise ValueError("mask_only and attn_only are mutually exclusive")
        if (self.mask_only or self.attn_only) and not self.mcm_on:
            raise ValueError("mask_only/attn_only are variants of the caption-modeling branch; set mcm_on")


def config_as_dict(cfg) -> dict:
    return asdict(cfg)
