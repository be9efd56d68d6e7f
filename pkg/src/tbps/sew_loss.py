"""Margin-calibrated cross-modal matching and classification losses.

The matching side softly enforces, per anchor, that the paired sample beats
all same-identity candidates by a margin (pull) and that every same-identity
candidate beats every different-identity candidate by a margin (push). The
classification side projects one modality's CLS feature onto its partner's
normalized feature and classifies the projection against row-normalized
class weights with an additive margin on the target logit.

Margins are either fixed or interpolated per pair from the caption token
length between configured bounds (longer caption, larger margin), clamped at
the bounds outside the configured length interval.

All reductions use max-shifted log-sum-exp; with scale 32 and margins up to
0.6 the raw exponents overflow narrower arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .configs import SewConfig
from .encoders import EmbeddingBatch

_NEG_SENTINEL = -1e30


def _softplus_exact(x: torch.Tensor) -> torch.Tensor:
    """log(1 + exp(x)) without the linearization cutoff of F.softplus.

    F.softplus drops the log1p correction above its threshold, which is a
    ~1e-9 error in the range these losses reach at scale 32; the exact form
    max(x, 0) + log1p(exp(-|x|)) keeps full float64 precision and still
    cannot overflow.
    """
    return x.clamp_min(0.0) + torch.log1p(torch.exp(-x.abs()))


@dataclass
class SewLossOutput:
    pull_i2t: float
    push_i2t: float
    pull_t2i: float
    push_t2i: float
    cls_i2t: float
    cls_t2i: float
    total: float
    total_tensor: torch.Tensor
    grad_image_cls: torch.Tensor | None = None
    grad_text_cls: torch.Tensor | None = None
    grad_classifier: torch.Tensor | None = None


def adaptive_margin(length: int, cfg: SewConfig) -> float:
    """Per-pair margin, linear in caption length, clamped to the margin bounds."""
    span = cfg.len_max - cfg.len_min
    raw = cfg.margin_min + (cfg.margin_max - cfg.margin_min) * (length - cfg.len_min) / span
    return min(max(raw, cfg.margin_min), cfg.margin_max)


def margin_vector(caption_lengths: torch.Tensor, cfg: SewConfig) -> torch.Tensor:
    """Margins for a batch; honors margin_mode and the special-token flag."""
    if cfg.margin_mode == "fixed":
        return torch.full(caption_lengths.shape, cfg.fixed_margin, dtype=torch.float64)
    lengths = caption_lengths if cfg.count_special_tokens else caption_lengths - 1
    return torch.tensor([adaptive_margin(int(t), cfg) for t in lengths], dtype=torch.float64)


def pull_loss(anchor_sim, positive_sims, margin: float, alpha: float) -> torch.Tensor:
    """log(1 + sum_k exp(alpha * (sim_k - anchor + margin))); 0 when K = 0."""
    anchor_sim = torch.as_tensor(anchor_sim, dtype=torch.float64)
    positive_sims = torch.as_tensor(positive_sims, dtype=torch.float64)
    if positive_sims.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    z = alpha * (positive_sims - anchor_sim + margin)
    return _softplus_exact(torch.logsumexp(z, dim=0))


def push_loss(positive_sims, negative_sims, margin: float, alpha: float) -> torch.Tensor:
    """log(1 + sum_k sum_j exp(alpha * (neg_j - pos_k + margin))); 0 when J = 0.

    The double sum factorizes, so the log-sum-exp splits into one term per
    side. An empty positive set is the caller's concern (the batch loss
    substitutes the anchor pair similarity).
    """
    positive_sims = torch.as_tensor(positive_sims, dtype=torch.float64)
    negative_sims = torch.as_tensor(negative_sims, dtype=torch.float64)
    if negative_sims.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    if positive_sims.numel() == 0:
        raise ValueError("push_loss needs at least one positive similarity")
    lse_neg = torch.logsumexp(alpha * (negative_sims + margin), dim=0)
    lse_pos = torch.logsumexp(-alpha * positive_sims, dim=0)
    return _softplus_exact(lse_neg + lse_pos)


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm {what} row cannot be normalized")
    return x / norms


def _masked_lse(z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row-wise logsumexp over masked-in entries; -1e30 rows signal empty sets."""
    return torch.logsumexp(torch.where(mask, z, torch.full_like(z, _NEG_SENTINEL)), dim=1)


def _matching_components(anchor_feats: torch.Tensor, cand_feats: torch.Tensor,
                         labels: torch.Tensor, margins: torch.Tensor,
                         alpha: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor pull/push means; row i of each input is the paired sample i."""
    a = _unit_rows(anchor_feats, "anchor embedding")
    c = _unit_rows(cand_feats, "candidate embedding")
    sims = a @ c.T
    n = sims.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~eye
    neg_mask = ~same
    anchor = sims.diagonal()

    zero = torch.zeros((), dtype=sims.dtype)
    pull_z = alpha * (sims - anchor[:, None] + margins[:, None])
    pull_rows = torch.where(pos_mask.any(dim=1), _softplus_exact(_masked_lse(pull_z, pos_mask)), zero)

    # empty positive sets fall back to the anchor pair itself
    pos_for_push = pos_mask | (~pos_mask.any(dim=1))[:, None] & eye
    lse_neg = _masked_lse(alpha * (sims + margins[:, None]), neg_mask)
    lse_pos = _masked_lse(-alpha * sims, pos_for_push)
    push_rows = torch.where(neg_mask.any(dim=1), _softplus_exact(lse_neg + lse_pos), zero)

    return pull_rows.mean(), push_rows.mean()


def matching_loss(image_cls: torch.Tensor, text_cls: torch.Tensor, labels: torch.Tensor,
                  margins: torch.Tensor, cfg: SewConfig, direction: str) -> torch.Tensor:
    """Batch-mean pull + push for one retrieval direction.

    Row i of both feature matrices is pair i. ``direction="i2t"`` anchors
    images against text candidates; ``"t2i"`` transposes the roles. The same
    per-pair margins apply to both directions.
    """
    pull, push = _matching_direction(image_cls, text_cls, labels, margins, cfg.alpha, direction)
    return pull + push


def _matching_direction(image_cls, text_cls, labels, margins, alpha, direction):
    if direction == "i2t":
        return _matching_components(image_cls, text_cls, labels, margins, alpha)
    if direction == "t2i":
        return _matching_components(text_cls, image_cls, labels, margins, alpha)
    raise ValueError(f"unknown direction {direction!r}")


def project(v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Projection of v onto the direction of t: (v . t_hat) t_hat."""
    norm = torch.linalg.vector_norm(t)
    if norm == 0:
        raise ValueError("cannot project onto a zero vector")
    t_hat = t / norm
    return (v @ t_hat) * t_hat


def classification_loss(cls_features: torch.Tensor, partner_features: torch.Tensor,
                        labels: torch.Tensor, weight: torch.Tensor, margins: torch.Tensor,
                        alpha: float, direction: str = "i2t") -> torch.Tensor:
    """Margin softmax over projected features against normalized class weights.

    ``cls_features`` are image CLS rows and ``partner_features`` text CLS rows;
    ``direction="i2t"`` projects image onto text, ``"t2i"`` swaps the roles.
    The margin is subtracted from the target logit only, then all logits are
    scaled by alpha. Both directions share the same raw ``weight``.
    """
    if direction == "t2i":
        cls_features, partner_features = partner_features, cls_features
    elif direction != "i2t":
        raise ValueError(f"unknown direction {direction!r}")
    num_classes = weight.shape[0]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels must lie in [0, num_classes)")
    partner_hat = _unit_rows(partner_features, "partner feature")
    projected = (cls_features * partner_hat).sum(dim=1, keepdim=True) * partner_hat
    weight_hat = _unit_rows(weight, "classifier weight")
    logits = projected @ weight_hat.T
    target_onehot = F.one_hot(labels, num_classes).to(logits.dtype)
    z = alpha * (logits - margins[:, None] * target_onehot)
    return F.cross_entropy(z, labels)


def sew_total(batch: EmbeddingBatch, weight: torch.Tensor, cfg: SewConfig,
              with_grads: bool = False) -> SewLossOutput:
    """All six components plus their sum.

    ``total_tensor`` stays attached to the caller's autograd graph; with
    ``with_grads`` the output additionally carries gradients of the total
    with respect to the two CLS matrices and the classifier weight, evaluated
    at the given values.
    """
    image_cls, text_cls = batch.image_cls, batch.text_cls
    if with_grads:
        image_cls = image_cls.detach().clone().requires_grad_(True)
        text_cls = text_cls.detach().clone().requires_grad_(True)
        weight = weight.detach().clone().requires_grad_(True)

    margins = margin_vector(batch.caption_lengths, cfg)
    pull_i2t, push_i2t = _matching_direction(image_cls, text_cls, batch.labels, margins, cfg.alpha, "i2t")
    pull_t2i, push_t2i = _matching_direction(image_cls, text_cls, batch.labels, margins, cfg.alpha, "t2i")
    cls_i2t = classification_loss(image_cls, text_cls, batch.labels, weight, margins, cfg.alpha, "i2t")
    cls_t2i = classification_loss(image_cls, text_cls, batch.labels, weight, margins, cfg.alpha, "t2i")
    total_tensor = pull_i2t + push_i2t + pull_t2i + push_t2i + cls_i2t + cls_t2i

    grads = (None, None, None)
    if with_grads:
        grads = torch.autograd.grad(total_tensor, [image_cls, text_cls, weight])

    components = [float(x.detach()) for x in (pull_i2t, push_i2t, pull_t2i, push_t2i, cls_i2t, cls_t2i)]
    return SewLossOutput(*components, total=sum(components), total_tensor=total_tensor,
                         grad_image_cls=grads[0], grad_text_cls=grads[1], grad_classifier=grads[2])
