"""Training loop, loss composition, identity-balanced sampling, gradient checks."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .configs import CorpusConfig, EncoderConfig, MCMConfig, SewConfig, TrainConfig
from .data_synth import Corpus, generate_corpus
from .encoders import EmbeddingBatch
from .mcm import CrossModalDecoder, MaskPlan, mask_captions, masked_token_accuracy, mcm_loss
from .model import PersonSearchModel, init_params
from .sew_loss import SewLossOutput, classification_loss, sew_total


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite during training."""


@dataclass
class StepLosses:
    sew: SewLossOutput | None
    mcm: float
    total: float
    total_tensor: torch.Tensor
    masked_count: int = 0


@dataclass
class StepRecord:
    epoch: int
    step: int
    pull_i2t: float
    push_i2t: float
    pull_t2i: float
    push_t2i: float
    cls_i2t: float
    cls_t2i: float
    sew: float
    mcm: float
    total: float
    grad_norm: float


@dataclass
class TrainReport:
    steps: list[StepRecord]
    epochs: int
    steps_per_epoch: int
    wall_time_seconds: float
    masking_active: bool
    decode_active: bool
    mcm_loss_active: bool
    identity_to_class: dict[int, int]
    checkpoint_path: str | None = None
    stripped_checkpoint_path: str | None = None
    epoch_mean_total: list[float] = field(default_factory=list)


def mcm_branch_flags(cfg: TrainConfig) -> tuple[bool, bool, bool]:
    """(masking_active, decode_active, mcm_loss_active) for the ablation switches."""
    if not cfg.mcm_on:
        return False, False, False
    if cfg.mask_only:
        return True, False, False
    if cfg.attn_only:
        return False, True, False
    return True, True, True


def total_loss(batch: EmbeddingBatch, decode_logits: torch.Tensor | None,
               plan: MaskPlan | None, weight: torch.Tensor, sew_cfg: SewConfig,
               train_cfg: TrainConfig) -> StepLosses:
    """lambda1 * matching/classification total + lambda2 * masked-caption loss.

    A disabled branch contributes exactly zero (it is simply omitted from the
    sum, not multiplied in).
    """
    terms = []
    sew_out = None
    if train_cfg.sew_on:
        sew_out = sew_total(batch, weight, sew_cfg)
        terms.append(train_cfg.lambda1 * sew_out.total_tensor)
    mcm_value = 0.0
    masked_count = 0
    _, _, loss_active = mcm_branch_flags(train_cfg)
    if loss_active and decode_logits is not None and plan is not None:
        mcm_tensor = mcm_loss(decode_logits, plan)
        masked_count = plan.total_masked()
        terms.append(train_cfg.lambda2 * mcm_tensor)
        mcm_value = float(mcm_tensor.detach())
    total_tensor = sum(terms) if terms else torch.zeros(())
    total_value = (train_cfg.lambda1 * sew_out.total if sew_out else 0.0) \
        + train_cfg.lambda2 * mcm_value
    return StepLosses(sew=sew_out, mcm=mcm_value, total=total_value,
                      total_tensor=total_tensor, masked_count=masked_count)


def sample_batch(corpus: Corpus, batch_size: int, seed: int, step: int) -> list[tuple[int, int]]:
    """Identity-balanced draw of (image, caption) pairs from the train split.

    batch_size/2 identities, two pairs each, so every anchor has at least one
    same-identity candidate for the matching loss. Deterministic per
    (seed, step).
    """
    if batch_size % 2 != 0:
        raise ValueError("batch_size must be even")
    train_ids = corpus.identities("train")
    per_batch = batch_size // 2
    if len(train_ids) < per_batch:
        raise ValueError(f"corpus has {len(train_ids)} train identities; need >= {per_batch}")
    pairs_by_id: dict[int, list[tuple[int, int]]] = {i: [] for i in train_ids}
    for img_idx, cap_idx in corpus.pairs_for_split("train"):
        pairs_by_id[corpus.images[img_idx].identity_id].append((img_idx, cap_idx))
    rng = np.random.default_rng([seed, 3, step])
    chosen_ids = rng.choice(train_ids, size=per_batch, replace=False)
    batch: list[tuple[int, int]] = []
    for identity in chosen_ids:
        pool = pairs_by_id[int(identity)]
        take = rng.choice(len(pool), size=2, replace=len(pool) < 2)
        batch.extend(pool[int(t)] for t in take)
    return batch


def forward_losses(model: PersonSearchModel, images, captions, labels: torch.Tensor,
                   sew_cfg: SewConfig, train_cfg: TrainConfig,
                   plan: MaskPlan | None, update_bn: bool = True) -> StepLosses:
    """One training-mode forward pass: encode, CLS BatchNorm, decode, losses."""
    masking_active, decode_active, _ = mcm_branch_flags(train_cfg)
    image_cls, image_seq = model.encode_image(images)
    text_cls, text_seq, lengths = model.encode_text(captions, plan if masking_active else None)
    bn_image, bn_text = model.batchnorm_cls(image_cls, text_cls, train=True,
                                            update_running_stats=update_bn)
    batch = EmbeddingBatch(image_cls=bn_image, text_cls=bn_text, image_seq=image_seq,
                           text_seq=text_seq, labels=labels, caption_lengths=lengths)
    logits = model.decode(text_seq, image_seq, lengths) if decode_active else None
    return total_loss(batch, logits, plan, model.classifier_weight, sew_cfg, train_cfg)


def _check_finite(losses: StepLosses, epoch: int, step: int) -> None:
    named = {"total": losses.total, "mcm": losses.mcm}
    if losses.sew is not None:
        s = losses.sew
        named.update(pull_i2t=s.pull_i2t, push_i2t=s.push_i2t, pull_t2i=s.pull_t2i,
                     push_t2i=s.push_t2i, cls_i2t=s.cls_i2t, cls_t2i=s.cls_t2i)
    for name, value in named.items():
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss component '{name}' is non-finite at epoch {epoch} step {step}")


def train(corpus: Corpus, train_cfg: TrainConfig, encoder_cfg: EncoderConfig,
          sew_cfg: SewConfig, mcm_cfg: MCMConfig,
          out_dir: str | Path | None = None, threads: int = 1) -> tuple[PersonSearchModel, TrainReport]:
    """Full training run; bit-exact for a fixed seed in reference mode.

    Reference mode is threads=1; more threads may reorder float reductions
    and only reproduce to tolerance. Writes a full checkpoint and a
    decoder-stripped one when out_dir is given.
    """
    torch.set_num_threads(threads)
    start = time.perf_counter()
    masking_active, decode_active, loss_active = mcm_branch_flags(train_cfg)

    train_ids = corpus.identities("train")
    identity_to_class = {identity: i for i, identity in enumerate(train_ids)}
    model = init_params(encoder_cfg, len(corpus.vocab), corpus.patch_vocab_size,
                        num_classes=len(train_ids), decoder_blocks=mcm_cfg.decoder_blocks,
                        seed=train_cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                 betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
                                 eps=train_cfg.adam_eps)

    n_train_pairs = len(corpus.pairs_for_split("train"))
    steps_per_epoch = max(1, n_train_pairs // train_cfg.batch_size)
    records: list[StepRecord] = []
    epoch_means: list[float] = []

    global_step = 0
    for epoch in range(train_cfg.epochs):
        epoch_total = 0.0
        for step in range(steps_per_epoch):
            pair_indices = sample_batch(corpus, train_cfg.batch_size, train_cfg.seed, global_step)
            images = [corpus.images[i] for i, _ in pair_indices]
            captions = [corpus.captions[c] for _, c in pair_indices]
            labels = torch.tensor([identity_to_class[im.identity_id] for im in images])
            plan = None
            if masking_active:
                _, plan = mask_captions(captions, mcm_cfg, seed=[train_cfg.seed, 4, global_step])

            losses = forward_losses(model, images, captions, labels, sew_cfg, train_cfg, plan)
            _check_finite(losses, epoch, step)

            optimizer.zero_grad(set_to_none=True)
            if losses.total_tensor.requires_grad:
                losses.total_tensor.backward()
            grad_norm = float(model.flat_grad().norm())
            optimizer.step()

            s = losses.sew
            records.append(StepRecord(
                epoch=epoch, step=step,
                pull_i2t=s.pull_i2t if s else 0.0, push_i2t=s.push_i2t if s else 0.0,
                pull_t2i=s.pull_t2i if s else 0.0, push_t2i=s.push_t2i if s else 0.0,
                cls_i2t=s.cls_i2t if s else 0.0, cls_t2i=s.cls_t2i if s else 0.0,
                sew=s.total if s else 0.0, mcm=losses.mcm, total=losses.total,
                grad_norm=grad_norm))
            epoch_total += losses.total
            global_step += 1
        epoch_means.append(epoch_total / steps_per_epoch)

    report = TrainReport(steps=records, epochs=train_cfg.epochs, steps_per_epoch=steps_per_epoch,
                         wall_time_seconds=time.perf_counter() - start,
                         masking_active=masking_active, decode_active=decode_active,
                         mcm_loss_active=loss_active, identity_to_class=identity_to_class,
                         epoch_mean_total=epoch_means)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        full = out_dir / "checkpoint.bin"
        stripped = out_dir / "checkpoint_nodecoder.bin"
        save_checkpoint(full, model, strip_decoder=False)
        save_checkpoint(stripped, model, strip_decoder=True)
        report.checkpoint_path = str(full)
        report.stripped_checkpoint_path = str(stripped)
    return model, report


def write_report_csv(report: TrainReport, path) -> None:
    fields = ["epoch", "step", "pull_i2t", "push_i2t", "pull_t2i", "push_t2i",
              "cls_i2t", "cls_t2i", "sew", "mcm", "total", "grad_norm"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in report.steps:
            writer.writerow([getattr(r, f) for f in fields])


def write_report_summary(report: TrainReport, path) -> None:
    doc = {
        "epochs": report.epochs,
        "steps_per_epoch": report.steps_per_epoch,
        "wall_time_seconds": report.wall_time_seconds,
        "epoch_mean_total": report.epoch_mean_total,
        "final_total": report.steps[-1].total if report.steps else None,
        "masking_active": report.masking_active,
        "decode_active": report.decode_active,
        "mcm_loss_active": report.mcm_loss_active,
        "checkpoint": report.checkpoint_path,
        "checkpoint_nodecoder": report.stripped_checkpoint_path,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def evaluate_masked_accuracy(model: PersonSearchModel, corpus: Corpus, split: str,
                             mcm_cfg: MCMConfig, seed: int = 0, chunk: int = 32) -> float:
    """Masked-token top-1 accuracy over all captions of a split."""
    pairs = corpus.pairs_for_split(split)
    hits = 0.0
    total = 0
    with torch.no_grad():
        for lo in range(0, len(pairs), chunk):
            part = pairs[lo:lo + chunk]
            images = [corpus.images[i] for i, _ in part]
            captions = [corpus.captions[c] for _, c in part]
            _, plan = mask_captions(captions, mcm_cfg, seed=[seed, 5, lo])
            if plan.total_masked() == 0:
                continue
            _, image_seq = model.encode_image(images)
            _, text_seq, lengths = model.encode_text(captions, plan)
            logits = model.decode(text_seq, image_seq, lengths)
            acc = masked_token_accuracy(logits, plan)
            hits += acc * plan.total_masked()
            total += plan.total_masked()
    return hits / total if total else float("nan")


# ----- finite-difference gradient checking ---------------------------------

@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    dim: int
    coords_checked: int


def max_relative_error(fn, theta: torch.Tensor, analytic: torch.Tensor,
                       coords, eps: float) -> float:
    """Central differences on selected coordinates vs the analytic gradient."""
    worst = 0.0
    theta = theta.clone()
    for c in coords:
        c = int(c)
        orig = float(theta[c])
        theta[c] = orig + eps
        fp = fn(theta)
        theta[c] = orig - eps
        fm = fn(theta)
        theta[c] = orig
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[c])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def _pack(tensors: list[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.detach().reshape(-1) for t in tensors])


def _unpack(vec: torch.Tensor, like: list[torch.Tensor]) -> list[torch.Tensor]:
    out, offset = [], 0
    for t in like:
        out.append(vec[offset:offset + t.numel()].reshape(t.shape))
        offset += t.numel()
    return out


def _random_sew_inputs(n: int, d: int, seed: int, num_classes: int = 4):
    gen = torch.Generator().manual_seed(seed)
    image_cls = torch.randn(n, d, generator=gen, dtype=torch.float64)
    text_cls = torch.randn(n, d, generator=gen, dtype=torch.float64)
    weight = torch.randn(num_classes, d, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, num_classes, (n,), generator=gen)
    lengths = torch.randint(5, 40, (n,), generator=gen)
    return image_cls, text_cls, weight, labels, lengths


def build_grad_check_case(name: str, seed: int = 0, n: int = 8, d: int = 16):
    """Returns (fn mapping a flat vector to the loss value, theta0, analytic grad)."""
    if name == "quadratic":
        theta0 = torch.tensor([3.0], dtype=torch.float64)

        def fn(vec):
            return float((vec ** 2).sum())

        return fn, theta0, 2.0 * theta0

    if name in ("sew", "cls"):
        image_cls, text_cls, weight, labels, lengths = _random_sew_inputs(n, d, seed)
        cfg = SewConfig(len_min=10, len_max=30)
        parts = [image_cls, text_cls, weight]
        theta0 = _pack(parts)
        margins = torch.tensor([0.45] * n, dtype=torch.float64)

        def run(vec, grad: bool):
            img, txt, w = _unpack(vec, parts)
            if grad:
                img, txt, w = (x.clone().requires_grad_(True) for x in (img, txt, w))
            if name == "sew":
                batch = EmbeddingBatch(img, txt, torch.zeros(n, 1, d), torch.zeros(n, 1, d),
                                       labels, lengths)
                out = sew_total(batch, w, cfg).total_tensor
            else:
                out = classification_loss(img, txt, labels, w, margins, cfg.alpha, "i2t")
            if grad:
                return _pack(torch.autograd.grad(out, [img, txt, w]))
            return float(out)

        def fn(vec):
            with torch.no_grad():
                return run(vec, grad=False)

        return fn, theta0, run(theta0, grad=True)

    if name == "mcm":
        gen = torch.Generator().manual_seed(seed)
        c1, c2, vocab, heads = 9, 12, 23, 4
        decoder = CrossModalDecoder(d, heads, blocks=1, vocab_size=vocab)
        with torch.no_grad():
            for p in decoder.parameters():
                p.uniform_(-0.3, 0.3, generator=gen)
        text_seq = torch.randn(n, c2, d, generator=gen, dtype=torch.float64)
        image_seq = torch.randn(n, c1, d, generator=gen, dtype=torch.float64)
        lengths = torch.randint(3, c2 + 1, (n,), generator=gen)
        rng = np.random.default_rng(seed)
        positions = [sorted(rng.choice(range(1, int(l)), size=min(2, int(l) - 1), replace=False).tolist())
                     for l in lengths]
        originals = [rng.integers(0, vocab, size=len(p)).tolist() for p in positions]
        plan = MaskPlan(masked_positions=positions, original_ids=originals)
        names = sorted(name for name, _ in decoder.named_parameters())
        dec_params = dict(decoder.named_parameters())
        parts = [dec_params[k] for k in names] + [text_seq, image_seq]
        theta0 = _pack(parts)

        def run(vec, grad: bool):
            values = _unpack(vec, parts)
            with torch.no_grad():
                for k, v in zip(names, values):
                    dec_params[k].copy_(v)
            txt, img = values[-2], values[-1]
            if grad:
                txt = txt.clone().requires_grad_(True)
                img = img.clone().requires_grad_(True)
                out = mcm_loss(decoder(txt, img, lengths), plan)
                grads = torch.autograd.grad(out, [dec_params[k] for k in names] + [txt, img])
                return _pack(list(grads))
            return float(mcm_loss(decoder(txt, img, lengths), plan))

        def fn(vec):
            with torch.no_grad():
                return run(vec, grad=False)

        return fn, theta0, run(theta0, grad=True)

    if name == "total":
        corpus = generate_corpus(CorpusConfig(num_identities=6, images_per_identity=2,
                                              captions_per_image=1, num_test_identities=2),
                                 seed=seed)
        encoder_cfg = EncoderConfig(embed_dim=d, depth=1, heads=4,
                                    max_image_tokens=17, max_text_tokens=28)
        mcm_cfg = MCMConfig(mask_ratio=0.3, vocab_size=len(corpus.vocab))
        sew_cfg = SewConfig(len_min=11, len_max=25)
        train_cfg = TrainConfig(batch_size=n, epochs=1, seed=seed)
        model = init_params(encoder_cfg, len(corpus.vocab), corpus.patch_vocab_size,
                            num_classes=len(corpus.identities("train")),
                            decoder_blocks=1, seed=seed)
        identity_to_class = {ident: i for i, ident in enumerate(corpus.identities("train"))}
        pair_indices = sample_batch(corpus, n, seed, step=0)
        images = [corpus.images[i] for i, _ in pair_indices]
        captions = [corpus.captions[c] for _, c in pair_indices]
        labels = torch.tensor([identity_to_class[im.identity_id] for im in images])
        _, plan = mask_captions(captions, mcm_cfg, seed=[seed, 4, 0])
        theta0 = model.flat_params()

        def evaluate(vec) -> StepLosses:
            model.set_flat_params(vec)
            return forward_losses(model, images, captions, labels, sew_cfg, train_cfg,
                                  plan, update_bn=False)

        def fn(vec):
            with torch.no_grad():
                return evaluate(vec).total

        losses = evaluate(theta0)
        model.zero_grad()
        losses.total_tensor.backward()
        analytic = model.flat_grad()
        model.set_flat_params(theta0)
        return fn, theta0, analytic

    raise ValueError(f"unknown gradient check case {name!r}")


def run_grad_check(name: str, coords: int = 100, eps: float = 1e-4,
                   seed: int = 0, n: int = 8, d: int = 16) -> GradCheckResult:
    fn, theta0, analytic = build_grad_check_case(name, seed=seed, n=n, d=d)
    dim = theta0.numel()
    rng = np.random.default_rng(seed + 1)
    picked = rng.choice(dim, size=min(coords, dim), replace=False)
    err = max_relative_error(fn, theta0, analytic, picked, eps)
    return GradCheckResult(name=name, max_rel_err=err, dim=dim, coords_checked=len(picked))
