"""Retrieval evaluation, k-reciprocal re-ranking, and spectrum-gap analysis.

Everything here runs on the dual-encoder CLS features alone; the decoder
plays no part, so a decoder-stripped checkpoint evaluates identically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .data_synth import Corpus
from .model import PersonSearchModel


@dataclass
class RetrievalResult:
    rank1: float
    rank5: float
    rank10: float
    ranked_indices: list[list[int]]
    reranked: bool

    def __post_init__(self):
        if not self.rank1 <= self.rank5 <= self.rank10:
            raise ValueError("rank@k must be monotone in k")


@dataclass
class SpectrumReport:
    image_spectrum: np.ndarray
    text_spectrum: np.ndarray
    gap: float


def similarity_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarities of unit-normalized rows, [q, g]."""
    qn = np.linalg.norm(query, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("zero-norm feature row cannot be normalized")
    return (query / qn) @ (gallery / gn).T


def ranked_gallery_indices(similarities: np.ndarray) -> np.ndarray:
    """Descending-similarity gallery order per query; ties go to the lower index."""
    return np.argsort(-similarities, axis=1, kind="stable")


def rank_at_k(similarities: np.ndarray, query_labels, gallery_labels, k: int) -> float:
    """Fraction of queries with a matching label in their top-k gallery items."""
    q, g = similarities.shape
    if k > g:
        raise ValueError(f"k={k} exceeds gallery size {g}")
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    order = ranked_gallery_indices(similarities)
    hits = 0
    for i in range(q):
        top = gallery_labels[order[i, :k]]
        hits += int((top == query_labels[i]).any())
    return hits / q


def evaluate_retrieval(similarities: np.ndarray, query_labels, gallery_labels,
                       reranked: bool = False) -> RetrievalResult:
    order = ranked_gallery_indices(similarities)
    return RetrievalResult(
        rank1=rank_at_k(similarities, query_labels, gallery_labels, 1),
        rank5=rank_at_k(similarities, query_labels, gallery_labels, 5),
        rank10=rank_at_k(similarities, query_labels, gallery_labels, 10),
        ranked_indices=[row.tolist() for row in order],
        reranked=reranked,
    )


# ----- k-reciprocal re-ranking ----------------------------------------------

def _profile_cosine(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cannot derive neighbor profiles from a zero row/column")
    u = m / norms
    return u @ u.T


def k_reciprocal_rerank(similarities: np.ndarray, k1: int = 20, k2: int = 6,
                        lambda_mix: float = 0.3, query_sims: np.ndarray | None = None,
                        gallery_sims: np.ndarray | None = None) -> np.ndarray:
    """Jaccard re-ranking over k-reciprocal neighbor sets; returns distances [q, g].

    Queries and gallery items are pooled into one joint set with cosine
    distance 1 - sim. Within-modality similarities default to cosine over the
    rows (queries) and columns (gallery) of the cross matrix when the true
    feature similarities are not supplied.

    Procedure, per joint item i: the k-reciprocal set R(i) holds the
    forward neighbors of i (self included) that also rank i among their own
    k1 nearest; R(i) is expanded with any member's half-k1 reciprocal set
    whose overlap with R(i) exceeds two thirds of its size. Items in the
    expanded set receive exp(-distance) weights, normalized to sum one, then
    rows are averaged over each item's k2 nearest (query expansion). The
    output mixes the original distance with the Jaccard distance of those
    weight vectors: lambda_mix * original + (1 - lambda_mix) * jaccard,
    where jaccard(u, v) = 1 - sum(min(u, v)) / sum(max(u, v)).

    Neighbor ranks break distance ties toward the lower joint index (queries
    first, then gallery in input order).
    """
    q, g = similarities.shape
    if not k1 > k2 >= 1:
        raise ValueError("need k1 > k2 >= 1")
    if k1 >= g:
        raise ValueError(f"k1={k1} must be smaller than the gallery size {g}")
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError("lambda_mix must lie in [0, 1]")
    if query_sims is None:
        query_sims = _profile_cosine(similarities)
    if gallery_sims is None:
        gallery_sims = _profile_cosine(similarities.T)

    n = q + g
    dist = np.ones((n, n))
    dist[:q, :q] = 1.0 - query_sims
    dist[:q, q:] = 1.0 - similarities
    dist[q:, :q] = 1.0 - similarities.T
    dist[q:, q:] = 1.0 - gallery_sims

    initial_rank = np.argsort(dist, axis=1, kind="stable")

    def reciprocal_set(i: int, k: int) -> np.ndarray:
        forward = initial_rank[i, :k + 1]
        backward = initial_rank[forward, :k + 1]
        return forward[np.where(backward == i)[0]]

    weights = np.zeros((n, n))
    half_k = int(np.around(k1 / 2.0))
    for i in range(n):
        base = reciprocal_set(i, k1)
        expanded = base
        for j in base:
            candidate = reciprocal_set(int(j), half_k)
            if len(np.intersect1d(candidate, base)) > (2.0 / 3.0) * len(candidate):
                expanded = np.append(expanded, candidate)
        expanded = np.unique(expanded)
        w = np.exp(-dist[i, expanded])
        weights[i, expanded] = w / w.sum()

    if k2 > 1:
        weights = np.stack([weights[initial_rank[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.zeros((q, g))
    for i in range(q):
        vi = weights[i]
        for j in range(g):
            vj = weights[q + j]
            union = np.maximum(vi, vj).sum()
            jaccard[i, j] = 1.0 - np.minimum(vi, vj).sum() / union if union > 0 else 1.0

    return lambda_mix * dist[:q, q:] + (1.0 - lambda_mix) * jaccard


# ----- spectrum analysis ------------------------------------------------------

def svd_spectrum_gap(image_cls: np.ndarray, text_cls: np.ndarray,
                     eps: float = 1e-12) -> SpectrumReport:
    """Log-spectrum divergence of the two feature covariance matrices.

    Each feature set is centered; the singular values of the two d-by-d
    covariance matrices are compared rank by rank on a log scale. gap = 0
    means identical spectra; rigid rotations of both sets leave it unchanged.
    """
    if image_cls.shape[0] <= 1 or text_cls.shape[0] <= 1:
        raise ValueError("spectrum analysis needs more than one sample per modality")
    if image_cls.shape[1] != text_cls.shape[1]:
        raise ValueError("feature dimensions must agree")

    def spectrum(x: np.ndarray) -> np.ndarray:
        centered = x - x.mean(axis=0)
        cov = centered.T @ centered / (x.shape[0] - 1)
        return np.linalg.svd(cov, compute_uv=False)

    s_img = spectrum(image_cls)
    s_txt = spectrum(text_cls)
    gap = float(np.mean(np.abs(np.log(s_img + eps) - np.log(s_txt + eps))))
    return SpectrumReport(image_spectrum=s_img, text_spectrum=s_txt, gap=gap)


# ----- feature extraction and dumping ----------------------------------------

@dataclass
class SplitFeatures:
    image_features: np.ndarray
    image_labels: np.ndarray
    text_features: np.ndarray
    text_labels: np.ndarray


def compute_split_features(model: PersonSearchModel, corpus: Corpus, split: str,
                           bn_at_eval: bool = False, chunk: int = 32) -> SplitFeatures:
    """CLS features for every image and caption of a split.

    Raw encoder CLS by default, mirroring the inference branch of the training
    pipeline; ``bn_at_eval`` applies the running-statistics BatchNorm instead.
    """
    image_idx = corpus.image_indices(split)
    caption_idx = corpus.caption_indices(split)
    img_chunks, txt_chunks = [], []
    with torch.no_grad():
        for lo in range(0, len(image_idx), chunk):
            images = [corpus.images[i] for i in image_idx[lo:lo + chunk]]
            cls, _ = model.encode_image(images)
            if bn_at_eval:
                cls = model.image_bn(cls, train=False)
            img_chunks.append(cls.numpy())
        for lo in range(0, len(caption_idx), chunk):
            captions = [corpus.captions[i] for i in caption_idx[lo:lo + chunk]]
            cls, _, _ = model.encode_text(captions)
            if bn_at_eval:
                cls = model.text_bn(cls, train=False)
            txt_chunks.append(cls.numpy())
    d = model.encoder_cfg.embed_dim
    return SplitFeatures(
        image_features=np.concatenate(img_chunks) if img_chunks else np.zeros((0, d)),
        image_labels=np.array([corpus.images[i].identity_id for i in image_idx]),
        text_features=np.concatenate(txt_chunks) if txt_chunks else np.zeros((0, d)),
        text_labels=np.array([corpus.captions[i].identity_id for i in caption_idx]),
    )


def dump_features(features: SplitFeatures, path) -> None:
    """CSV dump, one row per item: modality,identity,f0..f{d-1}.

    Values are written with full round-trip precision, so reloading
    reproduces the in-process features bit for bit.
    """
    d = features.image_features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "identity"] + [f"f{i}" for i in range(d)])
        for row, label in zip(features.image_features, features.image_labels):
            writer.writerow(["image", int(label)] + [repr(float(v)) for v in row])
        for row, label in zip(features.text_features, features.text_labels):
            writer.writerow(["text", int(label)] + [repr(float(v)) for v in row])


def load_feature_csv(path) -> SplitFeatures:
    img_rows, img_labels, txt_rows, txt_labels = [], [], [], []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["modality", "identity"]:
            raise ValueError("unexpected feature CSV header")
        for row in reader:
            values = [float(v) for v in row[2:]]
            if row[0] == "image":
                img_rows.append(values)
                img_labels.append(int(row[1]))
            elif row[0] == "text":
                txt_rows.append(values)
                txt_labels.append(int(row[1]))
            else:
                raise ValueError(f"unknown modality {row[0]!r}")
    return SplitFeatures(image_features=np.array(img_rows), image_labels=np.array(img_labels),
                         text_features=np.array(txt_rows), text_labels=np.array(txt_labels))


def retrieval_metrics(model: PersonSearchModel, corpus: Corpus, split: str,
                      bn_at_eval: bool = False, rerank: bool = False,
                      k1: int = 20, k2: int = 6, lambda_mix: float = 0.3
                      ) -> tuple[RetrievalResult, SpectrumReport]:
    """Text-to-image retrieval over a split, plus the modality spectrum gap."""
    feats = compute_split_features(model, corpus, split, bn_at_eval)
    sims = similarity_matrix(feats.text_features, feats.image_features)
    if rerank:
        query_sims = similarity_matrix(feats.text_features, feats.text_features)
        gallery_sims = similarity_matrix(feats.image_features, feats.image_features)
        dist = k_reciprocal_rerank(sims, k1, k2, lambda_mix, query_sims, gallery_sims)
        result = evaluate_retrieval(-dist, feats.text_labels, feats.image_labels, reranked=True)
    else:
        result = evaluate_retrieval(sims, feats.text_labels, feats.image_labels, reranked=False)
    spectrum = svd_spectrum_gap(feats.image_features, feats.text_features)
    return result, spectrum
