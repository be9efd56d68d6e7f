"""Synthetic fine-grained person/caption corpus.

Images are small grids of discrete patch ids rather than pixels: each
identity's attributes stamp fixed grid cells, remaining cells carry seeded
noise. Captions are attribute phrases padded with filler words to a sampled
verbosity, so caption lengths vary within a corpus.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .configs import CorpusConfig

PAD_TOKEN = "<pad>"
CLS_TOKEN = "<cls>"
UNK_TOKEN = "<unk>"

CORPUS_FORMAT_VERSION = "corpus_v1"

# Fixed attribute schema: (slot name, value vocabulary). Slot value words and
# filler words are disjoint so captions can be reverse-checked against profiles.
SLOT_SCHEMA: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("gender", ("man", "woman")),
    ("top_color", ("red", "blue", "green", "black", "white", "yellow", "purple", "orange")),
    ("top_type", ("shirt", "jacket", "coat", "sweater", "hoodie", "vest")),
    ("bottom_color", ("red", "blue", "green", "black", "white", "grey", "brown", "beige")),
    ("bottom_type", ("jeans", "shorts", "skirt", "trousers", "leggings", "sweatpants")),
    ("accessory", ("backpack", "hat", "umbrella", "handbag", "scarf", "sunglasses")),
)

FILLER_WORDS: tuple[str, ...] = (
    "a", "the", "person", "is", "wearing", "and", "with", "carrying",
    "walking", "standing", "near", "outside", "down", "street", "sidewalk",
    "while", "along", "who", "seen", "looking", "ahead", "slowly", "quietly",
    "today", "pair", "of",
)

_ATTRIBUTE_WORDS = frozenset(w for _, values in SLOT_SCHEMA for w in values)
assert _ATTRIBUTE_WORDS.isdisjoint(FILLER_WORDS)

_WORD_RE = re.compile(r"[a-z0-9']+")


class AnnotationFormatError(ValueError):
    """Annotation file is not parseable JSON."""


class AnnotationSchemaError(ValueError):
    """Annotation record is missing a required key or has a bad value type."""


@dataclass
class AttributeProfile:
    """One identity's ground-truth attributes: (slot name, value index) pairs."""

    slots: list[tuple[str, int]]
    identity_id: int

    def __post_init__(self):
        names = [n for n, _ in self.slots]
        if names != [n for n, _ in SLOT_SCHEMA]:
            raise ValueError(f"profile slots must follow the fixed schema, got {names}")
        for (name, values), (_, idx) in zip(SLOT_SCHEMA, self.slots):
            if not 0 <= idx < len(values):
                raise ValueError(f"slot {name} index {idx} outside vocabulary of size {len(values)}")

    def word(self, slot_name: str) -> str:
        for (name, values), (_, idx) in zip(SLOT_SCHEMA, self.slots):
            if name == slot_name:
                return values[idx]
        raise KeyError(slot_name)

    def words(self) -> set[str]:
        return {values[idx] for (name, values), (_, idx) in zip(SLOT_SCHEMA, self.slots)}


@dataclass
class SyntheticPersonImage:
    """A grid of patch-vocabulary ids standing in for a person photo."""

    patch_tokens: list[list[int]]
    identity_id: int
    instance_noise_seed: int


@dataclass
class TokenizedCaption:
    """Word-id sequence for one caption; position 0 is always the CLS id."""

    token_ids: list[int]
    length: int
    identity_id: int = -1

    def __post_init__(self):
        if self.length != len(self.token_ids):
            raise ValueError("length must equal the number of token ids")


@dataclass
class Corpus:
    images: list[SyntheticPersonImage]
    captions: list[TokenizedCaption]
    pairing: list[tuple[int, int]]
    vocab: list[str]
    split: dict[str, list[int]]
    grid_size: int
    patch_vocab_size: int
    profiles: list[AttributeProfile] = field(default_factory=list)

    def identities(self, split: str | None = None) -> list[int]:
        if split is None:
            return sorted(set(self.split["train"]) | set(self.split["test"]))
        return sorted(self.split[split])

    def image_indices(self, split: str) -> list[int]:
        ids = set(self.split[split])
        return [i for i, img in enumerate(self.images) if img.identity_id in ids]

    def caption_indices(self, split: str) -> list[int]:
        ids = set(self.split[split])
        return [i for i, cap in enumerate(self.captions) if cap.identity_id in ids]

    def pairs_for_split(self, split: str) -> list[tuple[int, int]]:
        ids = set(self.split[split])
        return [(i, c) for i, c in self.pairing if self.images[i].identity_id in ids]


def build_vocab() -> list[str]:
    """Word vocabulary: specials, then slot values in schema order, then fillers."""
    vocab = [PAD_TOKEN, CLS_TOKEN, UNK_TOKEN]
    seen = set(vocab)
    for _, values in SLOT_SCHEMA:
        for w in values:
            if w not in seen:
                vocab.append(w)
                seen.add(w)
    for w in FILLER_WORDS:
        if w not in seen:
            vocab.append(w)
            seen.add(w)
    return vocab


def patch_vocab_size(cfg: CorpusConfig) -> int:
    return sum(len(values) for _, values in SLOT_SCHEMA) + cfg.noise_vocab_size


def tokenize(text: str, vocab: list[str]) -> TokenizedCaption:
    """Lowercase, strip punctuation, split on whitespace, map to vocab ids.

    Unknown words map to the UNK id; a CLS id is prepended. Total function:
    any string tokenizes.
    """
    if CLS_TOKEN not in vocab or UNK_TOKEN not in vocab:
        raise ValueError("vocab must contain the CLS and UNK tokens")
    index = {w: i for i, w in enumerate(vocab)}
    unk = index[UNK_TOKEN]
    ids = [index[CLS_TOKEN]]
    for word in _WORD_RE.findall(text.lower()):
        ids.append(index.get(word, unk))
    return TokenizedCaption(token_ids=ids, length=len(ids))


def render_image(profile: AttributeProfile, noise_seed: int, cfg: CorpusConfig) -> SyntheticPersonImage:
    """Deterministic patch grid for (profile, noise_seed).

    Grid cells cycle through the attribute slots plus two noise channels in
    row-major order; each cell may additionally be occluded by a noise patch.
    """
    rng = np.random.default_rng(noise_seed)
    slot_offsets = []
    offset = 0
    for _, values in SLOT_SCHEMA:
        slot_offsets.append(offset)
        offset += len(values)
    noise_offset = offset
    n_slots = len(SLOT_SCHEMA)
    period = n_slots + 2

    g = cfg.grid_size
    grid: list[list[int]] = []
    for r in range(g):
        row = []
        for c in range(g):
            k = (r * g + c) % period
            if k < n_slots:
                token = slot_offsets[k] + profile.slots[k][1]
            else:
                token = noise_offset + int(rng.integers(cfg.noise_vocab_size))
            if rng.random() < cfg.occlusion_prob:
                token = noise_offset + int(rng.integers(cfg.noise_vocab_size))
            row.append(token)
        grid.append(row)
    return SyntheticPersonImage(patch_tokens=grid, identity_id=profile.identity_id,
                                instance_noise_seed=noise_seed)


def _attribute_phrases(profile: AttributeProfile) -> list[list[str]]:
    return [
        ["a", profile.word("gender")],
        ["wearing", "a", profile.word("top_color"), profile.word("top_type")],
        ["and", profile.word("bottom_color"), profile.word("bottom_type")],
        ["carrying", "a", profile.word("accessory")],
    ]


_FILLER_PHRASES: tuple[tuple[str, ...], ...] = (
    ("walking", "down", "the", "street"),
    ("standing", "near", "the", "sidewalk"),
    ("seen", "outside", "today"),
    ("looking", "ahead", "slowly"),
    ("who", "is", "walking", "along", "quietly"),
)


def compose_caption(profile: AttributeProfile, target_words: int, rng: np.random.Generator) -> str:
    """Caption with exactly ``target_words`` words mentioning only true attributes."""
    words: list[str] = []
    for phrase in _attribute_phrases(profile):
        if len(words) + len(phrase) <= target_words:
            words.extend(phrase)
    while len(words) < target_words:
        phrase = _FILLER_PHRASES[int(rng.integers(len(_FILLER_PHRASES)))]
        take = min(len(phrase), target_words - len(words))
        words.extend(phrase[:take])
    return " ".join(words)


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus for (config, seed).

    Per-identity streams are seeded independently so generation could be
    parallelized across identities without changing the output.
    """
    vocab = build_vocab()
    profiles = _sample_profiles(config, seed)

    images: list[SyntheticPersonImage] = []
    captions: list[TokenizedCaption] = []
    pairing: list[tuple[int, int]] = []
    for profile in profiles:
        rng = np.random.default_rng([seed, 1, profile.identity_id])
        for _ in range(config.images_per_identity):
            noise_seed = int(rng.integers(2**31))
            img = render_image(profile, noise_seed, config)
            img_idx = len(images)
            images.append(img)
            for _ in range(config.captions_per_image):
                target = int(rng.integers(config.verbosity_min, config.verbosity_max + 1))
                cap = tokenize(compose_caption(profile, target, rng), vocab)
                cap.identity_id = profile.identity_id
                pairing.append((img_idx, len(captions)))
                captions.append(cap)

    split_rng = np.random.default_rng([seed, 2])
    all_ids = [p.identity_id for p in profiles]
    test_ids = sorted(int(i) for i in split_rng.choice(all_ids, size=config.num_test_identities, replace=False))
    train_ids = sorted(i for i in all_ids if i not in set(test_ids))

    return Corpus(
        images=images,
        captions=captions,
        pairing=pairing,
        vocab=vocab,
        split={"train": train_ids, "test": test_ids},
        grid_size=config.grid_size,
        patch_vocab_size=patch_vocab_size(config),
        profiles=profiles,
    )


def _sample_profiles(config: CorpusConfig, seed: int) -> list[AttributeProfile]:
    rng = np.random.default_rng([seed, 0])
    n_combos = 1
    for _, values in SLOT_SCHEMA:
        n_combos *= len(values)
    if config.num_identities > n_combos:
        raise ValueError(f"cannot draw {config.num_identities} distinct profiles from {n_combos} combinations")
    profiles = []
    seen: set[tuple[int, ...]] = set()
    for identity in range(config.num_identities):
        while True:
            combo = tuple(int(rng.integers(len(values))) for _, values in SLOT_SCHEMA)
            if combo not in seen:
                seen.add(combo)
                break
        slots = [(name, idx) for (name, _), idx in zip(SLOT_SCHEMA, combo)]
        profiles.append(AttributeProfile(slots=slots, identity_id=identity))
    return profiles


def corpus_to_json(corpus: Corpus) -> str:
    """Canonical serialization: byte-identical for equal corpora."""
    doc = {
        "version": CORPUS_FORMAT_VERSION,
        "vocab": corpus.vocab,
        "grid_size": corpus.grid_size,
        "patch_vocab_size": corpus.patch_vocab_size,
        "images": [
            {"identity_id": im.identity_id, "patch_tokens": im.patch_tokens,
             "instance_noise_seed": im.instance_noise_seed}
            for im in corpus.images
        ],
        "captions": [
            {"identity_id": c.identity_id, "token_ids": c.token_ids}
            for c in corpus.captions
        ],
        "pairing": [list(p) for p in corpus.pairing],
        "split": {"train": corpus.split["train"], "test": corpus.split["test"]},
        "profiles": [
            {"identity_id": p.identity_id, "slots": [list(s) for s in p.slots]}
            for p in corpus.profiles
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(corpus_to_json(corpus))


def corpus_from_json(text: str) -> Corpus:
    doc = json.loads(text)
    version = doc.get("version")
    if version != CORPUS_FORMAT_VERSION:
        raise ValueError(f"unsupported corpus version {version!r}")
    return Corpus(
        images=[SyntheticPersonImage(patch_tokens=d["patch_tokens"], identity_id=d["identity_id"],
                                     instance_noise_seed=d["instance_noise_seed"])
                for d in doc["images"]],
        captions=[TokenizedCaption(token_ids=d["token_ids"], length=len(d["token_ids"]),
                                   identity_id=d["identity_id"])
                  for d in doc["captions"]],
        pairing=[tuple(p) for p in doc["pairing"]],
        vocab=doc["vocab"],
        split={"train": list(doc["split"]["train"]), "test": list(doc["split"]["test"])},
        grid_size=doc["grid_size"],
        patch_vocab_size=doc["patch_vocab_size"],
        profiles=[AttributeProfile(slots=[tuple(s) for s in d["slots"]], identity_id=d["identity_id"])
                  for d in doc["profiles"]],
    )


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        return corpus_from_json(fh.read())


def load_annotations(path, vocab: list[str]) -> Corpus:
    """Ingest the standard person-search annotation format.

    The file must be a JSON array of records
    ``{"file_path": str, "id": int, "captions": [str, ...]}`` with an optional
    ``"split"`` key (default "train"). Patch grids are left empty: this loader
    only carries identities and tokenized captions.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        records = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationFormatError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(records, list):
        raise AnnotationSchemaError("annotation file must be a JSON array of records")

    images: list[SyntheticPersonImage] = []
    captions: list[TokenizedCaption] = []
    pairing: list[tuple[int, int]] = []
    split_of: dict[int, str] = {}
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise AnnotationSchemaError(f"record {i} is not an object")
        for key in ("file_path", "id", "captions"):
            if key not in rec:
                raise AnnotationSchemaError(f"record {i} missing required key '{key}'")
        identity = int(rec["id"])
        split = rec.get("split", "train")
        if split not in ("train", "test"):
            raise AnnotationSchemaError(f"record {i} has unknown split '{split}'")
        split_of.setdefault(identity, split)
        img_idx = len(images)
        images.append(SyntheticPersonImage(patch_tokens=[], identity_id=identity, instance_noise_seed=0))
        for raw in rec["captions"]:
            cap = tokenize(raw, vocab)
            cap.identity_id = identity
            pairing.append((img_idx, len(captions)))
            captions.append(cap)

    return Corpus(
        images=images,
        captions=captions,
        pairing=pairing,
        vocab=vocab,
        split={"train": sorted(i for i, s in split_of.items() if s == "train"),
               "test": sorted(i for i, s in split_of.items() if s == "test")},
        grid_size=0,
        patch_vocab_size=0,
        profiles=[],
    )
