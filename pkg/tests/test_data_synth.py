import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbps.configs import CorpusConfig
from tbps.data_synth import (CLS_TOKEN, PAD_TOKEN, SLOT_SCHEMA, UNK_TOKEN,
                             AnnotationFormatError, AnnotationSchemaError, build_vocab,
                             corpus_to_json, generate_corpus, load_annotations, load_corpus,
                             render_image, save_corpus, tokenize)

MINI_VOCAB = [PAD_TOKEN, CLS_TOKEN, UNK_TOKEN, "red", "coat", "blue"]


# ----- generate_corpus --------------------------------------------------------

def test_counts_forced_by_config():
    corpus = generate_corpus(CorpusConfig(num_identities=2, images_per_identity=1,
                                          captions_per_image=1, num_test_identities=0), seed=7)
    assert len(corpus.images) == 2
    assert len(corpus.captions) == 2
    assert len(corpus.pairing) == 2


def test_counts_arithmetic():
    corpus = generate_corpus(CorpusConfig(num_identities=32, images_per_identity=4,
                                          captions_per_image=2), seed=1)
    assert len(corpus.images) == 128
    assert len(corpus.captions) == 256


def test_different_seeds_differ():
    cfg = CorpusConfig(num_identities=4, images_per_identity=1, captions_per_image=1,
                       num_test_identities=1)
    a = generate_corpus(cfg, seed=1)
    b = generate_corpus(cfg, seed=2)
    assert any(x.token_ids != y.token_ids for x, y in zip(a.captions, b.captions))


def test_config_rejections():
    with pytest.raises(ValueError):
        CorpusConfig(num_identities=1)
    with pytest.raises(ValueError):
        CorpusConfig(noise_vocab_size=0)
    with pytest.raises(ValueError):
        CorpusConfig(verbosity_min=20, verbosity_max=10)


def test_split_identity_disjoint(toy_corpus):
    train = set(toy_corpus.split["train"])
    test = set(toy_corpus.split["test"])
    assert train.isdisjoint(test)
    assert len(test) == 8
    assert len(train) == 24


def test_every_image_has_a_caption(toy_corpus):
    paired_images = {i for i, _ in toy_corpus.pairing}
    assert paired_images == set(range(len(toy_corpus.images)))


def test_render_image_pure_function_of_profile_and_seed(toy_corpus):
    profile = toy_corpus.profiles[0]
    cfg = CorpusConfig()
    a = render_image(profile, 12345, cfg)
    b = render_image(profile, 12345, cfg)
    assert a.patch_tokens == b.patch_tokens
    assert all(all(0 <= t < toy_corpus.patch_vocab_size for t in row) for row in a.patch_tokens)


# ----- tokenize ---------------------------------------------------------------

def test_tokenize_basic():
    cap = tokenize("Red coat.", MINI_VOCAB)
    assert cap.token_ids == [1, 3, 4]
    assert cap.length == 3


def test_tokenize_empty():
    cap = tokenize("", MINI_VOCAB)
    assert cap.token_ids == [1]
    assert cap.length == 1


def test_tokenize_oov():
    cap = tokenize("blue zzz", MINI_VOCAB)
    assert cap.token_ids == [1, 5, 2]


def test_tokenize_requires_special_tokens():
    with pytest.raises(ValueError):
        tokenize("anything", ["red", "coat"])


# ----- load_annotations -------------------------------------------------------

def _write(tmp_path, payload):
    path = tmp_path / "annotations.json"
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return path


def test_load_annotations_counts(tmp_path):
    path = _write(tmp_path, [{"file_path": "a.jpg", "id": 3,
                              "captions": ["a man in a red coat", "red coat man"]}])
    corpus = load_annotations(path, build_vocab())
    assert len(corpus.images) == 1
    assert len(corpus.captions) == 2
    assert corpus.captions[0].identity_id == 3


def test_load_annotations_missing_key(tmp_path):
    path = _write(tmp_path, [{"file_path": "a.jpg", "captions": ["hi"]}])
    with pytest.raises(AnnotationSchemaError, match="id"):
        load_annotations(path, build_vocab())


def test_load_annotations_distinct_identities(tmp_path):
    records = [{"file_path": f"{i}.jpg", "id": ident, "captions": ["x"]}
               for i, ident in enumerate([5, 5, 9])]
    corpus = load_annotations(_write(tmp_path, records), build_vocab())
    assert len({im.identity_id for im in corpus.images}) == 2


def test_load_annotations_malformed_json(tmp_path):
    path = _write(tmp_path, '[{"file_path": "a.jpg",\n  "id": }]')
    with pytest.raises(AnnotationFormatError, match="line 2"):
        load_annotations(path, build_vocab())


def test_load_annotations_split_key(tmp_path):
    records = [{"file_path": "a.jpg", "id": 1, "captions": ["x"], "split": "test"},
               {"file_path": "b.jpg", "id": 2, "captions": ["y"]}]
    corpus = load_annotations(_write(tmp_path, records), build_vocab())
    assert corpus.split == {"train": [2], "test": [1]}


# ----- invariants -------------------------------------------------------------

@pytest.mark.invariant
def test_generation_deterministic_byte_identical():
    cfg = CorpusConfig(num_identities=8, images_per_identity=2, captions_per_image=2,
                       num_test_identities=2)
    a = corpus_to_json(generate_corpus(cfg, seed=11))
    b = corpus_to_json(generate_corpus(cfg, seed=11))
    assert a == b


@pytest.mark.invariant
def test_attribute_consistency(toy_corpus):
    attribute_words = {w for _, values in SLOT_SCHEMA for w in values}
    profile_by_id = {p.identity_id: p for p in toy_corpus.profiles}
    assert len(toy_corpus.captions) >= 200
    for cap in toy_corpus.captions:
        words = {toy_corpus.vocab[t] for t in cap.token_ids[1:]}
        mentioned = words & attribute_words
        assert mentioned <= profile_by_id[cap.identity_id].words()


@pytest.mark.invariant
def test_caption_length_coverage(toy_corpus):
    cfg = CorpusConfig()
    lengths = [c.length for c in toy_corpus.captions]
    assert len(lengths) >= 256
    assert min(lengths) <= cfg.verbosity_min + 2
    assert max(lengths) >= cfg.verbosity_max - 2


@pytest.mark.invariant
def test_save_load_round_trip(tmp_path, tiny_corpus):
    path = tmp_path / "corpus.json"
    save_corpus(tiny_corpus, path)
    assert load_corpus(path) == tiny_corpus


@pytest.mark.invariant
def test_caption_ids_within_vocab(toy_corpus):
    for cap in toy_corpus.captions:
        assert cap.length == len(cap.token_ids)
        assert all(0 <= t < len(toy_corpus.vocab) for t in cap.token_ids)
        assert cap.token_ids[0] == toy_corpus.vocab.index(CLS_TOKEN)


@pytest.mark.invariant
@settings(max_examples=20, deadline=None)
@given(ids=st.integers(2, 6), imgs=st.integers(1, 2), caps=st.integers(1, 2),
       seed=st.integers(0, 50))
def test_generation_structure_property(ids, imgs, caps, seed):
    cfg = CorpusConfig(num_identities=ids, images_per_identity=imgs, captions_per_image=caps,
                       num_test_identities=min(1, ids - 2), verbosity_min=6, verbosity_max=12)
    corpus = generate_corpus(cfg, seed)
    assert len(corpus.images) == ids * imgs
    assert len(corpus.captions) == ids * imgs * caps
    assert set(corpus.split["train"]).isdisjoint(corpus.split["test"])
    assert corpus_to_json(corpus) == corpus_to_json(generate_corpus(cfg, seed))


@pytest.mark.invariant
def test_annotation_round_trip_of_split_and_pairs(tmp_path, toy_corpus):
    # serialization keeps pairing indices valid
    path = tmp_path / "c.json"
    save_corpus(toy_corpus, path)
    loaded = load_corpus(path)
    rng = np.random.default_rng(0)
    for img_idx, cap_idx in rng.choice(loaded.pairing, size=20):
        assert loaded.images[img_idx].identity_id == loaded.captions[cap_idx].identity_id
