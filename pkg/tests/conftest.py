import sys
from pathlib import Path

import pytest
import torch

from tbps.configs import CorpusConfig, EncoderConfig, MCMConfig, SewConfig, TrainConfig
from tbps.data_synth import generate_corpus, save_corpus
from tbps.trainer import train

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus():
    """The default desk-scale corpus: 32 identities x 4 images x 2 captions."""
    return generate_corpus(CorpusConfig(), seed=1)


@pytest.fixture(scope="session")
def toy_corpus_path(toy_corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.json"
    save_corpus(toy_corpus, path)
    return path


@pytest.fixture(scope="session")
def tiny_corpus():
    """A few identities for fast structural tests."""
    return generate_corpus(CorpusConfig(num_identities=6, images_per_identity=2,
                                        captions_per_image=1, num_test_identities=2),
                           seed=3)


def toy_train_settings(corpus, mode: str, seed: int):
    """Config bundle for the two experiment arms.

    "full": adaptive-margin matching/classification plus masked caption
    modeling. "baseline": fixed margin 0 and no caption modeling,
    approximating a plain softmax-style objective.
    """
    encoder_cfg = EncoderConfig()
    mcm_cfg = MCMConfig(vocab_size=len(corpus.vocab))
    if mode == "full":
        train_cfg = TrainConfig(seed=seed)
        sew_cfg = SewConfig()
    elif mode == "baseline":
        train_cfg = TrainConfig(seed=seed, mcm_on=False)
        sew_cfg = SewConfig(margin_mode="fixed", fixed_margin=0.0)
    else:
        raise ValueError(mode)
    return train_cfg, encoder_cfg, sew_cfg, mcm_cfg


@pytest.fixture(scope="session")
def trained_runs(toy_corpus, tmp_path_factory):
    """Lazy cache of trained models keyed by (mode, seed); trains on demand."""
    cache = {}
    root = tmp_path_factory.mktemp("runs")

    def get(mode: str, seed: int):
        key = (mode, seed)
        if key not in cache:
            train_cfg, encoder_cfg, sew_cfg, mcm_cfg = toy_train_settings(toy_corpus, mode, seed)
            out_dir = root / f"{mode}_{seed}"
            model, report = train(toy_corpus, train_cfg, encoder_cfg, sew_cfg, mcm_cfg,
                                  out_dir=out_dir)
            cache[key] = (model, report, out_dir)
        return cache[key]

    return get
