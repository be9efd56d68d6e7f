import json

import pytest

from tbps.cli import TRAIN_SCHEMA, build_parser, run
from tbps.data_synth import load_corpus


@pytest.fixture(scope="module")
def pipeline(toy_corpus_path, tmp_path_factory):
    """synth -> train -> artifacts, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    out = root / "run"
    code = run(["train", "--corpus", str(toy_corpus_path), "-o", str(out),
                "--epochs", "2", "--seed", "0"])
    assert code == 0
    return toy_corpus_path, out, root


def test_synth_roundtrip(tmp_path):
    out = tmp_path / "corpus.json"
    assert run(["synth", "--ids", "6", "--images-per-id", "2", "--captions-per-image", "1",
                "--test-ids", "2", "--seed", "1", "-o", str(out)]) == 0
    corpus = load_corpus(out)
    assert len(corpus.images) == 12


def test_synth_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    argv = ["synth", "--ids", "4", "--test-ids", "1", "--seed", "9"]
    assert run(argv + ["-o", str(a)]) == 0
    assert run(argv + ["-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_writes_artifacts(pipeline):
    _, out, _ = pipeline
    for name in ("checkpoint.bin", "checkpoint_nodecoder.bin", "report.csv",
                 "summary.json", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert "config_hash" in manifest and "versions" in manifest


def test_eval_writes_metrics(pipeline, tmp_path):
    corpus_path, out, _ = pipeline
    eval_dir = tmp_path / "eval"
    code = run(["eval", "--corpus", str(corpus_path), "--checkpoint",
                str(out / "checkpoint.bin"), "--split", "train", "-o", str(eval_dir)])
    assert code == 0
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert set(metrics) == {"rank1", "rank5", "rank10", "reranked", "gap"}
    assert metrics["reranked"] is False


def test_eval_strip_decoder_identical_metrics(pipeline, tmp_path):
    corpus_path, out, _ = pipeline
    plain_dir, stripped_dir = tmp_path / "plain", tmp_path / "stripped"
    base = ["eval", "--corpus", str(corpus_path), "--checkpoint", str(out / "checkpoint.bin"),
            "--split", "train"]
    assert run(base + ["-o", str(plain_dir)]) == 0
    assert run(base + ["--strip-decoder", "-o", str(stripped_dir)]) == 0
    assert (plain_dir / "metrics.json").read_bytes() == \
        (stripped_dir / "metrics.json").read_bytes()


def test_eval_on_pre_stripped_checkpoint(pipeline, tmp_path):
    corpus_path, out, _ = pipeline
    eval_dir = tmp_path / "eval_nodecoder"
    code = run(["eval", "--corpus", str(corpus_path), "--checkpoint",
                str(out / "checkpoint_nodecoder.bin"), "--split", "train",
                "--rerank", "-o", str(eval_dir)])
    assert code == 0
    assert json.loads((eval_dir / "metrics.json").read_text())["reranked"] is True


def test_analyze_gap_and_dump_features(pipeline, tmp_path):
    corpus_path, out, _ = pipeline
    gap_dir = tmp_path / "gap"
    assert run(["analyze-gap", "--corpus", str(corpus_path), "--checkpoint",
                str(out / "checkpoint.bin"), "-o", str(gap_dir)]) == 0
    doc = json.loads((gap_dir / "spectrum.json").read_text())
    assert doc["gap"] >= 0
    assert len(doc["image_spectrum"]) == len(doc["text_spectrum"])

    csv_path = tmp_path / "features.csv"
    assert run(["dump-features", "--corpus", str(corpus_path), "--checkpoint",
                str(out / "checkpoint.bin"), "--split", "test", "-o", str(csv_path)]) == 0
    assert csv_path.read_text().startswith("modality,identity,f0")


def test_grad_check_subcommand(capsys):
    assert run(["grad-check", "--loss", "sew", "--coords", "20", "--seed", "0"]) == 0
    printed = capsys.readouterr().out
    assert "max relative error" in printed


def test_config_file_and_flag_precedence(toy_corpus_path, tmp_path):
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps({"version": "train_v1", "epochs": 1, "alpha": 16.0}))
    out = tmp_path / "run"
    assert run(["train", "--corpus", str(toy_corpus_path), "-c", str(cfg_path),
                "-o", str(out), "--epochs", "2"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs"] == 2  # flag beats config file


def test_unknown_config_key_hard_error(toy_corpus_path, tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"version": "train_v1", "epochz": 3}))
    code = run(["train", "--corpus", str(toy_corpus_path), "-c", str(cfg_path),
                "-o", str(tmp_path / "run")])
    assert code == 1
    assert "epochz" in capsys.readouterr().err


def test_runtime_failure_exit_one(tmp_path, capsys):
    code = run(["eval", "--corpus", str(tmp_path / "missing.json"),
                "--checkpoint", str(tmp_path / "missing.bin"), "-o", str(tmp_path / "o")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_bad_flag_usage_exit_two():
    with pytest.raises(SystemExit) as exc:
        run(["train", "--corpus", "x", "-o", "y", "--no-such-flag"])
    assert exc.value.code == 2


# ----- invariants ---------------------------------------------------------------

@pytest.mark.invariant
def test_config_keys_and_flags_bijective():
    parser = build_parser()
    train_parser = None
    for action in parser._subparsers._group_actions:
        train_parser = action.choices["train"]
    flag_dests = {a.dest for a in train_parser._actions}
    non_schema = {"help", "corpus", "config", "out", "threads"}
    assert flag_dests - non_schema == set(TRAIN_SCHEMA)


@pytest.mark.invariant
def test_every_flag_documented_in_help():
    parser = build_parser()
    for action in parser._subparsers._group_actions:
        for name, sub in action.choices.items():
            text = sub.format_help()
            for a in sub._actions:
                for opt in a.option_strings:
                    if opt.startswith("--"):
                        assert opt in text, f"{name}: {opt}"


@pytest.mark.invariant
def test_eval_deterministic_given_seed(pipeline, tmp_path):
    corpus_path, out, _ = pipeline
    results = []
    for sub in ("a", "b"):
        eval_dir = tmp_path / sub
        assert run(["eval", "--corpus", str(corpus_path), "--checkpoint",
                    str(out / "checkpoint.bin"), "--split", "test", "-o", str(eval_dir)]) == 0
        results.append((eval_dir / "metrics.json").read_bytes())
    assert results[0] == results[1]
