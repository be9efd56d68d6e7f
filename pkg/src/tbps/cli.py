"""Command-line entry point wiring corpus generation, training, and evaluation.

Subcommands: synth, train, eval, analyze-gap, dump-features, grad-check.
Training hyperparameters resolve as dataclass defaults < config file < flags;
the config file is a flat JSON object (schema version "train_v1") whose keys
map one-to-one onto the train subcommand's override flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .checkpoint import CHECKPOINT_FORMAT_VERSION, load_model
from .configs import CorpusConfig, EncoderConfig, MCMConfig, SewConfig, TrainConfig
from .data_synth import CORPUS_FORMAT_VERSION, generate_corpus, load_corpus, save_corpus
from .eval_analysis import (compute_split_features, dump_features, retrieval_metrics,
                            svd_spectrum_gap)
from .trainer import run_grad_check, train, write_report_csv, write_report_summary

TRAIN_CONFIG_VERSION = "train_v1"

# (config key, section). The key doubles as the CLI flag (dashes for
# underscores); booleans get --key/--no-key pairs.
TRAIN_SCHEMA: dict[str, str] = {
    "epochs": "train", "batch_size": "train", "learning_rate": "train",
    "lambda1": "train", "lambda2": "train", "seed": "train",
    "adam_beta1": "train", "adam_beta2": "train", "adam_eps": "train",
    "sew_on": "train", "mcm_on": "train", "mask_only": "train", "attn_only": "train",
    "alpha": "sew", "margin_min": "sew", "margin_max": "sew",
    "len_min": "sew", "len_max": "sew", "margin_mode": "sew",
    "fixed_margin": "sew", "count_special_tokens": "sew",
    "mask_ratio": "mcm", "decoder_blocks": "mcm", "force_min_one": "mcm",
    "embed_dim": "encoder", "depth": "encoder", "heads": "encoder",
    "max_text_tokens": "encoder", "mlp_ratio": "encoder",
}

_SECTION_CLASSES = {"train": TrainConfig, "sew": SewConfig, "mcm": MCMConfig,
                    "encoder": EncoderConfig}


def _field_types() -> dict[str, type]:
    defaults = {name: cls() for name, cls in _SECTION_CLASSES.items()}
    return {key: type(getattr(defaults[section], key)) for key, section in TRAIN_SCHEMA.items()}


def _add_schema_flags(parser: argparse.ArgumentParser) -> None:
    types = _field_types()
    for key in TRAIN_SCHEMA:
        flag = "--" + key.replace("_", "-")
        if types[key] is bool:
            parser.add_argument(flag, dest=key, default=None,
                                action=argparse.BooleanOptionalAction,
                                help=f"override config key '{key}'")
        else:
            parser.add_argument(flag, dest=key, default=None, type=types[key],
                                help=f"override config key '{key}'")


def read_train_config_file(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("train config must be a JSON object")
    version = doc.pop("version", TRAIN_CONFIG_VERSION)
    if version != TRAIN_CONFIG_VERSION:
        raise ValueError(f"unsupported train config version {version!r}")
    unknown = set(doc) - set(TRAIN_SCHEMA)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return doc


def resolve_train_configs(corpus, file_values: dict, flag_values: dict):
    """Merge defaults, config file, and explicit flags into the four configs.

    Margin-length bounds default to the observed train-split caption length
    range when not set explicitly.
    """
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})

    sections: dict[str, dict] = {s: {} for s in _SECTION_CLASSES}
    for key, value in merged.items():
        sections[TRAIN_SCHEMA[key]][key] = value

    if "len_min" not in sections["sew"] or "len_max" not in sections["sew"]:
        lengths = [corpus.captions[i].length for i in corpus.caption_indices("train")]
        lo, hi = min(lengths), max(lengths)
        if hi <= lo:
            hi = lo + 1
        sections["sew"].setdefault("len_min", lo)
        sections["sew"].setdefault("len_max", hi)

    grid_tokens = corpus.grid_size ** 2 + 1
    encoder_kwargs = dict(sections["encoder"])
    encoder_kwargs["max_image_tokens"] = grid_tokens

    train_cfg = TrainConfig(**sections["train"])
    sew_cfg = SewConfig(**sections["sew"])
    mcm_cfg = MCMConfig(vocab_size=len(corpus.vocab), **sections["mcm"])
    encoder_cfg = EncoderConfig(**encoder_kwargs)
    resolved = {
        "version": TRAIN_CONFIG_VERSION,
        **{k: sections[TRAIN_SCHEMA[k]].get(k) for k in TRAIN_SCHEMA},
    }
    for key in TRAIN_SCHEMA:
        if resolved[key] is None:
            section, cls = TRAIN_SCHEMA[key], _SECTION_CLASSES[TRAIN_SCHEMA[key]]
            resolved[key] = getattr({"train": train_cfg, "sew": sew_cfg, "mcm": mcm_cfg,
                                     "encoder": encoder_cfg}[section], key)
    return train_cfg, sew_cfg, mcm_cfg, encoder_cfg, resolved


def write_manifest(out_dir: Path, resolved_config: dict, seed: int) -> None:
    canonical = json.dumps(resolved_config, sort_keys=True, separators=(",", ":"))
    doc = {
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "versions": {
            "package": __version__,
            "corpus_format": CORPUS_FORMAT_VERSION,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
            "train_config_format": TRAIN_CONFIG_VERSION,
        },
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbps",
                                     description="Toy text-based person search workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--ids", type=int, default=32, help="number of identities")
    p.add_argument("--images-per-id", type=int, default=4)
    p.add_argument("--captions-per-image", type=int, default=2)
    p.add_argument("--test-ids", type=int, default=8, help="held-out identity count")
    p.add_argument("--grid-size", type=int, default=4)
    p.add_argument("--verbosity-min", type=int, default=10)
    p.add_argument("--verbosity-max", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="corpus JSON path")

    p = sub.add_parser("train", help="train the dual encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("-c", "--config", default=None, help="train_v1 JSON config file")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="1 = bit-deterministic reference mode")
    _add_schema_flags(p)

    p = sub.add_parser("eval", help="text-to-image retrieval metrics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--rerank", action="store_true", help="apply k-reciprocal re-ranking")
    p.add_argument("--bn-at-eval", action="store_true",
                   help="apply running-stats BatchNorm to CLS features at inference")
    p.add_argument("--strip-decoder", action="store_true",
                   help="drop decoder arrays from the checkpoint before evaluating")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lambda-mix", type=float, default=0.3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("analyze-gap", help="modality spectrum-gap report")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--bn-at-eval", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("dump-features", help="write CLS features to CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--bn-at-eval", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--output", required=True, help="CSV path")

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--loss", choices=["sew", "cls", "mcm", "total", "quadratic"], default="total")
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--threads", type=int, default=1)
    return parser


def _cmd_synth(args) -> int:
    cfg = CorpusConfig(num_identities=args.ids, images_per_identity=args.images_per_id,
                       captions_per_image=args.captions_per_image,
                       num_test_identities=args.test_ids, grid_size=args.grid_size,
                       verbosity_min=args.verbosity_min, verbosity_max=args.verbosity_max)
    corpus = generate_corpus(cfg, args.seed)
    save_corpus(corpus, args.output)
    print(f"wrote {args.output}: {len(corpus.images)} images, {len(corpus.captions)} captions, "
          f"{len(corpus.identities('train'))} train / {len(corpus.identities('test'))} test identities")
    return 0


def _cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    file_values = read_train_config_file(args.config) if args.config else {}
    flag_values = {k: getattr(args, k) for k in TRAIN_SCHEMA}
    train_cfg, sew_cfg, mcm_cfg, encoder_cfg, resolved = resolve_train_configs(
        corpus, file_values, flag_values)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, report = train(corpus, train_cfg, encoder_cfg, sew_cfg, mcm_cfg, out_dir=out_dir,
                      threads=args.threads)
    write_report_csv(report, out_dir / "report.csv")
    write_report_summary(report, out_dir / "summary.json")
    write_manifest(out_dir, resolved, train_cfg.seed)
    print(f"trained {report.epochs} epochs x {report.steps_per_epoch} steps in "
          f"{report.wall_time_seconds:.1f}s; final loss {report.steps[-1].total:.4f}; "
          f"checkpoint {report.checkpoint_path}")
    return 0


def _load_eval_model(args):
    if getattr(args, "strip_decoder", False):
        return load_model(args.checkpoint, strip_decoder=True)
    return load_model(args.checkpoint)


def _cmd_eval(args) -> int:
    torch.set_num_threads(args.threads)
    corpus = load_corpus(args.corpus)
    model = _load_eval_model(args)
    result, spectrum = retrieval_metrics(model, corpus, args.split, bn_at_eval=args.bn_at_eval,
                                         rerank=args.rerank, k1=args.k1, k2=args.k2,
                                         lambda_mix=args.lambda_mix)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {"rank1": result.rank1, "rank5": result.rank5, "rank10": result.rank10,
               "reranked": result.reranked, "gap": spectrum.gap}
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    write_manifest(out_dir, {"command": "eval", "split": args.split, "rerank": args.rerank,
                             "bn_at_eval": args.bn_at_eval, "strip_decoder": args.strip_decoder,
                             "k1": args.k1, "k2": args.k2, "lambda_mix": args.lambda_mix}, seed=0)
    print(f"rank1={result.rank1:.4f} rank5={result.rank5:.4f} rank10={result.rank10:.4f} "
          f"gap={spectrum.gap:.4f} reranked={result.reranked}")
    return 0


def _cmd_analyze_gap(args) -> int:
    torch.set_num_threads(args.threads)
    corpus = load_corpus(args.corpus)
    model = load_model(args.checkpoint)
    feats = compute_split_features(model, corpus, args.split, bn_at_eval=args.bn_at_eval)
    spectrum = svd_spectrum_gap(feats.image_features, feats.text_features)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "spectrum.json", "w") as fh:
        json.dump({"gap": spectrum.gap,
                   "image_spectrum": spectrum.image_spectrum.tolist(),
                   "text_spectrum": spectrum.text_spectrum.tolist()}, fh, indent=2)
    write_manifest(out_dir, {"command": "analyze-gap", "split": args.split,
                             "bn_at_eval": args.bn_at_eval}, seed=0)
    print(f"spectrum gap {spectrum.gap:.6f} ({args.split} split)")
    return 0


def _cmd_dump_features(args) -> int:
    torch.set_num_threads(args.threads)
    corpus = load_corpus(args.corpus)
    model = load_model(args.checkpoint)
    feats = compute_split_features(model, corpus, args.split, bn_at_eval=args.bn_at_eval)
    dump_features(feats, args.output)
    n = feats.image_features.shape[0] + feats.text_features.shape[0]
    print(f"wrote {n} feature rows to {args.output}")
    return 0


def _cmd_grad_check(args) -> int:
    torch.set_num_threads(args.threads)
    result = run_grad_check(args.loss, coords=args.coords, eps=args.eps, seed=args.seed)
    print(f"{result.name}: max relative error {result.max_rel_err:.3e} "
          f"over {result.coords_checked} of {result.dim} coordinates")
    return 0 if result.max_rel_err <= args.tol else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze-gap": _cmd_analyze_gap,
    "dump-features": _cmd_dump_features,
    "grad-check": _cmd_grad_check,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - single diagnostic line, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
