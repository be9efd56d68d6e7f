"""Versioned checkpoint container.

Layout (ckpt_v1):
    8-byte magic "TBPSCKPT"
    8-byte little-endian unsigned header length H
    H bytes of UTF-8 JSON header
    raw payload: float64 little-endian values for each tensor, concatenated
    in the header's "order" sequence, row-major within each tensor

Header schema:
    {"version": "ckpt_v1",
     "meta": {...model reconstruction info...},
     "order": [name, ...],
     "tensors": {name: {"shape": [ints], "kind": "param"|"buffer"}}}

Decoder arrays all live under the "decoder." name prefix so they can be
stripped without touching the retrieval path.
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .model import PersonSearchModel, model_from_meta

MAGIC = b"TBPSCKPT"
CHECKPOINT_FORMAT_VERSION = "ckpt_v1"
DECODER_PREFIX = "decoder."


def model_arrays(model: PersonSearchModel) -> dict[str, tuple[np.ndarray, str]]:
    out: dict[str, tuple[np.ndarray, str]] = {}
    for name, p in model.named_parameters():
        out[name] = (p.detach().numpy().astype("<f8"), "param")
    for name, b in model.named_buffers():
        out[name] = (b.detach().numpy().astype("<f8"), "buffer")
    return out


def save_checkpoint(path, model: PersonSearchModel, strip_decoder: bool = False) -> None:
    arrays = model_arrays(model)
    if strip_decoder:
        arrays = {n: v for n, v in arrays.items() if not n.startswith(DECODER_PREFIX)}
    order = sorted(arrays)
    header = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "meta": model.meta(),
        "order": order,
        "tensors": {n: {"shape": list(arrays[n][0].shape), "kind": arrays[n][1]} for n in order},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in order:
            fh.write(arrays[name][0].astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        arrays: dict[str, np.ndarray] = {}
        for name in header["order"]:
            shape = header["tensors"][name]["shape"]
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header


def load_model(path, strip_decoder: bool = False) -> PersonSearchModel:
    """Rebuild a model from a checkpoint; decoder arrays may be absent.

    Any missing non-decoder array is an error; a stripped checkpoint (or
    ``strip_decoder=True``, which discards decoder arrays on load) leaves the
    decoder at its zero-constructed state, which the retrieval path never
    touches.
    """
    arrays, header = read_checkpoint(path)
    if strip_decoder:
        arrays = {n: a for n, a in arrays.items() if not n.startswith(DECODER_PREFIX)}
    model = model_from_meta(header["meta"])
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    expected = {n for n, _ in model.named_parameters()} | {n for n, _ in model.named_buffers()}
    unknown = set(state) - expected
    if unknown:
        raise ValueError(f"checkpoint contains unknown arrays: {sorted(unknown)}")
    missing = {n for n in expected - set(state) if not n.startswith(DECODER_PREFIX)}
    if missing:
        raise ValueError(f"checkpoint is missing non-decoder arrays: {sorted(missing)}")
    model.load_state_dict(state, strict=False)
    return model
