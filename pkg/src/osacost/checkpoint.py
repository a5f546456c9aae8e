"""Self-describing model checkpoints.

Layout: the magic ``CCF1``, a little-endian uint32 header length, a UTF-8
JSON header (format version, model kind, config, vocabularies and a
tensor manifest), then the tensors as little-endian float32 in manifest
order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .baselines import RecurrentConfig, RecurrentSeq2Seq
from .data import InputVocabs, Vocab
from .transformer import TransformerConfig, TransformerModel

MAGIC = b"CCF1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, vocabs, tgt_vocab, extra=None):
    state = model.state_dict()
    manifest, offset = [], 0
    for name, arr in state.items():
        nbytes = int(arr.size) * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": VERSION,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "input_vocabs": vocabs.to_json(),
        "target_vocab": tgt_vocab.to_json(),
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_header(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        return header, 8 + n


def load_checkpoint(path):
    """Returns ``(model, input_vocabs, target_vocab, extra)``."""
    header, start = read_header(path)
    payload = Path(path).read_bytes()[start:]
    state = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        state[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"])
    kind = header["kind"]
    if kind == "transformer":
        model = TransformerModel(TransformerConfig(**header["config"]))
    elif kind == "recurrent":
        model = RecurrentSeq2Seq(RecurrentConfig(**header["config"]))
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model.load_state_dict(state)
    return model, InputVocabs.from_json(header["input_vocabs"]), Vocab.from_json(header["target_vocab"]), header["extra"]
