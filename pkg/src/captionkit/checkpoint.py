"""Checkpoint container for both model kinds.

Layout: magic ``CCKP`` | u32 version | u32 header length | JSON header |
parameter blobs. The header carries the model kind tag, a config echo, the
training seed, the epoch, the vocabulary (when supplied) and the name/shape
of every parameter; the blobs are the parameters' float64 little-endian bytes
concatenated in header order, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, is_dataclass

import numpy as np

from captionkit.autodiff import Tensor
from captionkit.convmodel import CaptionModel, ModelConfig
from captionkit.data import Vocabulary
from captionkit.lstmmodel import LstmConfig, LstmModel

MAGIC = b"CCKP"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class CheckpointMismatchError(CheckpointError):
    """Stored configuration conflicts with what the caller expects."""


@dataclass
class LoadedCheckpoint:
    kind: str
    model: CaptionModel | LstmModel
    seed: int
    epoch: int
    vocab: Vocabulary | None


def save_checkpoint(path, model, *, seed: int, epoch: int, vocab: Vocabulary | None = None) -> None:
    header = {
        "version": VERSION,
        "kind": model.kind,
        "config": model.config_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "vocab": vocab.id_to_token if vocab is not None else None,
        "params": [
            {"name": name, "shape": list(t.data.shape)} for name, t in model.parameters().items()
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for t in model.parameters().values():
            fh.write(t.data.astype("<f8").tobytes())
    os.replace(tmp, path)


def _rebuild(kind: str, config: dict):
    if kind == "cnn":
        config = dict(config)
        config["kernel_widths"] = tuple(config["kernel_widths"])
        return ModelConfig(**config)
    if kind == "lstm":
        return LstmConfig(**config)
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path, expect_config=None) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    config = _rebuild(header["kind"], header["config"])

    if expect_config is not None and config != expect_config:
        stored = header["config"]
        expected = asdict(expect_config) if is_dataclass(expect_config) else dict(expect_config)
        diffs = sorted(
            k for k in set(stored) | set(expected)
            if _norm(stored.get(k)) != _norm(expected.get(k))
        )
        raise CheckpointMismatchError(f"{path}: config mismatch on {', '.join(diffs)}")

    pos = 12 + header_len
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated parameter {entry['name']}")
        arr = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")

    model_cls = CaptionModel if header["kind"] == "cnn" else LstmModel
    model = model_cls(config, params)
    vocab = Vocabulary(header["vocab"]) if header["vocab"] else None
    return LoadedCheckpoint(
        kind=header["kind"], model=model, seed=header["seed"], epoch=header["epoch"], vocab=vocab
    )


def _norm(value):
    return list(value) if isinstance(value, tuple) else value
