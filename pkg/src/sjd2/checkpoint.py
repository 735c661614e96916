"""Binary checkpoint format: versioned JSON header plus named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"JDD2"
    version u32      format version (currently 1)
    hdrlen  u32      length of the UTF-8 JSON header
    header  bytes    {"format_version", "model", "train_step", "config_hash",
                      "corpus_hash", "tensor_count"}
    then, tensor_count records:
      name_len u32, name bytes, rank u32, shape u64 * rank,
      payload_len u64, payload (float32, row-major)

Parameters are stored and held in float32, so save -> load round-trips
bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .errors import ConfigMismatchError, FormatError
from .model import ModelConfig, ToyModel, init_params

MAGIC = b"JDD2"
FORMAT_VERSION = 1


def _param_shapes(config: ModelConfig) -> dict:
    D, V, C = config.embed_dim, config.vocab_size, config.context_len
    shapes = {
        "tok_emb": (V, D), "pos_emb": (C, D),
        "ln_f.g": (D,), "ln_f.b": (D,), "head.w": (D, V), "head.b": (V,),
    }
    for i in range(config.num_layers):
        shapes.update({
            f"l{i}.ln1.g": (D,), f"l{i}.ln1.b": (D,),
            f"l{i}.qkv.w": (D, 3 * D), f"l{i}.qkv.b": (3 * D,),
            f"l{i}.proj.w": (D, D), f"l{i}.proj.b": (D,),
            f"l{i}.ln2.g": (D,), f"l{i}.ln2.b": (D,),
            f"l{i}.fc1.w": (D, 4 * D), f"l{i}.fc1.b": (4 * D,),
            f"l{i}.fc2.w": (4 * D, D), f"l{i}.fc2.b": (D,),
        })
    return shapes


def save_checkpoint(model: ToyModel, path: str, config_hash: str = "",
                    corpus_hash: str = ""):
    """Write the model atomically (temp file + rename)."""
    names = model.param_names()
    header = {
        "format_version": FORMAT_VERSION,
        "model": asdict(model.config),
        "train_step": int(model.train_step),
        "config_hash": config_hash,
        "corpus_hash": corpus_hash,
        "tensor_count": len(names),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        f.write(hdr)
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = arr.tobytes()
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, f):
        self.f = f
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.f.read(n)
        self.offset += len(data)
        if len(data) != n:
            raise FormatError(f"truncated checkpoint while reading {what}",
                              offset=self.offset)
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.read(8, what))[0]


def load_checkpoint(path: str):
    """Read a checkpoint; returns (ToyModel, header dict).

    Any structural problem (bad magic, truncation, shape mismatch against the
    header's model config) raises FormatError with the failing byte offset;
    no partially loaded model is ever returned.
    """
    with open(path, "rb") as f:
        r = _Reader(f)
        if r.read(4, "magic") != MAGIC:
            raise FormatError("bad magic bytes (not a checkpoint)", offset=0)
        version = r.u32("version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        hdrlen = r.u32("header length")
        try:
            header = json.loads(r.read(hdrlen, "header"))
        except json.JSONDecodeError as e:
            raise FormatError(f"undecodable header: {e}", offset=12) from e
        try:
            config = ModelConfig(**header["model"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"header missing model config: {e}") from e
        expected = _param_shapes(config)
        count = header.get("tensor_count", len(expected))
        params = {}
        for _ in range(count):
            name_len = r.u32("tensor name length")
            name = r.read(name_len, "tensor name").decode()
            rank = r.u32("tensor rank")
            shape = struct.unpack(f"<{rank}Q", r.read(8 * rank, "tensor shape"))
            payload_len = r.u64("payload length")
            want = int(np.prod(shape, dtype=np.int64)) * 4 if rank else 4
            if payload_len != want:
                raise FormatError(
                    f"tensor {name!r} payload length {payload_len} != {want}",
                    offset=r.offset)
            data = r.read(payload_len, f"tensor {name!r} payload")
            params[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise FormatError("trailing bytes after last tensor", offset=r.offset)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise FormatError(
            f"tensor set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(
                f"tensor {name!r} has shape {params[name].shape}, expected {shape}")
    model = ToyModel(config, params, train_step=header.get("train_step", 0))
    return model, header


def check_runtime_config(header: dict, config: ModelConfig):
    """Reject a checkpoint whose stored config disagrees with the runtime one."""
    stored = ModelConfig(**header["model"])
    if stored != config:
        raise ConfigMismatchError(
            f"checkpoint model config {asdict(stored)} does not match runtime "
            f"config {asdict(config)}"
        )


def fresh_model(config: ModelConfig) -> ToyModel:
    return ToyModel(config, init_params(config))
