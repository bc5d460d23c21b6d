"""Binary checkpoint: magic, version, config text, vocabulary, hashes, named float32 blobs, CRC.

Layout (little-endian)::

    b"ACLP" | u32 version
    | u32 len + config text | u32 len + vocabulary | u32 len + template hash | u32 len + organ map hash
    | u32 blob count | per blob: u16 len + name, u8 ndim, u32 dims..., float32 data
    | u32 crc32 of everything before it
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import dump_config, parse_config
from .encoders import TextConfig, VisionConfig, param_shapes
from .labels import DEFAULT_MAP
from .model import ClipModel
from .prompts import DEFAULT_BANK
from .tensor import Tensor
from .tokenizer import Vocabulary

MAGIC = b"ACLP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, str]
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    template_hash: str = DEFAULT_BANK.digest
    map_hash: str = DEFAULT_MAP.digest
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: ClipModel, config: dict | None = None) -> "Checkpoint":
        cfg = {f"vision.{k}": str(v) for k, v in vars(model.vision).items()}
        cfg.update({f"text.{k}": str(v) for k, v in vars(model.text).items()})
        cfg.update({k: str(v) for k, v in (config or {}).items()})
        return cls(cfg, {k: p.data.astype(np.float32, copy=True) for k, p in model.params.items()}, model.vocab)

    def to_model(self) -> ClipModel:
        vision = VisionConfig(**{k: int(self.config[f"vision.{k}"]) for k in
                                 ("image_size", "patch_size", "depth", "width", "heads", "embed_dim")})
        text = TextConfig(**{k: int(self.config[f"text.{k}"]) for k in
                             ("vocab_size", "context", "depth", "width", "heads", "embed_dim")})
        if text.vocab_size != len(self.vocab):
            raise VersionError(f"config vocab_size {text.vocab_size} but vocabulary holds {len(self.vocab)}")
        expected = param_shapes(vision, text)
        if set(expected) != set(self.params):
            raise VersionError("checkpoint tensors do not match the encoder configuration")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise VersionError(f"tensor {name} has shape {self.params[name].shape}, expected {shape}")
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return ClipModel(vision, text, params, self.vocab)

    def check_compatible(self, template_hash: str = DEFAULT_BANK.digest, map_hash: str = DEFAULT_MAP.digest) -> None:
        if self.template_hash != template_hash:
            raise VersionError(f"checkpoint template bank {self.template_hash} != current {template_hash}")
        if self.map_hash != map_hash:
            raise VersionError(f"checkpoint organ-station map {self.map_hash} != current {map_hash}")


def _pack_text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.version)
    out += _pack_text(dump_config(ckpt.config))
    out += _pack_text(ckpt.vocab.to_text())
    out += _pack_text(ckpt.template_hash)
    out += _pack_text(ckpt.map_hash)
    out += struct.pack("<I", len(ckpt.params))
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype="<f4", order="C")  # keeps 0-d arrays 0-d
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<I", f"{what} length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"invalid UTF-8 in {what} at offset {start}") from None


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} at offset 4, expected {FORMAT_VERSION}")
    if len(data) < 12:
        raise CheckpointError(f"truncated checkpoint of {len(data)} bytes")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError(f"checksum mismatch (stored at offset {len(data) - 4})")
    config = parse_config(r.text("config"))
    vocab = Vocabulary.from_text(r.text("vocabulary"))
    template_hash = r.text("template hash")
    map_hash = r.text("organ map hash")
    (count,) = r.unpack("<I", "blob count")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        start = r.pos
        blob = r.take(4 * size, f"{name} data")
        params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(params[name])):
            raise CheckpointError(f"non-finite values in {name} at offset {start}")
    if r.pos != len(data) - 4:
        raise CheckpointError(f"{len(data) - 4 - r.pos} unexpected trailing bytes at offset {r.pos}")
    return Checkpoint(config, params, vocab, template_hash, map_hash, version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
