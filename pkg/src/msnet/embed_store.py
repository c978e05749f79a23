"""Binary store for precomputed per-token hidden states.

File layout (all integers little-endian):

    magic  b"MSEB"
    u16    version (= 1)
    blocks, one per document:
        u16    id byte length, then that many UTF-8 bytes
        u16    L_total   (layer 0 = TOP hidden layer, increasing = deeper)
        u32    N         (token count, including specials)
        u32    d_H
        f32 × L_total·N·d_H   values, [layer][token][dim] order

Embeddings are stored as 32-bit floats and promoted to 64-bit at compute
time. `toy_embed` generates deterministic stand-in embeddings keyed by
(seed, token id, layer) so the whole pipeline runs without a pretrained
model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .numkit import make_rng
from .tokenizer import TokenizedDoc

MAGIC = b"MSEB"
VERSION = 1

_STREAM_TOY = 0x746F7965  # "toye"


@dataclass(frozen=True)
class EmbeddingSet:
    """Hidden states for one document: float32, shape (L_total, N, d_H)."""

    doc_id: str
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise DimensionError("values must be a (L_total, N, d_H) array")
        if v.dtype != np.float32:
            raise ValidationError("embeddings are stored as float32")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"non-finite embedding values in doc {self.doc_id!r}")
        if 0 in v.shape:
            raise DimensionError("L_total, N, d_H must all be positive")

    @property
    def layer_count(self):
        return self.values.shape[0]

    @property
    def token_count(self):
        return self.values.shape[1]

    @property
    def hidden_size(self):
        return self.values.shape[2]

    def top_layers(self, count: int) -> np.ndarray:
        """The top `count` layers as float64, shape (count, N, d_H)."""
        if not 1 <= count <= self.layer_count:
            raise DimensionError(
                f"asked for {count} layers, file holds {self.layer_count}"
            )
        return self.values[:count].astype(np.float64)


def write(stream, sets) -> None:
    """Write a header and one block per EmbeddingSet."""
    if isinstance(sets, EmbeddingSet):
        sets = [sets]
    stream.write(MAGIC)
    stream.write(struct.pack("<H", VERSION))
    for es in sets:
        id_bytes = es.doc_id.encode("utf-8")
        if len(id_bytes) > 0xFFFF:
            raise ValidationError(f"doc id too long ({len(id_bytes)} bytes)")
        L, n, d = es.values.shape
        if L > 0xFFFF:
            raise ValidationError(f"layer count {L} does not fit in u16")
        stream.write(struct.pack("<H", len(id_bytes)))
        stream.write(id_bytes)
        stream.write(struct.pack("<HII", L, n, d))
        stream.write(np.ascontiguousarray(es.values, dtype="<f4").tobytes())


def _take(stream, count, offset, what):
    data = stream.read(count)
    if len(data) != count:
        raise FormatError(f"truncated stream while reading {what}", offset=offset)
    return data


def read(stream) -> list[EmbeddingSet]:
    """Read every block; rejects bad magic/version, truncation, non-finite."""
    offset = 0
    magic = _take(stream, 4, offset, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    offset += 4
    (version,) = struct.unpack("<H", _take(stream, 2, offset, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=offset)
    offset += 2

    sets = []
    while True:
        head = stream.read(2)
        if head == b"":
            break
        if len(head) != 2:
            raise FormatError("truncated stream while reading id length", offset=offset)
        (id_len,) = struct.unpack("<H", head)
        offset += 2
        doc_id = _take(stream, id_len, offset, "doc id").decode("utf-8")
        offset += id_len
        L, n, d = struct.unpack("<HII", _take(stream, 10, offset, "block header"))
        offset += 10
        if L == 0 or n == 0 or d == 0:
            raise FormatError(f"empty dimensions ({L}, {n}, {d})", offset=offset)
        nbytes = L * n * d * 4
        raw = _take(stream, nbytes, offset, f"values of doc {doc_id!r}")
        values = np.frombuffer(raw, dtype="<f4").reshape(L, n, d)
        if not np.all(np.isfinite(values)):
            raise FormatError(f"non-finite values in doc {doc_id!r}", offset=offset)
        offset += nbytes
        sets.append(EmbeddingSet(doc_id=doc_id, values=values.copy()))
    return sets


def write_file(path, sets) -> None:
    with open(path, "wb") as f:
        write(f, sets)


def read_file(path) -> dict[str, EmbeddingSet]:
    """Read a file into an id-indexed mapping; duplicate ids are an error."""
    with open(path, "rb") as f:
        sets = read(f)
    out = {}
    for es in sets:
        if es.doc_id in out:
            raise FormatError(f"duplicate doc id {es.doc_id!r}")
        out[es.doc_id] = es
    return out


def toy_embed(doc: TokenizedDoc, layer_count: int, hidden_size: int, seed: int) -> EmbeddingSet:
    """Deterministic uniform[-1, 1] embeddings, identical for identical
    token ids within a layer regardless of position."""
    if layer_count < 1 or hidden_size < 1:
        raise ValidationError("layer_count and hidden_size must be positive")
    values = np.empty((layer_count, len(doc.tokens), hidden_size), dtype=np.float32)
    cache: dict[tuple[int, int], np.ndarray] = {}
    for layer in range(layer_count):
        for pos, token_id in enumerate(doc.token_ids):
            key = (token_id, layer)
            vec = cache.get(key)
            if vec is None:
                rng = make_rng(seed, _STREAM_TOY, token_id, layer)
                vec = rng.uniform(-1.0, 1.0, size=hidden_size).astype(np.float32)
                cache[key] = vec
            values[layer, pos] = vec
    return EmbeddingSet(doc_id=doc.doc_id, values=values)
