"""Listing-driven hidden-state export.

The tokenized-doc listing is the source of truth: the model consumes the
listing's token ids directly, so the exported rows line up one-to-one
with the tokens the classifier was trained against. Re-tokenizing the
raw text here serves only as a hard consistency gate — any divergence
aborts the run before a byte is written.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from msnet.embed_store import EmbeddingSet, write_file

log = logging.getLogger(__name__)


class ExportError(Exception):
    """Any condition that must abort the export."""


class ListingError(ExportError):
    """The tokenized-doc listing is malformed."""


class TokenizationMismatch(ExportError):
    """The listing disagrees with the reference tokenizer."""

    def __init__(self, doc_id: str, index: int | None, detail: str):
        position = f" at token {index}" if index is not None else ""
        super().__init__(f"doc {doc_id!r}{position}: {detail}")
        self.doc_id = doc_id
        self.index = index


class Preset(NamedTuple):
    encoder_layers: int
    hidden_size: int
    lowercase: bool


# Published encoder geometries; the guard refuses weights that claim one
# of these names but have a different shape.
PRESETS = {
    "base-uncased": Preset(encoder_layers=12, hidden_size=768, lowercase=True),
    "large-cased": Preset(encoder_layers=24, hidden_size=1024, lowercase=False),
}


@dataclass(frozen=True)
class ExportSpec:
    """Everything one export run needs, resolved."""

    weights: str  # local directory holding config + weights (+ vocab.txt)
    docs: str  # tokenized-doc JSONL listing
    out: str  # MSEB output path
    layers: int  # how many layers to export, topmost first
    vocab: str | None = None  # cross-check vocabulary; default weights/vocab.txt
    lowercase: bool = False  # uncased models fold case before WordPiece
    expect_layers: int | None = None  # encoder depth guard
    expect_hidden: int | None = None  # hidden size guard
    batch_size: int = 8

    def __post_init__(self):
        if self.layers < 1:
            raise ExportError(f"layers must be >= 1, got {self.layers}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def vocab_path(self) -> str:
        return self.vocab or os.path.join(self.weights, "vocab.txt")


@dataclass(frozen=True)
class ListedDoc:
    """One document of the listing: ids rule, text is for the cross-check."""

    doc_id: str
    text: str
    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    truncated: bool


def read_listing(path) -> list[ListedDoc]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                doc = ListedDoc(
                    doc_id=payload["id"],
                    text=payload["text"],
                    tokens=tuple(payload["tokens"]),
                    token_ids=tuple(int(i) for i in payload["token_ids"]),
                    truncated=bool(payload["truncated"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ListingError(f"{path}:{line_no}: {err}") from err
            if len(doc.tokens) != len(doc.token_ids):
                raise ListingError(
                    f"{path}:{line_no}: {len(doc.tokens)} tokens but "
                    f"{len(doc.token_ids)} token ids"
                )
            docs.append(doc)
    if not docs:
        raise ListingError(f"{path}: no documents listed")
    return docs


def _find_window(window: tuple[int, ...], reference: list[int]) -> bool:
    if not window:
        return False
    for start in range(len(reference) - len(window) + 1):
        if tuple(reference[start : start + len(window)]) == window:
            return True
    return False


def cross_check(doc: ListedDoc, tokenizer) -> None:
    """Compare the listing against an independent tokenization; abort on
    the first divergent token. Truncated docs keep a contiguous window of
    the full sequence, so for them the check is containment."""
    encoded = tokenizer.encode(doc.text)
    reference_ids = list(encoded.ids)
    reference_tokens = list(encoded.tokens)
    if doc.truncated:
        window = doc.token_ids[1:-1]  # strip the re-added [CLS]/[SEP]
        if not _find_window(window, reference_ids):
            raise TokenizationMismatch(
                doc.doc_id,
                None,
                "truncated token window is not a contiguous run of the "
                "reference tokenization",
            )
        return
    for i in range(max(len(doc.token_ids), len(reference_ids))):
        listed = doc.token_ids[i] if i < len(doc.token_ids) else None
        ref = reference_ids[i] if i < len(reference_ids) else None
        if listed != ref:
            listed_text = doc.tokens[i] if i < len(doc.tokens) else "<end>"
            ref_text = reference_tokens[i] if i < len(reference_tokens) else "<end>"
            raise TokenizationMismatch(
                doc.doc_id,
                i,
                f"listing has {listed_text!r} (id {listed}), reference "
                f"tokenizer produced {ref_text!r} (id {ref})",
            )


def _load_tokenizer(spec: ExportSpec):
    from tokenizers import BertWordPieceTokenizer

    return BertWordPieceTokenizer.from_file(spec.vocab_path, lowercase=spec.lowercase)


def _load_model(spec: ExportSpec):
    from transformers import BertModel

    model = BertModel.from_pretrained(spec.weights)
    model.eval()
    depth = model.config.num_hidden_layers
    width = model.config.hidden_size
    if spec.expect_layers is not None and depth != spec.expect_layers:
        raise ExportError(
            f"weights at {spec.weights} have {depth} encoder layers, "
            f"expected {spec.expect_layers}"
        )
    if spec.expect_hidden is not None and width != spec.expect_hidden:
        raise ExportError(
            f"weights at {spec.weights} have hidden size {width}, "
            f"expected {spec.expect_hidden}"
        )
    if spec.layers > depth:
        raise ExportError(
            f"cannot export {spec.layers} layers from a {depth}-layer encoder"
        )
    return model


def _embed_batch(model, batch: list[ListedDoc], layers: int) -> list[EmbeddingSet]:
    import torch

    lengths = [len(doc.token_ids) for doc in batch]
    width = max(lengths)
    ids = torch.zeros((len(batch), width), dtype=torch.long)
    mask = torch.zeros((len(batch), width), dtype=torch.long)
    for row, doc in enumerate(batch):
        ids[row, : lengths[row]] = torch.tensor(doc.token_ids, dtype=torch.long)
        mask[row, : lengths[row]] = 1
    with torch.no_grad():
        out = model(input_ids=ids, attention_mask=mask, output_hidden_states=True)
    hidden = out.hidden_states  # [0] is the embedding layer, excluded below
    top = len(hidden) - 1
    sets = []
    for row, doc in enumerate(batch):
        stack = np.stack(
            [hidden[top - l][row, : lengths[row]].numpy() for l in range(layers)]
        )
        sets.append(EmbeddingSet(doc_id=doc.doc_id, values=stack.astype(np.float32)))
    return sets


def export(spec: ExportSpec) -> int:
    """Run the full pipeline; returns the number of documents written."""
    docs = read_listing(spec.docs)
    tokenizer = _load_tokenizer(spec)
    for doc in docs:
        cross_check(doc, tokenizer)
    log.info("cross-check passed for %d documents", len(docs))
    model = _load_model(spec)
    sets = []
    for start in range(0, len(docs), spec.batch_size):
        sets.extend(_embed_batch(model, docs[start : start + spec.batch_size], spec.layers))
    write_file(spec.out, sets)
    log.info("wrote %d documents x %d layers to %s", len(sets), spec.layers, spec.out)
    return len(sets)
