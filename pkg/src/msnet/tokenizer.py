"""WordPiece tokenization with character-span tracking.

The basic pass walks the original text one character at a time
(whitespace split, punctuation and CJK isolation, optional lowercasing
with accent stripping), keeping the original index of every character
it emits, so each subword can report the exact (start, end) range it
covers in the untouched input. Greedy longest-match-first segmentation
then runs per word; a word with no segmentation becomes a single [UNK]
spanning the whole word.

Mentions arrive as GAP character offsets and are mapped to the minimal
contiguous token range covering them; the pronoun is represented by the
first token of its range. Documents longer than the token limit lose
tokens from the end farther away from the mention cluster first, and
never lose mention tokens.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass, field

from .errors import (
    AlignmentError,
    ConfigError,
    FormatError,
    UnprocessableRecordError,
    ValidationError,
)
from .gap_data import GapRecord

log = logging.getLogger(__name__)

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
UNK_TOKEN = "[UNK]"
DEFAULT_TOKEN_LIMIT = 300


@dataclass(frozen=True)
class Vocab:
    """WordPiece vocabulary: one token per line, line number = id."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]
    lowercase: bool = False
    unk_token: str = UNK_TOKEN
    continuation_prefix: str = "##"
    max_chars_per_word: int = 100

    def __post_init__(self):
        for special in (CLS_TOKEN, SEP_TOKEN, self.unk_token):
            if special not in self.token_to_id:
                raise ConfigError(f"vocab is missing required token {special}")
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise ConfigError("vocab ids must be dense in [0, size)")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id[token]

    @classmethod
    def from_tokens(cls, tokens, lowercase: bool = False) -> "Vocab":
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocab contains duplicate tokens")
        return cls(
            token_to_id={t: i for i, t in enumerate(tokens)},
            id_to_token=tuple(tokens),
            lowercase=lowercase,
        )

    @classmethod
    def load(cls, path, lowercase: bool = False) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\r\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls.from_tokens(tokens, lowercase=lowercase)


@dataclass(frozen=True)
class SubToken:
    """One WordPiece token with the original-text range it covers."""

    text: str
    id: int
    span: tuple[int, int] | None  # None for [CLS]/[SEP]

    @property
    def is_special(self):
        return self.span is None


@dataclass
class TokenizedDoc:
    """Finalized token sequence with resolved mention indices."""

    doc_id: str
    tokens: list[SubToken]
    p_index: int
    a_span: tuple[int, int]
    b_span: tuple[int, int]
    truncated: bool = False
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.tokens)
        if n < 3 or self.tokens[0].text != CLS_TOKEN or self.tokens[-1].text != SEP_TOKEN:
            raise ValidationError("finalized docs start with [CLS] and end with [SEP]")
        for name, (s, e) in (("a_span", self.a_span), ("b_span", self.b_span)):
            if not (1 <= s < e <= n - 1):
                raise ValidationError(f"{name} {s, e} must be non-empty and inside the specials")
        if not 1 <= self.p_index <= n - 2:
            raise ValidationError("p_index must lie strictly between the specials")

    @property
    def token_ids(self):
        return [t.id for t in self.tokens]

    @property
    def token_texts(self):
        return [t.text for t in self.tokens]

    def surface(self, text: str, span: tuple[int, int]) -> str:
        """Original-text slice covered by a token range."""
        spans = [t.span for t in self.tokens[span[0] : span[1]] if t.span is not None]
        if not spans:
            return ""
        return text[spans[0][0] : spans[-1][1]]


# --- character classes (standard WordPiece basic-tokenizer rules) -------------


def _is_whitespace(ch):
    if ch in " \t\n\r":
        return True
    return unicodedata.category(ch) == "Zs"


def _is_control(ch):
    if ch in "\t\n\r":
        return False
    return unicodedata.category(ch).startswith("C")


def _is_punctuation(ch):
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _is_cjk(ch):
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0x2A700 <= cp <= 0x2B73F
        or 0x2B740 <= cp <= 0x2B81F
        or 0x2B820 <= cp <= 0x2CEAF
        or 0xF900 <= cp <= 0xFAFF
        or 0x2F800 <= cp <= 0x2FA1F
    )


def _normalize_char(ch: str, lowercase: bool) -> str:
    """Lowercase + strip combining marks, one input character at a time,
    so every output character still knows its original index."""
    if not lowercase:
        return ch
    out = []
    for d in unicodedata.normalize("NFD", ch):
        if unicodedata.category(d) == "Mn":
            continue
        out.append(d.lower())
    return "".join(out)


def _basic_split(text: str, lowercase: bool):
    """Split into words; each word is (chars, original index per char)."""
    words = []
    buf_chars: list[str] = []
    buf_idx: list[int] = []

    def flush():
        if buf_chars:
            words.append(("".join(buf_chars), list(buf_idx)))
            buf_chars.clear()
            buf_idx.clear()

    for idx, ch in enumerate(text):
        if ord(ch) == 0 or ord(ch) == 0xFFFD or _is_control(ch):
            continue
        if _is_whitespace(ch):
            flush()
            continue
        if _is_punctuation(ch) or _is_cjk(ch):
            flush()
            words.append((ch, [idx]))
            continue
        for norm in _normalize_char(ch, lowercase):
            buf_chars.append(norm)
            buf_idx.append(idx)
    flush()
    return words


def wordpiece(text: str, vocab: Vocab) -> list[SubToken]:
    """Tokenize a document; total function, unknown words become [UNK]."""
    unk_id = vocab.id(vocab.unk_token)
    prefix = vocab.continuation_prefix
    tokens: list[SubToken] = []
    for chars, idx in _basic_split(text, vocab.lowercase):
        word_span = (idx[0], idx[-1] + 1)
        if len(chars) > vocab.max_chars_per_word:
            tokens.append(SubToken(vocab.unk_token, unk_id, word_span))
            continue
        pieces: list[SubToken] = []
        start = 0
        while start < len(chars):
            end = len(chars)
            found = None
            while start < end:
                candidate = chars[start:end]
                if start > 0:
                    candidate = prefix + candidate
                if candidate in vocab:
                    found = (candidate, end)
                    break
                end -= 1
            if found is None:
                pieces = [SubToken(vocab.unk_token, unk_id, word_span)]
                break
            piece, end = found
            pieces.append(SubToken(piece, vocab.id(piece), (idx[start], idx[end - 1] + 1)))
            start = end
        tokens.extend(pieces)
    return tokens


@dataclass(frozen=True)
class AlignResult:
    span: tuple[int, int]  # token index range [start, end)
    exact: bool


def align(tokens: list[SubToken], char_offset: int, surface: str) -> AlignResult:
    """Minimal contiguous token range covering [offset, offset+len(surface)).

    `exact` is False when the mention boundary falls strictly inside a
    token, in which case the enclosing range is returned and the caller
    should log a diagnostic.
    """
    if not surface:
        raise AlignmentError("cannot align an empty surface string")
    target = (char_offset, char_offset + len(surface))
    hit_first = hit_last = None
    for i, tok in enumerate(tokens):
        if tok.span is None:
            continue
        s, e = tok.span
        if s < target[1] and e > target[0]:  # interval overlap
            if hit_first is None:
                hit_first = i
            hit_last = i
    if hit_first is None:
        raise AlignmentError(
            f"no token covers characters [{target[0]}, {target[1]}) ({surface!r})"
        )
    first_span = tokens[hit_first].span
    last_span = tokens[hit_last].span
    exact = first_span[0] >= target[0] and last_span[1] <= target[1]
    return AlignResult(span=(hit_first, hit_last + 1), exact=exact)


def _truncate(n_tokens: int, p_index: int, a_span, b_span, limit: int):
    """Return (keep_start, keep_end) after dropping excess tokens from the
    end farther from the mention cluster first, then the other end."""
    cluster_lo = min(p_index, a_span[0], b_span[0])
    cluster_hi = max(p_index + 1, a_span[1], b_span[1])
    if cluster_hi - cluster_lo > limit:
        raise UnprocessableRecordError(
            f"mention cluster spans {cluster_hi - cluster_lo} tokens, over the {limit} limit"
        )
    if n_tokens <= limit:
        return 0, n_tokens
    excess = n_tokens - limit
    head_room = cluster_lo
    tail_room = n_tokens - cluster_hi
    if tail_room >= head_room:
        cut_tail = min(excess, tail_room)
        cut_head = excess - cut_tail
    else:
        cut_head = min(excess, head_room)
        cut_tail = excess - cut_head
    return cut_head, n_tokens - cut_tail


def truncate_and_finalize(
    doc_id: str,
    tokens: list[SubToken],
    p_index: int,
    a_span: tuple[int, int],
    b_span: tuple[int, int],
    vocab: Vocab,
    limit: int = DEFAULT_TOKEN_LIMIT,
    notes: list[str] | None = None,
) -> TokenizedDoc:
    """Apply the token limit, add [CLS]/[SEP], and shift all indices."""
    keep_start, keep_end = _truncate(len(tokens), p_index, a_span, b_span, limit)
    truncated = (keep_start, keep_end) != (0, len(tokens))
    kept = tokens[keep_start:keep_end]
    shift = 1 - keep_start  # specials move everything right by one

    final = [SubToken(CLS_TOKEN, vocab.id(CLS_TOKEN), None)]
    final.extend(kept)
    final.append(SubToken(SEP_TOKEN, vocab.id(SEP_TOKEN), None))
    return TokenizedDoc(
        doc_id=doc_id,
        tokens=final,
        p_index=p_index + shift,
        a_span=(a_span[0] + shift, a_span[1] + shift),
        b_span=(b_span[0] + shift, b_span[1] + shift),
        truncated=truncated,
        notes=list(notes or []),
    )


def tokenize_record(record: GapRecord, vocab: Vocab, limit: int = DEFAULT_TOKEN_LIMIT) -> TokenizedDoc:
    """Full pipeline for one GAP record: wordpiece, align P/A/B, finalize."""
    tokens = wordpiece(record.text, vocab)
    notes = []
    p = align(tokens, record.pronoun_offset, record.pronoun)
    a = align(tokens, record.a_offset, record.a_text)
    b = align(tokens, record.b_offset, record.b_text)
    for name, res in (("pronoun", p), ("A", a), ("B", b)):
        if not res.exact:
            notes.append(f"{name} alignment inexact: boundary falls inside a token")
    return truncate_and_finalize(
        record.id, tokens, p.span[0], a.span, b.span, vocab, limit=limit, notes=notes
    )


# --- CLI-facing listings -------------------------------------------------------


def diagnostics_row(doc: TokenizedDoc) -> str:
    """One row of the `tokenize` subcommand's diagnostic TSV."""
    return "\t".join(
        (
            doc.doc_id,
            str(len(doc.tokens)),
            str(doc.p_index),
            f"{doc.a_span[0]}:{doc.a_span[1]}",
            f"{doc.b_span[0]}:{doc.b_span[1]}",
            "TRUE" if doc.truncated else "FALSE",
        )
    )


DIAGNOSTICS_HEADER = "\t".join(
    ("id", "token_count", "p_index", "a_span", "b_span", "truncated")
)


def doc_to_json(doc: TokenizedDoc, text: str) -> str:
    """One JSONL line of the tokenized-doc listing consumed by exporters."""
    payload = {
        "id": doc.doc_id,
        "text": text,
        "tokens": doc.token_texts,
        "token_ids": doc.token_ids,
        "char_spans": [list(t.span) if t.span else None for t in doc.tokens],
        "p_index": doc.p_index,
        "a_span": list(doc.a_span),
        "b_span": list(doc.b_span),
        "truncated": doc.truncated,
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=False)


def doc_from_json(line: str) -> TokenizedDoc:
    """Rebuild a TokenizedDoc from one listing line (inverse of doc_to_json)."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as err:
        raise FormatError(f"listing line is not valid JSON: {err}") from err
    try:
        tokens = [
            SubToken(text=text, id=int(tid), span=tuple(span) if span else None)
            for text, tid, span in zip(
                payload["tokens"], payload["token_ids"], payload["char_spans"], strict=True
            )
        ]
        return TokenizedDoc(
            doc_id=payload["id"],
            tokens=tokens,
            p_index=int(payload["p_index"]),
            a_span=tuple(payload["a_span"]),
            b_span=tuple(payload["b_span"]),
            truncated=bool(payload["truncated"]),
        )
    except KeyError as err:
        raise FormatError(f"listing line is missing field {err}") from err
    except ValueError as err:
        raise FormatError(f"malformed listing line: {err}") from err
