"""One-shot export of per-token BERT hidden states to MSEB files.

Reads the tokenized-doc listing written by `msnet tokenize --docs-out`,
runs a locally stored pretrained encoder over the listed token ids, and
writes the top-N hidden layers per document in the MSEB format that the
classifier's embedding store reads. The listing is cross-checked
token-by-token against an independent WordPiece implementation before
anything is written.
"""

__version__ = "0.1.0"
