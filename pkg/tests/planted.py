"""Synthetic mention-resolution task with a planted, margin-separated rule.

Every document has the same five-token layout

    [CLS]  t_a  t_b  t_p  [SEP]

so the distance features are constant and carry no signal. Labels are
planted from the toy embeddings themselves: with v_l(t) the layer-l toy
vector of token t,

    delta = sum_l v_l(t_a)·v_l(t_p) - sum_l v_l(t_b)·v_l(t_p)

and the label is A above the upper threshold, B below the lower one,
NEITHER in between, with a margin band around both thresholds excluded.
The a∘p and b∘p blocks of the similarity input expose exactly these dot
products, so the head can realize the rule; Bayes loss is ~0.
"""

import numpy as np

from msnet.embed_store import toy_embed
from msnet.model import ExampleInput
from msnet.numkit import make_rng
from msnet.tokenizer import SubToken, Vocab, truncate_and_finalize
from msnet.train_eval import LabeledExample

_STREAM_PLANT = 0x706C6E74  # "plnt"

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
POOL_SIZE = 40


def planted_vocab():
    return Vocab.from_tokens(SPECIALS + [f"t{i}" for i in range(POOL_SIZE)])


def make_planted_dataset(n, layers=2, d_h=16, seed=0, margin_frac=0.4):
    """Balanced list of LabeledExamples following the planted rule."""
    vocab = planted_vocab()
    rng = make_rng(seed, _STREAM_PLANT)
    emb_seed = seed + 1  # one toy-embedding universe shared by all docs

    def build(doc_id, ids):
        tokens = [
            SubToken(vocab.id_to_token[tid], tid, (k, k + 1))
            for k, tid in enumerate(ids)
        ]
        doc = truncate_and_finalize(doc_id, tokens, 2, (0, 1), (1, 2), vocab)
        emb = toy_embed(doc, layers, d_h, emb_seed)
        delta = float(
            sum(
                emb.values[l, 1].astype(np.float64) @ emb.values[l, 3].astype(np.float64)
                - emb.values[l, 2].astype(np.float64) @ emb.values[l, 3].astype(np.float64)
                for l in range(layers)
            )
        )
        return ExampleInput.from_doc(doc, emb), delta

    token_ids = [vocab.id(f"t{i}") for i in range(POOL_SIZE)]
    candidates = []
    while len(candidates) < 6 * n:
        trio = rng.choice(token_ids, size=3, replace=False)
        candidates.append(tuple(int(t) for t in trio))
    deltas = [build(f"probe{i}", ids)[1] for i, ids in enumerate(candidates[:300])]
    lo, hi = np.quantile(deltas, [0.2, 0.8])
    margin = margin_frac * float(np.std(deltas))
    if lo + margin >= hi - margin:
        raise RuntimeError("margin bands leave no room for the NEITHER class")

    buckets = {0: [], 1: [], 2: []}
    per_class = -(-n // 3)  # ceil
    for i, ids in enumerate(candidates):
        if all(len(b) >= per_class for b in buckets.values()):
            break
        ex, delta = build(f"ex{i}", ids)
        if delta > hi + margin:
            label = 0
        elif delta < lo - margin:
            label = 1
        elif lo + margin < delta < hi - margin:
            label = 2
        else:
            continue  # inside a margin band
        if len(buckets[label]) < per_class:
            buckets[label].append(LabeledExample(id=f"ex{i}", input=ex, label=label))
    dataset = []
    for a, b, c in zip(buckets[0], buckets[1], buckets[2]):
        dataset.extend((a, b, c))
    if len(dataset) < n:
        raise RuntimeError(f"planted sampler produced only {len(dataset)}/{n} examples")
    return dataset[:n]
