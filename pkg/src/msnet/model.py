"""The mention-score head: span pooling, per-layer similarity vectors,
distance encodings, class scores, and exact manual gradients.

Per layer l (0 = top hidden layer), with x_{(i,l)} the precomputed token
states and p the pronoun token index:

    p_l        = x_{(p,l)}
    a_l, b_l   = span representations (meanpooling, or parameter-free
                 attention with scores (1/sqrt(d_H)) · norm(x_i) · p_l)
    s_l        = W_sim^T [p_l, a_l, b_l, a_l∘p_l, b_l∘p_l] + b_sim

with W_sim shared across layers unless configured per-layer. Distances
d_a = tanh(w_dist·(START(A)−START(P)) + b_dist) (likewise d_b) use raw
signed token-index differences. The feature vector

    z = [s_0, …, s_{L−1}, d_a, d_b]          (length L·s_dim + 2)

is batch-normalized, dropped out, and mapped affinely to scores for the
classes (A, B, NEITHER); probabilities are their softmax.

Pooling is parameter-free, so the training backward never needs to pass
through it; gradients into the embeddings themselves are computed only
on request (`want_input_grads`).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .embed_store import EmbeddingSet
from .errors import ConfigError, DimensionError, FormatError, ValidationError
from .numkit import (
    BatchNormState,
    Parameter,
    affine,
    affine_backward,
    batchnorm,
    batchnorm_backward,
    dropout,
    dropout_backward,
    make_rng,
    softmax,
    softmax_xent,
)

CLASS_ORDER = ("A", "B", "NEITHER")
SPAN_METHODS = ("meanpool", "attention")
NORM_FLOOR = 1e-12

_STREAM_INIT = 0x696E6974  # "init"

CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MsnetConfig:
    """Architecture hyperparameters; dropout rates follow the defaults
    stated for the feature-based setup."""

    layers: int
    s_dim: int
    d_h: int
    span_method: str = "meanpool"
    dropout_sim: float = 0.6
    dropout_score: float = 0.6
    dropout_attn_tokens: float = 0.4
    per_layer_sim: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.s_dim < 1:
            raise ConfigError("s_dim must be >= 1")
        if self.d_h < 1:
            raise ConfigError("d_h must be >= 1")
        if self.span_method not in SPAN_METHODS:
            raise ConfigError(f"span_method must be one of {SPAN_METHODS}")
        for name in ("dropout_sim", "dropout_score", "dropout_attn_tokens"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")

    @property
    def feature_count(self):
        return self.layers * self.s_dim + 2

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MsnetParams:
    """All learnable state. W_sim is (5·d_H, s_dim) when shared across
    layers, (L, 5·d_H, s_dim) when per-layer."""

    w_sim: Parameter
    b_sim: Parameter
    w_dist: Parameter
    b_dist: Parameter
    w_score: Parameter
    b_score: Parameter
    bn: BatchNormState

    def named_parameters(self):
        return [
            ("w_sim", self.w_sim),
            ("b_sim", self.b_sim),
            ("w_dist", self.w_dist),
            ("b_dist", self.b_dist),
            ("w_score", self.w_score),
            ("b_score", self.b_score),
            ("bn.gamma", self.bn.gamma),
            ("bn.beta", self.bn.beta),
        ]

    def all_parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grads(self):
        for p in self.all_parameters():
            p.zero_grad()

    def copy(self) -> "MsnetParams":
        return MsnetParams(
            w_sim=self.w_sim.copy(),
            b_sim=self.b_sim.copy(),
            w_dist=self.w_dist.copy(),
            b_dist=self.b_dist.copy(),
            w_score=self.w_score.copy(),
            b_score=self.b_score.copy(),
            bn=self.bn.copy(),
        )


def init_params(config: MsnetConfig) -> MsnetParams:
    """Uniform(±sqrt(6/(fan_in+fan_out))) weights, zero biases,
    w_dist = 0.01, fresh batchnorm."""
    rng = make_rng(config.seed, _STREAM_INIT)
    five_d = 5 * config.d_h

    def xavier(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    if config.per_layer_sim:
        w_sim = xavier((config.layers, five_d, config.s_dim), five_d, config.s_dim)
        b_sim = np.zeros((config.layers, config.s_dim))
    else:
        w_sim = xavier((five_d, config.s_dim), five_d, config.s_dim)
        b_sim = np.zeros(config.s_dim)
    f = config.feature_count
    return MsnetParams(
        w_sim=Parameter.of(w_sim),
        b_sim=Parameter.of(b_sim),
        w_dist=Parameter.of(0.01),
        b_dist=Parameter.of(0.0),
        w_score=Parameter.of(xavier((f, 3), f, 3)),
        b_score=Parameter.of(np.zeros(3)),
        bn=BatchNormState.create(f, momentum=config.bn_momentum, eps=config.bn_eps),
    )


@dataclass(frozen=True)
class ExampleInput:
    """One mention-resolution instance over precomputed hidden states."""

    embeddings: EmbeddingSet
    p_index: int
    a_span: tuple[int, int]
    b_span: tuple[int, int]

    def __post_init__(self):
        n = self.embeddings.token_count
        if not 0 <= self.p_index < n:
            raise ValidationError(f"p_index {self.p_index} outside [0, {n})")
        for name, (s, e) in (("a_span", self.a_span), ("b_span", self.b_span)):
            if not (0 <= s < e <= n):
                raise ValidationError(f"{name} {s, e} invalid for {n} tokens")

    @property
    def doc_id(self):
        return self.embeddings.doc_id

    @classmethod
    def from_doc(cls, doc, embeddings: EmbeddingSet) -> "ExampleInput":
        if embeddings.token_count != len(doc.tokens):
            raise DimensionError(
                f"doc {doc.doc_id!r}: {len(doc.tokens)} tokens but embeddings "
                f"hold {embeddings.token_count}"
            )
        return cls(
            embeddings=embeddings,
            p_index=doc.p_index,
            a_span=doc.a_span,
            b_span=doc.b_span,
        )


# --- span pooling ----------------------------------------------------------------


def _mean_pool(x_layer: np.ndarray, span):
    s, e = span
    out = x_layer[s:e].mean(axis=0)
    return out, ("mean", span, e - s)


def _attn_pool(x_layer: np.ndarray, span, p_vec: np.ndarray, rate, rng, training):
    s, e = span
    tokens = x_layer[s:e]
    dropped, mask = dropout(tokens, rate, rng, training)
    norms = np.sqrt((dropped * dropped).sum(axis=1))
    floored = np.maximum(norms, NORM_FLOOR)
    unit = dropped / floored[:, None]
    scale = 1.0 / np.sqrt(x_layer.shape[1])
    scores = scale * (unit @ p_vec)
    weights = softmax(scores)
    out = weights @ dropped
    cache = ("attn", span, dropped, mask, norms, floored, unit, p_vec, weights, scale)
    return out, cache, weights


def _pool_backward(cache, d_out: np.ndarray, dx_layer: np.ndarray, dp_vec: np.ndarray):
    """Scatter pooled-output gradient back into the layer's token grads."""
    kind = cache[0]
    if kind == "mean":
        _, (s, e), count = cache
        dx_layer[s:e] += d_out / count
        return
    _, (s, e), dropped, mask, norms, floored, unit, p_vec, weights, scale = cache
    d_dropped = weights[:, None] * d_out
    d_weights = dropped @ d_out
    d_scores = weights * (d_weights - float(weights @ d_weights))
    dp_vec += scale * (d_scores @ unit)
    # d(unit_i)/d(dropped_i) is (I − u uᵀ)/‖t‖ above the floor, I/floor below
    above = norms >= NORM_FLOOR
    proj = d_scores[:, None] * (p_vec[None, :] - unit * (unit @ p_vec)[:, None])
    d_dropped += np.where(
        above[:, None],
        scale * proj / floored[:, None],
        scale * d_scores[:, None] * p_vec[None, :] / NORM_FLOOR,
    )
    dx_layer[s:e] += dropout_backward(mask, d_dropped)


def span_mean(emb: EmbeddingSet, span, layer: int) -> np.ndarray:
    """Arithmetic mean of token vectors in `span` at `layer` (float64)."""
    _check_span(emb, span, layer)
    out, _ = _mean_pool(emb.values[layer].astype(np.float64), span)
    return out


def span_attn(
    emb: EmbeddingSet,
    span,
    p_index: int,
    layer: int,
    rate: float = 0.0,
    rng=None,
    training: bool = False,
):
    """Attention-pooled span vector and its weights; parameter-free."""
    _check_span(emb, span, layer)
    if not 0 <= p_index < emb.token_count:
        raise ValidationError(f"p_index {p_index} outside token range")
    x_layer = emb.values[layer].astype(np.float64)
    out, _, weights = _attn_pool(x_layer, span, x_layer[p_index], rate, rng, training)
    return out, weights


def _check_span(emb, span, layer):
    if not 0 <= layer < emb.layer_count:
        raise DimensionError(f"layer {layer} outside [0, {emb.layer_count})")
    s, e = span
    if not (0 <= s < e <= emb.token_count):
        raise ValidationError(f"span {span} empty or outside [0, {emb.token_count})")


# --- similarity and distance -------------------------------------------------------


def similarity_vec(p_l, a_l, b_l, params: MsnetParams, rate: float = 0.0, rng=None, training: bool = False):
    """s_l = W^T [p, a, b, a∘p, b∘p] + b for one layer (shared weights)."""
    p_l, a_l, b_l = (np.asarray(v, dtype=np.float64) for v in (p_l, a_l, b_l))
    if not p_l.shape == a_l.shape == b_l.shape or p_l.ndim != 1:
        raise DimensionError("p, a, b must be vectors of one shared length")
    concat = np.concatenate([p_l, a_l, b_l, a_l * p_l, b_l * p_l])
    w, b = params.w_sim, params.b_sim
    if w.value.ndim != 2:
        raise DimensionError("similarity_vec applies the shared-weight form")
    dropped, _ = dropout(concat, rate, rng, training)
    out, _ = affine(dropped[None, :], w, b)
    return out[0]


def distance_enc(start_a: int, start_b: int, start_p: int, params: MsnetParams) -> np.ndarray:
    """[tanh(w·(START(A)−START(P)) + b), same for B]; raw signed diffs."""
    diffs = np.array([start_a - start_p, start_b - start_p], dtype=np.float64)
    return np.tanh(params.w_dist.value * diffs + params.b_dist.value)


# --- full forward/backward ----------------------------------------------------------


@dataclass
class BatchCache:
    """Everything the backward pass needs; an eval-mode cache is usable
    only for prediction, not gradients."""

    config: MsnetConfig
    params: MsnetParams
    training: bool
    scores: np.ndarray
    batch: int
    sim_mask: object
    sim_affine: object
    dist_diffs: np.ndarray
    dist_out: np.ndarray
    bn_cache: object
    score_mask: object
    score_affine: object
    pool_caches: list | None = None
    input_shapes: list | None = None
    sim_parts: list | None = None
    p_indices: list | None = None


def _sim_affine_forward(sim_in: np.ndarray, params: MsnetParams, config: MsnetConfig):
    """(B, L, 5d) → (B, L, s); shared weights fold batch and layer axes."""
    b, l, five_d = sim_in.shape
    if config.per_layer_sim:
        w, bias = params.w_sim, params.b_sim
        out = np.einsum("blf,lfs->bls", sim_in, w.value) + bias.value[None, :, :]
        return out, ("per_layer", sim_in)
    flat = sim_in.reshape(b * l, five_d)
    out, cache = affine(flat, params.w_sim, params.b_sim)
    return out.reshape(b, l, -1), ("shared", cache, (b, l))


def _sim_affine_backward(cache, d_out: np.ndarray, params: MsnetParams):
    kind = cache[0]
    if kind == "per_layer":
        _, sim_in = cache
        params.w_sim.grad += np.einsum("blf,bls->lfs", sim_in, d_out)
        params.b_sim.grad += d_out.sum(axis=0)
        return np.einsum("bls,lfs->blf", d_out, params.w_sim.value)
    _, affine_cache, (b, l) = cache
    d_flat = affine_backward(affine_cache, d_out.reshape(b * l, -1))
    return d_flat.reshape(b, l, -1)


def forward_batch(
    examples,
    params: MsnetParams,
    config: MsnetConfig,
    training: bool = False,
    rng=None,
    *,
    update_running: bool = True,
    want_input_grads: bool = False,
):
    """Scores and probabilities for a batch; cache feeds `backward`.

    RNG is consumed in a fixed order (attention token masks per example
    and layer, then the similarity-input mask, then the score-input
    mask), so equal seeds give equal runs.
    """
    if not examples:
        raise ValidationError("forward_batch needs at least one example")
    if training and rng is None and (
        config.dropout_sim > 0 or config.dropout_score > 0
        or (config.span_method == "attention" and config.dropout_attn_tokens > 0)
    ):
        raise ValidationError("training-mode forward requires an rng")
    n_batch = len(examples)
    n_layers, d_h, s_dim = config.layers, config.d_h, config.s_dim

    sim_in = np.empty((n_batch, n_layers, 5 * d_h))
    dist_diffs = np.empty((n_batch, 2))
    pool_caches = [] if want_input_grads else None
    input_shapes = [] if want_input_grads else None
    sim_parts = [] if want_input_grads else None
    p_indices = [] if want_input_grads else None
    attn_rate = config.dropout_attn_tokens if config.span_method == "attention" else 0.0

    for bi, ex in enumerate(examples):
        if ex.embeddings.layer_count < n_layers:
            raise DimensionError(
                f"doc {ex.doc_id!r} holds {ex.embeddings.layer_count} layers, "
                f"config wants {n_layers}"
            )
        if ex.embeddings.hidden_size != d_h:
            raise DimensionError(
                f"doc {ex.doc_id!r} has d_H={ex.embeddings.hidden_size}, config wants {d_h}"
            )
        x = ex.embeddings.top_layers(n_layers)
        ex_caches = []
        ex_parts = []
        for l in range(n_layers):
            p_vec = x[l, ex.p_index]
            if config.span_method == "attention":
                a_vec, cache_a, _ = _attn_pool(x[l], ex.a_span, p_vec, attn_rate, rng, training)
                b_vec, cache_b, _ = _attn_pool(x[l], ex.b_span, p_vec, attn_rate, rng, training)
            else:
                a_vec, cache_a = _mean_pool(x[l], ex.a_span)
                b_vec, cache_b = _mean_pool(x[l], ex.b_span)
            sim_in[bi, l] = np.concatenate([p_vec, a_vec, b_vec, a_vec * p_vec, b_vec * p_vec])
            if want_input_grads:
                ex_caches.append((cache_a, cache_b))
                ex_parts.append((p_vec, a_vec, b_vec))
        if want_input_grads:
            pool_caches.append(ex_caches)
            input_shapes.append(x.shape)
            sim_parts.append(ex_parts)
            p_indices.append(ex.p_index)
        dist_diffs[bi] = (ex.a_span[0] - ex.p_index, ex.b_span[0] - ex.p_index)

    sim_dropped, sim_mask = dropout(sim_in, config.dropout_sim, rng, training)
    sim_out, sim_affine = _sim_affine_forward(sim_dropped, params, config)

    dist_pre = params.w_dist.value * dist_diffs + params.b_dist.value
    dist_out = np.tanh(dist_pre)

    z = np.concatenate([sim_out.reshape(n_batch, n_layers * s_dim), dist_out], axis=1)
    z_norm, bn_cache = batchnorm(z, params.bn, training, update_running=update_running)
    z_dropped, score_mask = dropout(z_norm, config.dropout_score, rng, training)
    scores, score_affine = affine(z_dropped, params.w_score, params.b_score)
    probs = softmax(scores, axis=1)

    cache = BatchCache(
        config=config,
        params=params,
        training=training,
        scores=scores,
        batch=n_batch,
        sim_mask=sim_mask,
        sim_affine=sim_affine,
        dist_diffs=dist_diffs,
        dist_out=dist_out,
        bn_cache=bn_cache,
        score_mask=score_mask,
        score_affine=score_affine,
        pool_caches=pool_caches,
        input_shapes=input_shapes,
        sim_parts=sim_parts,
        p_indices=p_indices,
    )
    return scores, probs, cache


def forward(example: ExampleInput, params: MsnetParams, config: MsnetConfig, mode: str = "eval"):
    """Single-example convenience wrapper; returns (scores, probs, cache)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    scores, probs, cache = forward_batch([example], params, config, training=(mode == "train"))
    return scores[0], probs[0], cache


def backward_scores(cache: BatchCache, d_scores: np.ndarray):
    """Propagate an upstream score gradient; accumulates parameter grads
    in place and returns per-example embedding gradients when the
    forward pass was asked to keep pooling caches, else None."""
    if not cache.training:
        raise ValidationError("backward needs a training-mode cache")
    params, config = cache.params, cache.config
    d_scores = np.asarray(d_scores, dtype=np.float64)
    if d_scores.shape != cache.scores.shape:
        raise DimensionError("upstream gradient shape mismatch")

    dz_dropped = affine_backward(cache.score_affine, d_scores)
    dz_norm = dropout_backward(cache.score_mask, dz_dropped)
    dz = batchnorm_backward(cache.bn_cache, dz_norm)

    n_batch, n_layers, s_dim = cache.batch, config.layers, config.s_dim
    d_sim_out = dz[:, : n_layers * s_dim].reshape(n_batch, n_layers, s_dim)
    d_dist_out = dz[:, n_layers * s_dim :]

    d_dist_pre = d_dist_out * (1.0 - cache.dist_out * cache.dist_out)
    params.w_dist.grad += float((d_dist_pre * cache.dist_diffs).sum())
    params.b_dist.grad += float(d_dist_pre.sum())

    d_sim_dropped = _sim_affine_backward(cache.sim_affine, d_sim_out, params)
    d_sim_in = dropout_backward(cache.sim_mask, d_sim_dropped)

    if cache.pool_caches is None:
        return None

    d_h = config.d_h
    input_grads = []
    for bi in range(n_batch):
        dx = np.zeros(cache.input_shapes[bi])
        for l in range(n_layers):
            p_vec, a_vec, b_vec = cache.sim_parts[bi][l]
            dp, da, db, dap, dbp = np.split(d_sim_in[bi, l], [d_h, 2 * d_h, 3 * d_h, 4 * d_h])
            d_p = dp + dap * a_vec + dbp * b_vec
            d_a = da + dap * p_vec
            d_b = db + dbp * p_vec
            cache_a, cache_b = cache.pool_caches[bi][l]
            _pool_backward(cache_a, d_a, dx[l], d_p)
            _pool_backward(cache_b, d_b, dx[l], d_p)
            # d_p now holds the direct concat term plus both attention paths
            dx[l, cache.p_indices[bi]] += d_p
        input_grads.append(dx)
    return input_grads


def backward(cache: BatchCache, labels):
    """Cross-entropy loss and full parameter gradients for the cached
    batch; returns (loss, input_grads_or_None)."""
    loss, d_scores = softmax_xent(cache.scores, labels)
    input_grads = backward_scores(cache, d_scores)
    return loss, input_grads


# --- checkpointing --------------------------------------------------------------------


def _config_payload(config: MsnetConfig) -> dict:
    payload = config.to_dict()
    payload["class_order"] = list(CLASS_ORDER)
    payload["layer_convention"] = "top_first"
    return payload


def save_checkpoint(path, params: MsnetParams, config: MsnetConfig) -> None:
    tensors = [(name, p.value) for name, p in params.named_parameters()]
    tensors.append(("bn.running_mean", params.bn.running_mean))
    tensors.append(("bn.running_var", params.bn.running_var))
    blob = json.dumps(_config_payload(config), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<H", len(tensors)))
    for name, value in tensors:
        encoded = name.encode("utf-8")
        value = np.asarray(value, dtype=np.float64)
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", value.ndim))
        for dim in value.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


_COMPAT_FIELDS = ("layers", "s_dim", "d_h", "span_method", "per_layer_sim")


def load_checkpoint(path, expected: MsnetConfig | None = None):
    """Read (params, config); validates structural compatibility when an
    expected config is supplied."""
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    off = 0

    def take(count, what):
        nonlocal off
        if off + count > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = bytes(view[off : off + count])
        off += count
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (json_len,) = struct.unpack("<I", take(4, "config length"))
    payload = json.loads(take(json_len, "config").decode("utf-8"))
    if payload.pop("class_order", None) != list(CLASS_ORDER):
        raise FormatError("checkpoint class order does not match")
    if payload.pop("layer_convention", None) != "top_first":
        raise FormatError("checkpoint layer convention does not match")
    config = MsnetConfig(**payload)
    if expected is not None:
        for name in _COMPAT_FIELDS:
            if getattr(config, name) != getattr(expected, name):
                raise ConfigError(
                    f"checkpoint {name}={getattr(config, name)!r} incompatible "
                    f"with expected {getattr(expected, name)!r}"
                )

    (count,) = struct.unpack("<H", take(2, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "tensor rank"))
        shape = tuple(
            struct.unpack("<I", take(4, "tensor dim"))[0] for _ in range(ndim)
        )
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(size * 8, f"tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if off != len(view):
        raise FormatError("trailing bytes after checkpoint payload", offset=off)

    params = init_params(config)
    expected_names = {name for name, _ in params.named_parameters()}
    expected_names |= {"bn.running_mean", "bn.running_var"}
    if set(tensors) != expected_names:
        raise FormatError(
            f"checkpoint tensors {sorted(tensors)} do not match {sorted(expected_names)}"
        )
    for name, p in params.named_parameters():
        if p.value.shape != tensors[name].shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}")
        p.value[...] = tensors[name]
    params.bn.running_mean[...] = tensors["bn.running_mean"]
    params.bn.running_var[...] = tensors["bn.running_var"]
    return params, config
