"""Command-line pipeline: tokenize GAP TSVs, build toy embeddings, train,
cross-validate, predict, score predictions, and gradient-check.

Every option can come from the command line or from a JSON config file
given with --config; explicit flags win. Training subcommands write a
manifest (resolved options, input digests, seed, tool version) next to
their outputs, and --from-manifest re-runs them bit-identically after
verifying the input digests still match.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .embed_store import EmbeddingSet, read_file, toy_embed, write_file
from .errors import (
    AlignmentError,
    FormatError,
    MsnetError,
    UnprocessableRecordError,
    ValidationError,
)
from .gap_data import derive_label, parse_tsv
from .model import (
    ExampleInput,
    MsnetConfig,
    SPAN_METHODS,
    backward_scores,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numkit import make_rng, grad_check, softmax_xent
from .tokenizer import (
    DEFAULT_TOKEN_LIMIT,
    DIAGNOSTICS_HEADER,
    Vocab,
    diagnostics_row,
    doc_from_json,
    doc_to_json,
    tokenize_record,
)
from .train_eval import (
    PREDICTION_HEADER,
    TrainConfig,
    assemble_examples,
    cross_validate,
    labeled_dataset,
    log_loss,
    predict_csv,
    split_eval,
    train_fold,
)

log = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
_STREAM_GRADCHECK = 0x67726164

# Option defaults per group; None marks required-unless-configured values.
_DATA_DEFAULTS = {
    "vocab": None,
    "lowercase": False,
    "skip_invalid": False,
    "limit": DEFAULT_TOKEN_LIMIT,
}
_MODEL_DEFAULTS = {
    "layers": 8,
    "sdim": 16,
    "span": "meanpool",
    "dropout_sim": 0.6,
    "dropout_score": 0.6,
    "dropout_attn_tokens": 0.4,
    "per_layer_sim": False,
}
_TRAIN_DEFAULTS = {
    "lr": 3e-4,
    "batch": 32,
    "epochs": 30,
    "patience": 4,
    "weight_decay": 0.0,
    "seed": 0,
}

_DEFAULTS = {
    "tokenize": {"tsv": None, "out": None, "docs_out": "", **_DATA_DEFAULTS},
    "embed-toy": {"docs": None, "layers": 2, "dh": 16, "seed": 0, "out": None},
    "train": {
        "train_tsv": None,
        "embeddings": None,
        "out": None,
        "eval_fraction": 0.1,
        **_DATA_DEFAULTS,
        **_MODEL_DEFAULTS,
        **_TRAIN_DEFAULTS,
    },
    "cv": {
        "train_tsv": None,
        "embeddings": None,
        "test_tsv": "",
        "test_embeddings": "",
        "out": None,
        "k": 5,
        "parallel_folds": 1,
        **_DATA_DEFAULTS,
        **_MODEL_DEFAULTS,
        **_TRAIN_DEFAULTS,
    },
    "predict": {
        "checkpoints": None,
        "test_tsv": None,
        "embeddings": None,
        "out": None,
        **_DATA_DEFAULTS,
    },
    "eval": {"pred_csv": None, "gold_tsv": None},
    "gradcheck": {"layers": 2, "sdim": 4, "dh": 8, "span": "", "batch": 4, "seed": 0},
}

_REQUIRED = {
    "tokenize": ("tsv", "vocab", "out"),
    "embed-toy": ("docs", "out"),
    "train": ("train_tsv", "vocab", "embeddings", "out"),
    "cv": ("train_tsv", "vocab", "embeddings", "out"),
    "predict": ("checkpoints", "test_tsv", "vocab", "embeddings", "out"),
    "eval": ("pred_csv", "gold_tsv"),
    "gradcheck": (),
}

# Data files whose digests go into the manifest (when set).
_MANIFEST_INPUTS = ("train_tsv", "vocab", "embeddings", "test_tsv", "test_embeddings")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ValidationError(message)


# --- option resolution -------------------------------------------------------------


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as err:
        raise FormatError(f"{what} {path}: not valid JSON ({err})") from err


def _resolve(subcommand: str, args) -> dict:
    """Materialize every option: explicit flag > config file > default."""
    defaults = _DEFAULTS[subcommand]
    config = {}
    if getattr(args, "config", None):
        config = _load_json(args.config, "config file")
        unknown = sorted(set(config) - set(defaults))
        if unknown:
            raise ValidationError(
                f"config file has unknown keys for {subcommand}: {', '.join(unknown)}"
            )
    resolved = {}
    for name, default in defaults.items():
        value = getattr(args, name, None)
        if value is None and name in config:
            value = config[name]
        if value is None:
            value = default
        resolved[name] = value
    missing = [name for name in _REQUIRED[subcommand] if resolved[name] is None]
    if missing:
        flags = ", ".join("--" + name.replace("_", "-") for name in missing)
        raise ValidationError(f"missing required options: {flags}")
    return resolved


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _manifest(subcommand: str, opts: dict) -> dict:
    inputs = {
        opts[key]: _sha256(opts[key])
        for key in _MANIFEST_INPUTS
        if opts.get(key)
    }
    return {
        "subcommand": subcommand,
        "version": __version__,
        "seed": opts.get("seed", 0),
        "options": opts,
        "inputs": inputs,
    }


def _write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _opts_from_manifest(subcommand: str, args) -> dict:
    """Re-resolve options from a manifest, refusing stale inputs."""
    skip = ("func", "subcommand", "verbose", "from_manifest", "config")
    extras = [
        name
        for name, value in vars(args).items()
        if name not in skip and value is not None
    ]
    if extras:
        raise ValidationError(
            "--from-manifest replays a recorded run; drop the other flags: "
            + ", ".join(sorted(extras))
        )
    manifest = _load_json(args.from_manifest, "manifest")
    for key in ("subcommand", "version", "options", "inputs"):
        if key not in manifest:
            raise FormatError(f"manifest {args.from_manifest}: missing field {key!r}")
    if manifest["subcommand"] != subcommand:
        raise ValidationError(
            f"manifest records a {manifest['subcommand']!r} run, not {subcommand!r}"
        )
    if manifest["version"] != __version__:
        raise ValidationError(
            f"manifest was written by version {manifest['version']}, "
            f"this is {__version__}; bit-identical replay is not guaranteed"
        )
    for path, recorded in manifest["inputs"].items():
        actual = _sha256(path)
        if actual != recorded:
            raise ValidationError(
                f"input {path} changed since the manifest was written "
                f"(sha256 {actual[:12]}… != recorded {recorded[:12]}…)"
            )
    opts = dict(_DEFAULTS[subcommand])
    opts.update(manifest["options"])
    return opts


# --- shared data loading ----------------------------------------------------------


def _load_docs(tsv_path, opts):
    """Parse a GAP TSV and tokenize it: (records, docs), aligned by index."""
    vocab = Vocab.load(opts["vocab"], lowercase=bool(opts["lowercase"]))
    on_invalid = "skip" if opts["skip_invalid"] else "raise"
    with open(tsv_path, encoding="utf-8") as f:
        records = parse_tsv(f, on_invalid=on_invalid)
    kept, docs = [], []
    for record in records:
        try:
            docs.append(tokenize_record(record, vocab, limit=int(opts["limit"])))
            kept.append(record)
        except (AlignmentError, UnprocessableRecordError) as err:
            if not opts["skip_invalid"]:
                raise
            log.warning("skipping record %s: %s", record.id, err)
    return kept, docs


def _load_dataset(tsv_path, emb_path, opts):
    records, docs = _load_docs(tsv_path, opts)
    examples = assemble_examples(docs, read_file(emb_path))
    return labeled_dataset(records, examples)


def _hidden_size(emb_path) -> int:
    store = read_file(emb_path)
    if not store:
        raise ValidationError(f"embedding store {emb_path} holds no documents")
    return next(iter(store.values())).hidden_size


def _model_config(opts, d_h: int) -> MsnetConfig:
    return MsnetConfig(
        layers=int(opts["layers"]),
        s_dim=int(opts["sdim"]),
        d_h=d_h,
        span_method=opts["span"],
        dropout_sim=float(opts["dropout_sim"]),
        dropout_score=float(opts["dropout_score"]),
        dropout_attn_tokens=float(opts["dropout_attn_tokens"]),
        per_layer_sim=bool(opts["per_layer_sim"]),
        seed=int(opts["seed"]),
    )


def _train_config(opts) -> TrainConfig:
    return TrainConfig(
        lr=float(opts["lr"]),
        batch_size=int(opts["batch"]),
        max_epochs=int(opts["epochs"]),
        patience=int(opts["patience"]),
        weight_decay=float(opts["weight_decay"]),
        seed=int(opts["seed"]),
        eval_fraction=float(opts.get("eval_fraction", 0.1)),
    )


# --- subcommands -------------------------------------------------------------------


def cmd_tokenize(args) -> int:
    opts = _resolve("tokenize", args)
    records, docs = _load_docs(opts["tsv"], opts)
    with open(opts["out"], "w", encoding="utf-8") as f:
        f.write(DIAGNOSTICS_HEADER + "\n")
        for doc in docs:
            f.write(diagnostics_row(doc) + "\n")
    if opts["docs_out"]:
        with open(opts["docs_out"], "w", encoding="utf-8") as f:
            for record, doc in zip(records, docs):
                f.write(doc_to_json(doc, record.text) + "\n")
    truncated = sum(doc.truncated for doc in docs)
    inexact = sum(bool(doc.notes) for doc in docs)
    print(f"tokenized {len(docs)} records ({truncated} truncated, {inexact} inexact)")
    return 0


def cmd_embed_toy(args) -> int:
    opts = _resolve("embed-toy", args)
    with open(opts["docs"], encoding="utf-8") as f:
        docs = [doc_from_json(line) for line in f if line.strip()]
    if not docs:
        raise ValidationError(f"{opts['docs']} lists no documents")
    sets = [
        toy_embed(doc, int(opts["layers"]), int(opts["dh"]), int(opts["seed"]))
        for doc in docs
    ]
    write_file(opts["out"], sets)
    print(f"wrote {len(sets)} embedding sets to {opts['out']}")
    return 0


def cmd_train(args) -> int:
    if args.from_manifest:
        opts = _opts_from_manifest("train", args)
    else:
        opts = _resolve("train", args)
    dataset = _load_dataset(opts["train_tsv"], opts["embeddings"], opts)
    model_cfg = _model_config(opts, _hidden_size(opts["embeddings"]))
    train_cfg = _train_config(opts)
    train, val = split_eval(dataset, train_cfg.eval_fraction, seed=train_cfg.seed)
    params, history = train_fold(train, val, model_cfg, train_cfg)
    save_checkpoint(opts["out"], params, model_cfg)
    _write_manifest(opts["out"] + ".manifest.json", _manifest("train", opts))
    print(
        json.dumps(
            {
                "best_epoch": history.best_epoch,
                "best_val_loss": history.best_val_loss,
                "epochs": len(history.epochs),
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_cv(args) -> int:
    if args.from_manifest:
        opts = _opts_from_manifest("cv", args)
    else:
        opts = _resolve("cv", args)
    if bool(opts["test_tsv"]) != bool(opts["test_embeddings"]):
        raise ValidationError("--test-tsv and --test-embeddings go together")
    dataset = _load_dataset(opts["train_tsv"], opts["embeddings"], opts)
    test = None
    if opts["test_tsv"]:
        test = _load_dataset(opts["test_tsv"], opts["test_embeddings"], opts)
    model_cfg = _model_config(opts, _hidden_size(opts["embeddings"]))
    train_cfg = _train_config(opts)
    result = cross_validate(
        dataset,
        model_cfg,
        train_cfg,
        k=int(opts["k"]),
        test=test,
        parallel_folds=int(opts["parallel_folds"]),
    )
    os.makedirs(opts["out"], exist_ok=True)
    report_json = result.report.canonical_json()
    with open(os.path.join(opts["out"], "report.json"), "w", encoding="utf-8") as f:
        f.write(report_json + "\n")
    for fold, params in enumerate(result.fold_params):
        fold_cfg = result.fold_configs[fold]
        save_checkpoint(os.path.join(opts["out"], f"fold{fold}.msck"), params, fold_cfg)
    if test is not None:
        with open(
            os.path.join(opts["out"], "predictions.csv"), "w", encoding="utf-8"
        ) as f:
            f.write(",".join(PREDICTION_HEADER) + "\n")
            for ex, row in zip(test, result.test_probs):
                cells = ",".join(repr(float(v)) for v in row)
                f.write(f"{ex.id},{cells}\n")
    _write_manifest(os.path.join(opts["out"], "manifest.json"), _manifest("cv", opts))
    print(report_json)
    return 0


def cmd_predict(args) -> int:
    opts = _resolve("predict", args)
    models = []
    config = None
    for path in opts["checkpoints"]:
        params, config = load_checkpoint(path, expected=config)
        models.append(params)
    records, docs = _load_docs(opts["test_tsv"], opts)
    examples = assemble_examples(docs, read_file(opts["embeddings"]))
    pairs = [(record.id, examples[record.id]) for record in records]
    with open(opts["out"], "w", encoding="utf-8") as f:
        predict_csv(models, config, pairs, f)
    print(f"wrote {len(pairs)} predictions to {opts['out']}")
    return 0


def cmd_eval(args) -> int:
    opts = _resolve("eval", args)
    with open(opts["gold_tsv"], encoding="utf-8") as f:
        records = parse_tsv(f)
    with open(opts["pred_csv"], encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(PREDICTION_HEADER):
            raise FormatError(
                f"{opts['pred_csv']}: expected header {','.join(PREDICTION_HEADER)}"
            )
        rows = {}
        for row in reader:
            if len(row) != 4:
                raise FormatError(f"{opts['pred_csv']}: malformed row {row!r}")
            try:
                rows[row[0]] = [float(v) for v in row[1:]]
            except ValueError as err:
                raise FormatError(f"{opts['pred_csv']}: {err}") from err
    missing = [r.id for r in records if r.id not in rows]
    if missing:
        raise ValidationError(
            f"predictions are missing {len(missing)} gold ids (first: {missing[0]})"
        )
    probs = [rows[r.id] for r in records]
    labels = [int(derive_label(r)) for r in records]
    print(f"{log_loss(probs, labels):.6f}")
    return 0


# Varied mention geometry: identical spans across a batch would make the
# distance features constant, and batchnorm zeroes the gradient of any
# feature that is constant over the batch.
_GRADCHECK_GEOMETRY = (
    (1, (2, 4), (5, 8)),
    (4, (1, 3), (6, 8)),
    (7, (2, 3), (4, 7)),
    (3, (5, 9), (1, 2)),
)


def _gradcheck_examples(config: MsnetConfig, batch: int, seed: int):
    rng = make_rng(seed, _STREAM_GRADCHECK)
    examples = []
    for i in range(batch):
        p_index, a_span, b_span = _GRADCHECK_GEOMETRY[i % len(_GRADCHECK_GEOMETRY)]
        values = rng.uniform(-1.0, 1.0, size=(config.layers, 9, config.d_h))
        emb = EmbeddingSet(doc_id=f"gc{i}", values=values.astype(np.float32))
        examples.append(
            ExampleInput(embeddings=emb, p_index=p_index, a_span=a_span, b_span=b_span)
        )
    labels = [i % 3 for i in range(batch)]
    return examples, labels


def cmd_gradcheck(args) -> int:
    opts = _resolve("gradcheck", args)
    methods = [opts["span"]] if opts["span"] else list(SPAN_METHODS)
    worst = 0.0
    for method in methods:
        config = MsnetConfig(
            layers=int(opts["layers"]),
            s_dim=int(opts["sdim"]),
            d_h=int(opts["dh"]),
            span_method=method,
            dropout_sim=0.0,
            dropout_score=0.0,
            dropout_attn_tokens=0.0,
            seed=int(opts["seed"]),
        )
        params = init_params(config)
        examples, labels = _gradcheck_examples(config, int(opts["batch"]), int(opts["seed"]))

        def loss_fn():
            params.zero_grads()
            scores, _, cache = forward_batch(
                examples, params, config, training=True, update_running=False
            )
            loss, d_scores = softmax_xent(scores, labels)
            backward_scores(cache, d_scores)
            return loss

        loss_fn()
        err = 0.0
        for _, p in params.named_parameters():
            # Probe step scaled to the gradient: along a flat direction
            # (batchnorm absorbs the similarity bias, so its true gradient
            # is zero) a tiny step only measures rounding noise; a wide
            # step verifies flatness with no truncation error to pay.
            eps = 1e-5 if np.abs(p.grad).max() > 1e-8 else 0.25
            err = max(err, grad_check(loss_fn, [p], eps=eps))
        worst = max(worst, err)
        print(f"{method}: max relative error {err:.3e}")
    return 0 if worst <= GRADCHECK_TOLERANCE else 1


# --- parser ------------------------------------------------------------------------


def _add_data_flags(sub):
    sub.add_argument("--vocab", help="vocabulary file, one token per line")
    sub.add_argument(
        "--lowercase",
        action=argparse.BooleanOptionalAction,
        help="lowercase and strip accents (uncased vocabularies)",
    )
    sub.add_argument(
        "--skip-invalid",
        dest="skip_invalid",
        action=argparse.BooleanOptionalAction,
        help="log and drop records that fail validation or alignment",
    )
    sub.add_argument("--limit", type=int, help="token budget per document")


def _add_model_flags(sub):
    sub.add_argument("--layers", type=int, help="top hidden layers fed to the model")
    sub.add_argument("--sdim", type=int, help="similarity vector width")
    sub.add_argument("--span", choices=SPAN_METHODS, help="span pooling method")


def _add_train_flags(sub):
    sub.add_argument("--lr", type=float, help="Adam learning rate")
    sub.add_argument("--batch", type=int, help="minibatch size")
    sub.add_argument("--epochs", type=int, help="epoch cap")
    sub.add_argument("--patience", type=int, help="early-stopping patience")
    sub.add_argument("--weight-decay", dest="weight_decay", type=float)
    sub.add_argument("--seed", type=int, help="seed for init, folds, and shuffling")
    sub.add_argument(
        "--config", help="JSON file of option values, overridden by explicit flags"
    )
    sub.add_argument(
        "--from-manifest",
        dest="from_manifest",
        help="replay a recorded run from its manifest",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msnet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"msnet {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress to stderr"
    )
    commands = parser.add_subparsers(dest="subcommand", required=True)

    sub = commands.add_parser("tokenize", help="tokenize a GAP TSV, emit diagnostics")
    sub.add_argument("--tsv", help="GAP TSV to tokenize")
    sub.add_argument("--out", help="diagnostics TSV path")
    sub.add_argument(
        "--docs-out", dest="docs_out", help="also write the tokenized-doc JSONL listing"
    )
    _add_data_flags(sub)
    sub.add_argument("--config", help="JSON file of option values")
    sub.set_defaults(func=cmd_tokenize)

    sub = commands.add_parser("embed-toy", help="deterministic toy embeddings → MSEB")
    sub.add_argument("--docs", help="tokenized-doc JSONL listing")
    sub.add_argument("--layers", type=int, help="layers per document")
    sub.add_argument("--dh", type=int, help="hidden size")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", help="MSEB output path")
    sub.add_argument("--config", help="JSON file of option values")
    sub.set_defaults(func=cmd_embed_toy)

    sub = commands.add_parser("train", help="train one model with a held-out split")
    sub.add_argument("--train-tsv", dest="train_tsv")
    sub.add_argument("--embeddings", help="MSEB file covering the train TSV")
    sub.add_argument("--out", help="checkpoint output path")
    sub.add_argument(
        "--eval-fraction", dest="eval_fraction", type=float,
        help="held-out fraction used as the early-stopping monitor",
    )
    _add_data_flags(sub)
    _add_model_flags(sub)
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("cv", help="k-fold cross-validation")
    sub.add_argument("--train-tsv", dest="train_tsv")
    sub.add_argument("--embeddings", help="MSEB file covering the train TSV")
    sub.add_argument("--test-tsv", dest="test_tsv")
    sub.add_argument(
        "--test-embeddings", dest="test_embeddings", help="MSEB file for the test TSV"
    )
    sub.add_argument("--out", help="output directory (report, folds, manifest)")
    sub.add_argument("--k", type=int, help="fold count")
    sub.add_argument(
        "--parallel-folds", dest="parallel_folds", type=int,
        help="train up to N folds in worker processes",
    )
    _add_data_flags(sub)
    _add_model_flags(sub)
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_cv)

    sub = commands.add_parser("predict", help="ensemble checkpoints into a CSV")
    sub.add_argument(
        "--checkpoints", nargs="+", help="checkpoint files; configs must agree"
    )
    sub.add_argument("--test-tsv", dest="test_tsv")
    sub.add_argument("--embeddings", help="MSEB file covering the test TSV")
    sub.add_argument("--out", help="prediction CSV path")
    _add_data_flags(sub)
    sub.add_argument("--config", help="JSON file of option values")
    sub.set_defaults(func=cmd_predict)

    sub = commands.add_parser("eval", help="log-loss of a prediction CSV vs gold TSV")
    sub.add_argument("--pred-csv", dest="pred_csv")
    sub.add_argument("--gold-tsv", dest="gold_tsv")
    sub.add_argument("--config", help="JSON file of option values")
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("gradcheck", help="finite-difference gradient check")
    sub.add_argument("--layers", type=int)
    sub.add_argument("--sdim", type=int)
    sub.add_argument("--dh", type=int)
    sub.add_argument("--span", choices=SPAN_METHODS, help="default: both methods")
    sub.add_argument("--batch", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--config", help="JSON file of option values")
    sub.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except (FormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except MsnetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
