"""Single executable for the full workflow: corpus synthesis, tokenizer
training, supervised experiments, zero-shot runs, and report rendering.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import tokenizer as tok
from .evaluation import (
    MODEL_FAMILIES,
    MODES,
    TrainingConfig,
    load_run,
    render_report_table,
    run_experiment,
)
from .records import CorpusFormatError, load_corpus, save_corpus, save_manifest, split_train_test
from .synth import synthesize_corpus
from .zeroshot import (
    AuthError,
    HttpChatClient,
    MockChatClient,
    ResponseCache,
    run_zeroshot,
)


class ConfigError(ValueError):
    """Bad usage or configuration; maps to exit code 2."""


DEFAULT_CONFIG = {
    "data": {"test_fraction": 0.2, "k_folds": 5},
    "model": {
        "family": "htrans",
        "mode": "text_only",
        "budget": 8192,
        "vocab_size": 16384,
        "encoder": {},
    },
    "training": TrainingConfig().as_dict(),
    "fusion": {"embedding_file": None, "skip_unknown": False},
}


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects dotted.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    *path, leaf = dotted.split(".")
    for part in path:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {dotted!r} crosses a non-object value")
    node[leaf] = value


def _effective_config(args) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            _deep_update(config, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    for assignment in getattr(args, "set", None) or []:
        _apply_override(config, assignment)
    # explicit flags win over the file and --set
    if getattr(args, "model", None):
        config["model"]["family"] = args.model
    if getattr(args, "mode", None):
        config["model"]["mode"] = args.mode
    if getattr(args, "pooling", None):
        config["model"]["encoder"]["pooling"] = args.pooling
    if getattr(args, "seed", None) is not None:
        config["training"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        config["training"]["epochs"] = args.epochs
    if getattr(args, "budget", None) is not None:
        config["model"]["budget"] = args.budget
    return config


def cmd_synth(args) -> int:
    print(f"root seed: {args.seed}")
    try:
        records, manifest = synthesize_corpus(args.n, args.ratio, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(records, out / "corpus.jsonl")
    save_manifest(manifest, out / "manifest.json")
    print(f"wrote {manifest.record_count} records ({manifest.positive_count} positive) to {out}")
    return 0


def cmd_tokenizer_train(args) -> int:
    records = load_corpus(args.corpus)
    print(f"loaded {len(records)} records from {args.corpus}")
    texts = [" ".join(r.consult_texts()) for r in records]
    try:
        vocab = tok.train_bpe(texts, args.vocab_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    vocab.save(args.out)
    print(f"trained vocabulary of {len(vocab)} tokens ({len(vocab.merges)} merges) -> {args.out}")
    return 0


def _run_supervised(args, folds_to_train: int | None) -> int:
    config = _effective_config(args)
    family = config["model"]["family"]
    mode = config["model"]["mode"]
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model family {family!r}; choose from {MODEL_FAMILIES}")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    try:
        training = TrainingConfig(**config["training"])
    except TypeError as exc:
        raise ConfigError(f"bad training section: {exc}") from None
    seed = training.seed
    print(f"root seed: {seed}")
    records = load_corpus(args.corpus)
    print(f"loaded {len(records)} records from {args.corpus}")
    embedder = None
    if mode == "fused" and config["fusion"].get("embedding_file"):
        from .fusion import PrecomputedEmbedder, load_embedding_file

        path = Path(config["fusion"]["embedding_file"])
        if not path.exists():
            raise ConfigError(f"embedding file not found: {path}")
        embedder = PrecomputedEmbedder(load_embedding_file(path))
    snapshot = json.dumps(config, sort_keys=True, indent=2)
    result = run_experiment(
        records,
        family,
        mode,
        training=training,
        encoder_params=config["model"].get("encoder") or {},
        vocab_size=config["model"]["vocab_size"],
        budget=config["model"]["budget"],
        test_fraction=config["data"]["test_fraction"],
        k_folds=config["data"]["k_folds"],
        seed=seed,
        folds_to_train=folds_to_train,
        embedder=embedder,
        skip_unknown_meds=config["fusion"]["skip_unknown"],
        tfidf_ngrams=config["model"].get("tfidf_ngrams", 1),
        out_dir=args.out,
        config_snapshot=snapshot,
    )
    name = f"{family}/{mode}"
    print(render_report_table([(name, result.report)]))
    print(f"run {result.artifact.run_id} finished in {result.artifact.wall_clock_seconds:.1f}s")
    return 0


def cmd_train(args) -> int:
    return _run_supervised(args, folds_to_train=1)


def cmd_crossval(args) -> int:
    return _run_supervised(args, folds_to_train=None)


def cmd_zeroshot(args) -> int:
    config = _effective_config(args)
    seed = config["training"]["seed"]
    print(f"root seed: {seed}")
    records = load_corpus(args.corpus)
    print(f"loaded {len(records)} records from {args.corpus}")
    if not args.all_records:
        _, records = split_train_test(records, config["data"]["test_fraction"], seed)
    if args.backend == "mock":
        client = MockChatClient()
    else:
        if not args.endpoint:
            raise ConfigError("--endpoint is required for the http backend")
        try:
            client = HttpChatClient(endpoint=args.endpoint, model=args.model_name)
        except AuthError as exc:
            raise ConfigError(str(exc)) from None
    cache = ResponseCache(args.cache) if args.cache else None
    result = run_zeroshot(
        records, client, cache=cache, concurrency=args.concurrency, use_cache=not args.no_cache
    )
    calls = getattr(client, "calls", None)
    if result.report is not None:
        print(render_report_table([(f"zeroshot/{args.backend}", result.report)]))
    else:
        print("no records labeled")
    print(
        f"{result.records_seen} records, {len(result.predictions)} labeled, "
        f"{result.parse_error_count} parse errors, {calls} backend calls"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "backend": args.backend,
            "records_seen": result.records_seen,
            "parse_errors": result.parse_errors,
            "predictions": result.predictions,
            "report": result.report.as_dict() if result.report else None,
            "backend_calls": calls,
        }
        (out / "zeroshot.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        path = Path(run_dir)
        if not (path / "report.json").exists():
            raise ConfigError(f"{run_dir}: no report.json found")
        run_id, name, report = load_run(path)
        rows.append((run_id, name, report))
    rows.sort(key=lambda r: r[0])
    print(render_report_table([(f"{name} [{run_id}]", report) for run_id, name, report in rows]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvrmkit",
        description="Long-context clinical document classification toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with a planted signal")
    p.add_argument("--n", type=int, default=3482)
    p.add_argument("--ratio", type=float, default=0.1939)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tokenizer-train", help="train the BPE vocabulary on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, default=16384)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenizer_train)

    for name, help_text in (
        ("train", "train a single fold model and score it on the test split"),
        ("crossval", "full stratified cross-validation run"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--model", choices=MODEL_FAMILIES)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--pooling", choices=("cls", "average"))
        p.add_argument("--config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--budget", type=int)
        p.add_argument("--out")
        p.set_defaults(func=cmd_train if name == "train" else cmd_crossval)

    p = sub.add_parser("zeroshot", help="two-prompt zero-shot labeling")
    p.add_argument("--corpus", required=True)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--endpoint")
    p.add_argument("--model-name", default="gpt-4o")
    p.add_argument("--cache")
    p.add_argument("--no-cache", action="store_true", help="bypass cache lookups")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--all-records", action="store_true",
                   help="label the whole corpus instead of the held-out test split")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("report", help="merge run reports into one table")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CorpusFormatError as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
