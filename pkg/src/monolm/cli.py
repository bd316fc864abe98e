"""Command-line entry point.

One binary, subcommand style.  Every run resolves its configuration
(config file < flags), writes a manifest into the output directory before
doing any work, and exits 0 on success, 2 on usage errors, 3 on data
errors, 4 on numeric failures.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from . import charlm, corpus as corpus_mod, encoder, evalkit, pretrain_data, subword, tagger

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_ERRORS = (
    corpus_mod.CorpusError,
    subword.SubwordError,
    pretrain_data.PretrainDataError,
    charlm.CharLMError,
    tagger.TaggerError,
    evalkit.EvalError,
    encoder.EncoderError,
    FileNotFoundError,
)


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment line."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        if "=" not in line:
            raise evalkit.EvalError(f"config line without '=': {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_manifest(out_dir: str, command: str, args: argparse.Namespace) -> None:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    resolved = {
        k: v for k, v in sorted(vars(args).items()) if k != "func"
    }
    manifest = {"command": command, "config": resolved}
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    )


def load_corpus(path: str, source: str = "unknown") -> corpus_mod.Corpus:
    with open(path, encoding="utf-8") as fh:
        return corpus_mod.ingest(fh, source=source)


# ---------------------------------------------------------------------------
# Command handlers


def cmd_ingest(args) -> int:
    write_manifest(args.out, "ingest", args)
    c = load_corpus(args.input, source=args.source)
    with open(Path(args.out) / "corpus.txt", "w", encoding="utf-8") as fh:
        corpus_mod.serialize(c, fh)
    print(f"ingested {len(c)} documents")
    return EXIT_OK


def cmd_stats(args) -> int:
    write_manifest(args.out, "stats", args)
    c = load_corpus(args.input, source=args.source)
    s = corpus_mod.stats(c)
    table = corpus_mod.render_stats(s)
    print(table)
    (Path(args.out) / "stats.txt").write_text(table + "\n")
    with open(Path(args.out) / "stats.jsonl", "w") as fh:
        for source, tokens in sorted(s.tokens_by_source.items()):
            fh.write(json.dumps({"source": source, "tokens": tokens}) + "\n")
        fh.write(json.dumps({"source": "__total__", "tokens": s.total_tokens}) + "\n")
    return EXIT_OK


def cmd_split(args) -> int:
    write_manifest(args.out, "split", args)
    c = load_corpus(args.input, source=args.source)
    ratios = [float(r) for r in args.ratios.split(",")]
    parts = corpus_mod.split(c, corpus_mod.SplitSpec(ratios=ratios, seed=args.seed))
    names = ["train", "dev", "test", *[f"part{i}" for i in range(3, len(parts))]]
    for name, part in zip(names, parts):
        with open(Path(args.out) / f"{name}.txt", "w", encoding="utf-8") as fh:
            corpus_mod.serialize(part, fh)
        print(f"{name}: {len(part)} documents")
    return EXIT_OK


def cmd_vocab_train(args) -> int:
    write_manifest(args.out, "vocab-train", args)
    c = load_corpus(args.input, source=args.source)
    config = subword.UnigramTrainConfig(
        target_size=args.target_size,
        coverage=args.coverage,
        seed_multiplier=args.seed_multiplier,
        max_piece_len=args.max_piece_len,
        shrink_factor=args.shrink_factor,
        em_iters_per_round=args.em_iters,
    )
    vocab = subword.train_unigram(c, config)
    with open(Path(args.out) / "vocab.tsv", "w", encoding="utf-8") as fh:
        subword.save_vocab(vocab, fh)
    print(f"trained vocabulary of {len(vocab)} pieces (incl. specials)")
    return EXIT_OK


def _load_vocab(path: str) -> subword.SubwordVocab:
    with open(path, encoding="utf-8") as fh:
        return subword.load_vocab(fh)


def cmd_tokenize(args) -> int:
    vocab = _load_vocab(args.vocab)
    lines = (
        Path(args.input).read_text(encoding="utf-8").splitlines()
        if args.input
        else [args.text]
    )
    for line in lines:
        if not line.strip():
            continue
        seq = subword.encode(vocab, line)
        pieces = [vocab.id_to_piece[i] for i in seq.piece_ids]
        print(" ".join(pieces))
    return EXIT_OK


def cmd_fertility(args) -> int:
    vocab = _load_vocab(args.vocab)
    c = load_corpus(args.input, source=args.source)
    print(f"{subword.fertility(vocab, c):.4f}")
    return EXIT_OK


def cmd_pretrain_data(args) -> int:
    write_manifest(args.out, "pretrain-data", args)
    c = load_corpus(args.input, source=args.source)
    vocab = _load_vocab(args.vocab)
    policy = pretrain_data.MaskingPolicy(
        candidate_fraction=args.mask_prob,
        whole_word=args.wwm,
    )
    phases = []
    lens = [int(x) for x in args.seq_len.split(",")]
    fracs = [float(x) for x in args.phase_fractions.split(",")]
    if len(lens) != len(fracs):
        raise evalkit.EvalError("seq-len and phase-fractions differ in length")
    schedule = pretrain_data.PackingSchedule(phases=list(zip(lens, fracs)))
    by_phase, skipped = pretrain_data.pack(
        c, vocab, schedule, policy, n_examples=args.n_examples, seed=args.seed
    )
    for max_len, examples in by_phase.items():
        with open(Path(args.out) / f"examples-{max_len}.jsonl", "w") as fh:
            pretrain_data.write_jsonl(examples, fh)
        if args.binary:
            max_masks = max(
                (len(e.masked_positions) for e in examples), default=1
            )
            with open(Path(args.out) / f"examples-{max_len}.bin", "wb") as fh:
                pretrain_data.write_binary(examples, max_len, max_masks, fh)
        print(f"phase {max_len}: {len(examples)} examples")
    all_examples = [e for v in by_phase.values() for e in v]
    stats = pretrain_data.masking_stats(all_examples, vocab)
    print(
        f"candidate fraction {stats.candidate_fraction:.4f}  "
        f"mask/random/keep {stats.mask_fraction:.3f}/"
        f"{stats.random_fraction:.3f}/{stats.keep_fraction:.3f}  "
        f"wwm violations {stats.wwm_violations}  skipped {skipped}"
    )
    return EXIT_OK


def cmd_pretrain(args) -> int:
    write_manifest(args.out, "pretrain", args)
    vocab = _load_vocab(args.vocab)
    phase_examples = {}
    for path in args.examples:
        max_len = int(Path(path).stem.split("-")[-1])
        with open(path) as fh:
            phase_examples[max_len] = list(pretrain_data.read_jsonl(fh))
    enc_config = encoder.EncoderConfig(
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        max_positions=args.max_positions,
        vocab_size=len(vocab),
        dropout=args.dropout,
    )
    opt_config = encoder.OptimizerConfig(
        learning_rate=args.learning_rate,
        warmup_steps=args.warmup_steps,
        total_steps=args.total_steps,
        batch_size=args.batch_size,
    )
    result = encoder.train(
        phase_examples,
        enc_config,
        opt_config,
        pad_id=vocab.pad_id,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        checkpoint_path=str(Path(args.out) / "checkpoint.pt"),
    )
    with open(Path(args.out) / "loss_curve.csv", "w", newline="") as fh:
        encoder.write_curve(result.curve, fh)
    print(f"trained {len(result.curve)} steps; "
          f"parameters {result.model.parameter_count()}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    config = encoder.EncoderConfig(
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        vocab_size=args.vocab_size,
        max_positions=64,
        dropout=0.0,
    )
    report = encoder.grad_check(config, tolerance=args.tolerance, seed=args.seed)
    print(f"max relative error {report.max_relative_error:.3e} "
          f"(tolerance {report.tolerance:.0e})")
    if not report.passed:
        for name, err in sorted(report.per_group.items(), key=lambda kv: -kv[1]):
            if err >= report.tolerance:
                print(f"  FAIL {name}: {err:.3e}")
        raise encoder.NumericError("gradient check failed")
    return EXIT_OK


def cmd_charlm_train(args) -> int:
    write_manifest(args.out, "charlm-train", args)
    c = load_corpus(args.input, source=args.source)
    for direction in ("forward", "backward"):
        config = charlm.CharLMConfig(
            hidden=args.hidden,
            seq_len=args.seq_len,
            batch_size=args.batch_size,
            epochs=args.epochs,
            direction=direction,
        )
        model, ppl = charlm.train_char_lm(c, config, seed=args.seed)
        charlm.save_charlm(model, str(Path(args.out) / f"charlm-{direction}.pt"))
        print(f"{direction}: perplexity per epoch "
              + " ".join(f"{p:.2f}" for p in ppl))
    return EXIT_OK


def cmd_embed(args) -> int:
    fwd = charlm.load_charlm(args.forward_model)
    bwd = charlm.load_charlm(args.backward_model)
    memory = charlm.EmbeddingMemory(pooling=args.pooled) if args.pooled else None
    for line in Path(args.input).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        for word, vector in charlm.embed_words(fwd, bwd, line):
            if memory is not None:
                vector = charlm.pooled_embed(memory, word, vector)
            values = " ".join(f"{v:.6f}" for v in vector.tolist())
            print(f"{word}\t{values}")
    return EXIT_OK


def _read_tagged(path: str) -> list[tagger.TaggedSentence]:
    sentences = []
    tokens, tags = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines() + [""]:
        if not line.strip():
            if tokens:
                sentences.append(tagger.TaggedSentence(tokens, tags))
                tokens, tags = [], []
            continue
        tok, tag = line.split("\t")
        tokens.append(tok)
        tags.append(tag)
    return sentences


def _read_labeled(path: str) -> list[tagger.LabeledText]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        label, text = line.split("\t", 1)
        out.append(tagger.LabeledText(label=label, tokens=text.split()))
    return out


def _embedder_from_args(args) -> tagger.Embedder:
    if args.embeddings:
        with open(args.embeddings, encoding="utf-8") as fh:
            return tagger.load_static_embeddings(fh)
    fwd = charlm.load_charlm(args.forward_model)
    bwd = charlm.load_charlm(args.backward_model)

    def embed(tokens: list[str]):
        import torch

        pairs = charlm.embed_words(fwd, bwd, " ".join(tokens))
        return torch.stack([v for _, v in pairs])

    return embed


def cmd_tag_train(args) -> int:
    write_manifest(args.out, "tag-train", args)
    train_set = _read_tagged(args.train)
    dev_set = _read_tagged(args.dev) if args.dev else []
    embedder = _embedder_from_args(args)
    config = tagger.TaggerConfig(
        hidden=args.hidden,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    trained = tagger.train_tagger(train_set, dev_set, embedder, config)
    if args.test:
        test_set = _read_tagged(args.test)
        gold = [s.gold_tags for s in test_set]
        pred = [trained.tag(s.tokens) for s in test_set]
        acc = evalkit.word_accuracy(gold, pred)
        print(f"test word accuracy {acc:.2f}")
        with open(Path(args.out) / "predictions.tsv", "w") as fh:
            for s, p in zip(test_set, pred):
                for tok, g, pr in zip(s.tokens, s.gold_tags, p):
                    fh.write(f"{tok}\t{g}\t{pr}\n")
                fh.write("\n")
    import torch

    torch.save(trained.model.state_dict(), Path(args.out) / "tagger.pt")
    return EXIT_OK


def cmd_classify_train(args) -> int:
    write_manifest(args.out, "classify-train", args)
    train_set = _read_labeled(args.train)
    dev_set = _read_labeled(args.dev) if args.dev else []
    embedder = _embedder_from_args(args)
    config = tagger.ClassifierConfig(
        hidden=args.hidden,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    trained = tagger.train_classifier(train_set, dev_set, embedder, config)
    if args.test:
        test_set = _read_labeled(args.test)
        gold = [ex.label for ex in test_set]
        pred = [trained.predict(ex.tokens) for ex in test_set]
        micro, macro, _ = evalkit.micro_macro_f1(
            gold, pred, set(gold) | set(pred)
        )
        print(f"test micro F1 {micro:.2f}  macro F1 {macro:.2f}")
        with open(Path(args.out) / "predictions.tsv", "w") as fh:
            for g, p in zip(gold, pred):
                fh.write(f"{g}\t{p}\n")
    import torch

    torch.save(trained.model.state_dict(), Path(args.out) / "classifier.pt")
    return EXIT_OK


def cmd_finetune(args) -> int:
    write_manifest(args.out, "finetune", args)
    model, _ = encoder.load_checkpoint(args.checkpoint)
    vocab = _load_vocab(args.vocab)
    config = tagger.FinetuneConfig(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    if args.task == "sequence-classification":
        dataset = _read_labeled(args.train)
    else:
        dataset = _read_tagged(args.train)
    tuned = tagger.finetune_encoder(args.task, dataset, model, vocab, config)
    if args.test:
        if args.task == "sequence-classification":
            test_set = _read_labeled(args.test)
            gold = [ex.label for ex in test_set]
            pred = [tuned.predict_label(ex.tokens) for ex in test_set]
            micro, macro, _ = evalkit.micro_macro_f1(
                gold, pred, set(gold) | set(pred)
            )
            print(f"test micro F1 {micro:.2f}  macro F1 {macro:.2f}")
        else:
            test_set = _read_tagged(args.test)
            gold = [s.gold_tags for s in test_set]
            pred = [tuned.predict_tags(s.tokens) for s in test_set]
            print(f"test word accuracy {evalkit.word_accuracy(gold, pred):.2f}")
    import torch

    torch.save(tuned.model.state_dict(), Path(args.out) / "finetuned.pt")
    return EXIT_OK


def cmd_eval(args) -> int:
    write_manifest(args.out, "eval", args)
    with open(args.predictions, encoding="utf-8") as fh:
        if args.task in ("ner",):
            _, gold, pred = evalkit.read_conll_predictions(fh)
            p, r, f1 = evalkit.conll_prf(gold, pred)
            report = evalkit.MetricReport(
                task=args.task,
                metrics={"precision": p, "recall": r, "f1": f1},
                seed=args.seed,
            )
            print(f"P {p:.2f}  R {r:.2f}  F1 {f1:.2f}")
        elif args.task in ("pos",):
            _, gold, pred = evalkit.read_conll_predictions(fh)
            acc = evalkit.word_accuracy(gold, pred)
            report = evalkit.MetricReport(
                task=args.task, metrics={"word_accuracy": acc}, seed=args.seed
            )
            print(f"word accuracy {acc:.2f}")
        else:
            gold, pred = evalkit.read_classification_predictions(fh)
            micro, macro, per_class = evalkit.micro_macro_f1(
                gold, pred, set(gold) | set(pred)
            )
            report = evalkit.MetricReport(
                task=args.task,
                metrics={"micro_f1": micro, "macro_f1": macro},
                seed=args.seed,
            )
            print(f"micro F1 {micro:.2f}  macro F1 {macro:.2f}")
    with open(Path(args.out) / "report.jsonl", "w") as fh:
        evalkit.write_report(report, fh)
    return EXIT_OK


def cmd_compare(args) -> int:
    write_manifest(args.out, "compare", args)
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            reports.extend(evalkit.read_reports(fh))
    aggregate = evalkit.average_runs(reports, n=len(reports))
    for name in sorted(aggregate.metrics):
        std = aggregate.std[name] if aggregate.std else 0.0
        print(f"{name}: mean {aggregate.metrics[name]:.2f}  std {std:.2f}")
    with open(Path(args.out) / "aggregate.jsonl", "w") as fh:
        evalkit.write_report(aggregate, fh)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monolm",
        description="Monolingual LM pretraining and evaluation toolkit",
    )
    parser.add_argument("--config", help="flat key = value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_out=True):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker bound; 1 is the deterministic mode")
        if needs_out:
            p.add_argument("--out", default="out", help="artifact directory")
        return p

    p = add("ingest", cmd_ingest)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")

    p = add("stats", cmd_stats)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")

    p = add("split", cmd_split)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")
    p.add_argument("--ratios", default="0.7,0.15,0.15")

    p = add("vocab-train", cmd_vocab_train)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")
    p.add_argument("--target-size", type=int, default=50000)
    p.add_argument("--coverage", type=float, default=0.9995)
    p.add_argument("--seed-multiplier", type=int, default=10)
    p.add_argument("--max-piece-len", type=int, default=16)
    p.add_argument("--shrink-factor", type=float, default=0.75)
    p.add_argument("--em-iters", type=int, default=2)

    p = add("tokenize", cmd_tokenize, needs_out=False)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input")
    p.add_argument("--text", default="")

    p = add("fertility", cmd_fertility, needs_out=False)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")

    p = add("pretrain-data", cmd_pretrain_data)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")
    p.add_argument("--vocab", required=True)
    p.add_argument("--seq-len", default="128,512")
    p.add_argument("--phase-fractions", default="0.9,0.1")
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.add_argument("--wwm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--n-examples", type=int, default=1000)
    p.add_argument("--binary", action="store_true")

    p = add("pretrain", cmd_pretrain)
    p.add_argument("--vocab", required=True)
    p.add_argument("--examples", nargs="+", required=True)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--max-positions", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--total-steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = add("grad-check", cmd_grad_check, needs_out=False)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("charlm-train", cmd_charlm_train)
    p.add_argument("--input", required=True)
    p.add_argument("--source", default="unknown")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--epochs", type=int, default=2)

    p = add("embed", cmd_embed, needs_out=False)
    p.add_argument("--forward-model", required=True)
    p.add_argument("--backward-model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--pooled", choices=["mean", "min", "max"])

    for name, func in (("tag-train", cmd_tag_train),
                       ("classify-train", cmd_classify_train)):
        p = add(name, func)
        p.add_argument("--train", required=True)
        p.add_argument("--dev")
        p.add_argument("--test")
        p.add_argument("--embeddings", help="static embedding file")
        p.add_argument("--forward-model")
        p.add_argument("--backward-model")
        p.add_argument("--hidden", type=int, default=128)
        p.add_argument("--learning-rate", type=float, default=0.1)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch-size", type=int, default=64)

    p = add("finetune", cmd_finetune)
    p.add_argument("--task", required=True,
                   choices=["sequence-classification", "token-classification"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--learning-rate", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=16)

    p = add("eval", cmd_eval)
    p.add_argument("--task", required=True,
                   choices=["ner", "pos", "topic", "sentiment"])
    p.add_argument("--predictions", required=True)

    p = add("compare", cmd_compare)
    p.add_argument("--reports", nargs="+", required=True)

    return parser


def apply_config_file(args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    values = read_config_file(args.config)
    for key, value in values.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise evalkit.EvalError(f"unknown config key {key!r}")
        current = getattr(args, attr)
        if isinstance(current, bool):
            setattr(args, attr, value.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, attr, int(value))
        elif isinstance(current, float):
            setattr(args, attr, float(value))
        else:
            setattr(args, attr, value)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config_file(args)
        if getattr(args, "threads", 1) == 1:
            try:
                import torch

                torch.set_num_threads(1)
            except ImportError:
                pass
        random.seed(getattr(args, "seed", 0))
        return args.func(args)
    except encoder.NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
