"""Command-line front end.

Every subcommand accepts --config (flat key=value file, same keys as the
experiment config) and --seed; explicit flags win over config values.  Each
run prints name=path lines for the artifacts it wrote.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import model as mdl
from .corpus import ShuffleSpec, SyntheticTaskSpec, Vocabulary, generate_synthetic, load_corpus, shuffle_targets, write_corpus
from .decoding import DecodeConfig, decode_corpus
from .harness import ExperimentConfig, config_from_mapping, load_config_file, run_experiment
from .metrics import UnigramModel, cap_repeats, evaluate_outputs, r2_probe
from .rng import derive_seed
from .training import TrainConfig, train, write_training_log


def _base_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        cfg = load_config_file(args.config, cfg)
    overrides = {}
    for key in vars(args):
        if key in ("config", "command", "func"):
            continue
        val = getattr(args, key)
        if val is not None and hasattr(cfg, key):
            overrides[key] = str(val)
    return config_from_mapping(overrides, cfg) if overrides else cfg


def _emit(**paths) -> None:
    for name, path in paths.items():
        print("%s=%s" % (name, path))


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticTaskSpec(
        kind=cfg.task,
        vocab_size=cfg.vocab_size,
        min_len=cfg.min_len,
        max_len=cfg.max_len,
        count=args.count if args.count is not None else cfg.train_pairs,
        seed=derive_seed(cfg.seed, "data"),
        token_dist=cfg.token_dist,
        zipf_exponent=cfg.zipf_exponent,
    )
    corpus = generate_synthetic(spec)
    write_corpus(corpus, out / "corpus.src", out / "corpus.tgt")
    corpus.source_vocab.save(out / "vocab.src")
    corpus.target_vocab.save(out / "vocab.tgt")
    _emit(source=out / "corpus.src", target=out / "corpus.tgt", source_vocab=out / "vocab.src", target_vocab=out / "vocab.tgt")
    return 0


def _lossless_vocab(path: str) -> Vocabulary:
    """A vocabulary covering every token in the file, so encoding round-trips."""
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens.extend(line.split())
    return Vocabulary.build(tokens, max_size=len(set(tokens)) + 4)


def cmd_shuffle(args) -> int:
    cfg = _base_config(args)
    src_vocab = _lossless_vocab(args.source)
    tgt_vocab = _lossless_vocab(args.target)
    corpus = load_corpus(args.source, args.target, src_vocab, tgt_vocab)
    shuffled = shuffle_targets(corpus, ShuffleSpec(args.fraction, derive_seed(cfg.seed, "shuffle", args.fraction)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(shuffled, out / "shuffled.src", out / "shuffled.tgt")
    _emit(source=out / "shuffled.src", target=out / "shuffled.tgt")
    return 0


def _load_train_corpus(cfg: ExperimentConfig, args):
    src_vocab = Vocabulary.load(args.source_vocab) if args.source_vocab else _build_vocab(args.source, cfg.vocab_size)
    tgt_vocab = Vocabulary.load(args.target_vocab) if args.target_vocab else _build_vocab(args.target, cfg.vocab_size)
    return load_corpus(args.source, args.target, src_vocab, tgt_vocab)


def _build_vocab(path: str, max_size: int) -> Vocabulary:
    def stream():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                yield from line.split()

    return Vocabulary.build(stream(), max_size)


def cmd_train(args) -> int:
    cfg = _base_config(args)
    corpus = _load_train_corpus(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.source_vocab.save(out / "vocab.src")
    corpus.target_vocab.save(out / "vocab.tgt")
    hyper = mdl.Hyper(len(corpus.source_vocab), len(corpus.target_vocab), cfg.embed, cfg.hidden, cfg.att)
    model = mdl.init_parameters(hyper, derive_seed(cfg.seed, "model"))
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        dropout_rate=cfg.dropout_rate,
        seed=derive_seed(cfg.seed, "train"),
        max_sentence_length=cfg.max_sentence_length,
        checkpoint_every=cfg.checkpoint_every,
        learning_rate=cfg.learning_rate,
        max_grad_norm=cfg.max_grad_norm,
    )
    model, stats = train(train_cfg, corpus, model, checkpoint_dir=out)
    write_training_log(out / "training_log.tsv", stats)
    _emit(checkpoint=out / "checkpoint_final.bin", training_log=out / "training_log.tsv")
    return 0


def _check_vocab_hashes(meta: dict, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
    """Refuse checkpoint/vocabulary combinations that were not trained together."""
    for side, expect, vocab in (
        ("source", meta.get("source_vocab_sha256"), src_vocab),
        ("target", meta.get("target_vocab_sha256"), tgt_vocab),
    ):
        if expect and expect != vocab.content_hash():
            raise ValueError("%s vocabulary does not match the one the checkpoint was trained with" % side)


def cmd_decode(args) -> int:
    cfg = _base_config(args)
    model, meta = mdl.load_checkpoint(args.checkpoint)
    src_vocab = Vocabulary.load(args.source_vocab)
    tgt_vocab = Vocabulary.load(args.target_vocab)
    _check_vocab_hashes(meta, src_vocab, tgt_vocab)
    sentences = []
    with open(args.source, encoding="utf-8") as fh:
        for line in fh:
            sentences.append(src_vocab.encode(line.split()))
    decode_cfg = DecodeConfig(cfg.beam_size, cfg.max_decode_length or 50, cfg.length_normalization)
    decoded = decode_corpus(model, sentences, decode_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for ids in decoded:
            fh.write(" ".join(tgt_vocab.decode(ids)) + "\n")
    _emit(decoded=out)
    return 0


def _read_sentences(path: str) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


def cmd_evaluate(args) -> int:
    candidates = _read_sentences(args.candidates)
    references = _read_sentences(args.references)
    unigrams = UnigramModel.from_sentences(_read_sentences(args.train_targets))
    report = evaluate_outputs(candidates, references, unigrams)
    print("bleu=%.6f" % report.bleu)
    for i, p in enumerate(report.bleu_n, start=1):
        print("bleu%d=%.6f" % (i, p))
    print("avg_length=%.6f" % report.avg_length)
    print("length_pct_of_ref=%.6f" % report.length_pct_of_ref)
    print("neg_log_prob=%.6f" % report.neg_log_prob)
    print("entropy=%.6f" % report.entropy)
    print("sentences=%d" % report.sentences)
    return 0


def cmd_probe(args) -> int:
    cfg = _base_config(args)
    model, meta = mdl.load_checkpoint(args.checkpoint)
    src_vocab = Vocabulary.load(args.source_vocab)
    tgt_vocab = Vocabulary.load(args.target_vocab)
    _check_vocab_hashes(meta, src_vocab, tgt_vocab)
    corpus = load_corpus(args.source, args.target, src_vocab, tgt_vocab)
    sides = ("encoder", "decoder") if args.side == "both" else (args.side,)
    for side in sides:
        r2, n = r2_probe(model, corpus, side, cfg.probe_cap, derive_seed(cfg.seed, "probe"))
        print("r2_%s=%.6f" % (side, r2))
        print("%s_samples=%d" % (side, n))
    return 0


def cmd_run(args) -> int:
    cfg = _base_config(args)
    if args.out is not None:
        cfg = config_from_mapping({"out_dir": args.out}, cfg)
    report = run_experiment(cfg)
    _emit(report=report.report_path, out_dir=report.out_dir)
    failed = [r for r in report.results if r.status != "ok"]
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seq2align", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")

    p = sub.add_parser("gen-data", help="write a synthetic parallel corpus")
    common(p)
    p.add_argument("--task", default=None, help="copy | reverse | cipher-reverse")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    p.add_argument("--min-len", dest="min_len", type=int, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.add_argument("--count", type=int, default=None, help="number of pairs")
    p.add_argument("--token-dist", dest="token_dist", default=None, help="uniform | zipf")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("shuffle", help="permute a fraction of the target side")
    common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shuffle)

    p = sub.add_parser("train", help="train a model on a parallel corpus")
    common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source-vocab", dest="source_vocab", default=None)
    p.add_argument("--target-vocab", dest="target_vocab", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a source file with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--source-vocab", dest="source_vocab", required=True)
    p.add_argument("--target-vocab", dest="target_vocab", required=True)
    p.add_argument("--beam-size", dest="beam_size", type=int, default=None)
    p.add_argument("--max-decode-length", dest="max_decode_length", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score decoded output against references")
    common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--train-targets", dest="train_targets", required=True, help="target side of the training set")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="linear position probe on hidden states")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source-vocab", dest="source_vocab", required=True)
    p.add_argument("--target-vocab", dest="target_vocab", required=True)
    p.add_argument("--side", choices=("encoder", "decoder", "both"), default="both")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("run", help="full shuffle-fraction sweep with report")
    common(p)
    p.add_argument("--out", default=None, help="output directory (config: out_dir)")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
