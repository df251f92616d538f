"""End-to-end experiment driver.

One experiment fixes a task, a model and a training recipe, then trains a
fresh model per shuffle fraction.  Everything except the target permutation
is identical across fractions: same initial weights, same batch order, same
dropout masks, same held-out test set.  Results land in a TSV report that is
byte-identical across reruns of the same config.
"""

from __future__ import annotations

import hashlib
import logging
import traceback
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import model as mdl
from .corpus import (
    ParallelCorpus,
    ShuffleSpec,
    SyntheticTaskSpec,
    Vocabulary,
    generate_synthetic,
    load_corpus,
    shuffle_targets,
    write_corpus,
)
from .decoding import DecodeConfig, decode_corpus
from .metrics import MetricsReport, ProbeReport, UnigramModel, cap_repeats, entropy, evaluate_outputs, neg_log_prob, r2_probe
from .rng import Xoshiro256StarStar, derive_seed
from .training import TrainConfig, train, write_training_log

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    """Flat experiment settings; every field maps to one config-file key."""

    # data
    task: str = "cipher-reverse"  # copy | reverse | cipher-reverse | files
    vocab_size: int = 50
    min_len: int = 5
    max_len: int = 15
    train_pairs: int = 10000
    test_pairs: int = 1000
    token_dist: str = "zipf"
    zipf_exponent: float = 0.75
    train_source: str = ""
    train_target: str = ""
    test_source: str = ""
    test_target: str = ""
    # sweep
    fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    # training
    epochs: int = 8
    batch_size: int = 60
    dropout_rate: float = 0.2
    learning_rate: float = 1e-3
    max_sentence_length: int = 50
    checkpoint_every: int = 0
    max_grad_norm: float = 0.0
    # model
    embed: int = 32
    hidden: int = 64
    att: int = 64
    # decoding
    beam_size: int = 12
    max_decode_length: int = 0  # 0: longest reference plus a margin of 5
    length_normalization: bool = True
    # probing
    probe_cap: int = 100000
    # bookkeeping
    seed: int = 42
    out_dir: str = "runs/exp"


def parse_config_text(text: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError("config line %d has no '=': %r" % (lineno, raw))
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _coerce(name: str, kind, raw: str):
    if kind == bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("config key %s: expected a boolean, got %r" % (name, raw))
    if kind == "tuple[float, ...]" or kind == tuple:
        return tuple(float(part) for part in raw.split(",") if part.strip() != "")
    if kind == int or kind == "int":
        return int(raw)
    if kind == float or kind == "float":
        return float(raw)
    return raw


def config_from_mapping(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError("unknown config key %r" % key)
        kind = known[key]
        if key == "fractions":
            updates[key] = _coerce(key, tuple, raw)
        elif kind in ("bool", "int", "float"):
            updates[key] = _coerce(key, kind, raw)
        else:
            updates[key] = raw
    return replace(cfg, **updates)


def load_config_file(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return config_from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")), base)


def config_snapshot(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        val = getattr(cfg, f.name)
        if f.name == "fractions":
            val = ",".join("%g" % p for p in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = "%g" % val
        lines.append("%s=%s" % (f.name, val))
    return "\n".join(lines) + "\n"


@dataclass
class FractionResult:
    fraction: float
    status: str  # "ok" or "failed"
    metrics: MetricsReport | None = None
    probe: ProbeReport | None = None
    error: str = ""


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list[FractionResult]
    out_dir: Path
    report_path: Path


REPORT_COLUMNS = (
    "fraction",
    "status",
    "bleu",
    "bleu1",
    "bleu2",
    "bleu3",
    "bleu4",
    "avg_length",
    "length_pct_of_ref",
    "neg_log_prob",
    "entropy",
    "r2_encoder",
    "r2_decoder",
    "sentences",
    "encoder_samples",
    "decoder_samples",
)


def _report_row(res: FractionResult) -> str:
    cells = ["%g" % res.fraction, res.status]
    if res.metrics and res.probe:
        m, p = res.metrics, res.probe
        cells += ["%.6f" % v for v in (m.bleu, *m.bleu_n, m.avg_length, m.length_pct_of_ref, m.neg_log_prob, m.entropy)]
        cells += ["%.6f" % p.r2_encoder, "%.6f" % p.r2_decoder]
        cells += ["%d" % m.sentences, "%d" % p.encoder_samples, "%d" % p.decoder_samples]
    else:
        cells += ["NA"] * (len(REPORT_COLUMNS) - 2)
    return "\t".join(cells)


def write_report(path: str | Path, results: list[FractionResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for res in results:
            fh.write(_report_row(res) + "\n")


def _pair_hashes(corpus: ParallelCorpus) -> set[str]:
    out = set()
    for src, tgt in zip(corpus.source_sentences(), corpus.target_sentences()):
        out.add(hashlib.sha256((" ".join(src) + "\t" + " ".join(tgt)).encode("utf-8")).hexdigest())
    return out


def prepare_data(cfg: ExperimentConfig) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Build or load the aligned train/test corpora (before any shuffling)."""
    if cfg.task == "files":
        for key in ("train_source", "train_target", "test_source", "test_target"):
            if not getattr(cfg, key):
                raise ValueError("task=files needs the %s path" % key)
        probe = _read_tokens_for_vocab(cfg.train_source)
        src_vocab = Vocabulary.build(probe, cfg.vocab_size)
        tgt_vocab = Vocabulary.build(_read_tokens_for_vocab(cfg.train_target), cfg.vocab_size)
        train_corpus = load_corpus(cfg.train_source, cfg.train_target, src_vocab, tgt_vocab)
        test_corpus = load_corpus(cfg.test_source, cfg.test_target, src_vocab, tgt_vocab)
        return train_corpus, test_corpus

    spec = SyntheticTaskSpec(
        kind=cfg.task,
        vocab_size=cfg.vocab_size,
        min_len=cfg.min_len,
        max_len=cfg.max_len,
        count=cfg.train_pairs + cfg.test_pairs,
        seed=derive_seed(cfg.seed, "data"),
        token_dist=cfg.token_dist,
        zipf_exponent=cfg.zipf_exponent,
    )
    full = generate_synthetic(spec)
    rng = Xoshiro256StarStar(derive_seed(cfg.seed, "split"))
    order = rng.permutation(len(full.pairs))
    test_idx = sorted(order[: cfg.test_pairs])
    train_idx = sorted(order[cfg.test_pairs :])
    train_corpus = ParallelCorpus([full.pairs[i] for i in train_idx], full.source_vocab, full.target_vocab)
    test_corpus = ParallelCorpus([full.pairs[i] for i in test_idx], full.source_vocab, full.target_vocab)
    return train_corpus, test_corpus


def _read_tokens_for_vocab(path: str):
    def gen():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                yield from line.split()

    return gen()


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_snapshot(cfg), encoding="utf-8")

    train_corpus, test_corpus = prepare_data(cfg)
    overlap = len(_pair_hashes(train_corpus) & _pair_hashes(test_corpus))
    if overlap:
        log.warning("train/test share %d identical sentence pairs (small tasks can repeat content)", overlap)

    data_dir = out_dir / "data"
    data_dir.mkdir(exist_ok=True)
    write_corpus(train_corpus, data_dir / "train.src", data_dir / "train.tgt")
    write_corpus(test_corpus, data_dir / "test.src", data_dir / "test.tgt")
    train_corpus.source_vocab.save(data_dir / "vocab.src")
    train_corpus.target_vocab.save(data_dir / "vocab.tgt")

    references = test_corpus.target_sentences()
    max_decode = cfg.max_decode_length
    if max_decode <= 0:
        longest = max(len(p.target) for p in train_corpus.pairs + test_corpus.pairs)
        max_decode = longest + 5
    decode_cfg = DecodeConfig(cfg.beam_size, max_decode, cfg.length_normalization)

    hyper = mdl.Hyper(
        source_vocab=len(train_corpus.source_vocab),
        target_vocab=len(train_corpus.target_vocab),
        embed=cfg.embed,
        hidden=cfg.hidden,
        att=cfg.att,
    )
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

    results = []
    for fraction in cfg.fractions:
        results.append(
            _run_fraction(cfg, fraction, train_corpus, test_corpus, references, hyper, train_cfg, decode_cfg, out_dir)
        )

    report_path = out_dir / "report.tsv"
    write_report(report_path, results)
    return ExperimentReport(cfg, results, out_dir, report_path)


def _run_fraction(
    cfg: ExperimentConfig,
    fraction: float,
    train_corpus: ParallelCorpus,
    test_corpus: ParallelCorpus,
    references: list[list[str]],
    hyper: mdl.Hyper,
    train_cfg: TrainConfig,
    decode_cfg: DecodeConfig,
    out_dir: Path,
) -> FractionResult:
    frac_dir = out_dir / ("frac_%g" % fraction)
    frac_dir.mkdir(exist_ok=True)
    try:
        shuffled = shuffle_targets(train_corpus, ShuffleSpec(fraction, derive_seed(cfg.seed, "shuffle", fraction)))
        write_corpus(shuffled, frac_dir / "train.src", frac_dir / "train.tgt")

        model = mdl.init_parameters(hyper, derive_seed(cfg.seed, "model"))
        model, stats = train(train_cfg, shuffled, model, checkpoint_dir=frac_dir)
        write_training_log(frac_dir / "training_log.tsv", stats)

        decoded = decode_corpus(model, [p.source for p in test_corpus.pairs], decode_cfg)
        candidates = [test_corpus.target_vocab.decode(ids) for ids in decoded]
        with open(frac_dir / "decoded.txt", "w", encoding="utf-8") as fh:
            for sent in candidates:
                fh.write(" ".join(sent) + "\n")

        unigrams = UnigramModel.from_sentences(shuffled.target_sentences())
        metrics = evaluate_outputs(candidates, references, unigrams)
        probe = ProbeReport(
            *_probe_pair(model, test_corpus, cfg.probe_cap, derive_seed(cfg.seed, "probe", fraction))
        )
        _write_fraction_summary(frac_dir / "metrics.txt", metrics, probe, references, unigrams, decode_cfg)
        log.info("fraction %g: BLEU %.2f", fraction, metrics.bleu)
        return FractionResult(fraction, "ok", metrics, probe)
    except Exception as err:  # keep sweeping the remaining fractions
        (frac_dir / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
        log.error("fraction %g failed: %s", fraction, err)
        return FractionResult(fraction, "failed", error=str(err))


def _probe_pair(model, corpus, cap, seed):
    r2_enc, n_enc = r2_probe(model, corpus, "encoder", cap, seed)
    r2_dec, n_dec = r2_probe(model, corpus, "decoder", cap, seed)
    return r2_enc, r2_dec, n_enc, n_dec


def _write_fraction_summary(path, metrics: MetricsReport, probe: ProbeReport, references, unigrams, decode_cfg) -> None:
    capped_refs = [cap_repeats(r) for r in references]
    lines = [
        "bleu=%.6f" % metrics.bleu,
        "bleu_n=%s" % ",".join("%.6f" % v for v in metrics.bleu_n),
        "avg_length=%.6f" % metrics.avg_length,
        "length_pct_of_ref=%.6f" % metrics.length_pct_of_ref,
        "neg_log_prob=%.6f" % metrics.neg_log_prob,
        "entropy=%.6f" % metrics.entropy,
        "sentences=%d" % metrics.sentences,
        "r2_encoder=%.6f" % probe.r2_encoder,
        "r2_decoder=%.6f" % probe.r2_decoder,
        "encoder_samples=%d" % probe.encoder_samples,
        "decoder_samples=%d" % probe.decoder_samples,
        "reference_neg_log_prob=%.6f" % neg_log_prob(capped_refs, unigrams),
        "reference_entropy=%.6f" % entropy(capped_refs),
        "beam_size=%d" % decode_cfg.beam_size,
        "max_decode_length=%d" % decode_cfg.max_length,
        "length_normalization=%s" % ("true" if decode_cfg.length_normalization else "false"),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
