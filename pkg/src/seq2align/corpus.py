"""Parallel corpora: vocabulary, file IO, target shuffling, synthetic tasks.

File formats
------------
A parallel corpus is two UTF-8 text files with one sentence per line, tokens
separated by single spaces, and line i of the source file aligned with line i
of the target file.  A vocabulary file lists one token per line; the token on
(zero-based) line i has id i + 4, ids 0..3 being reserved.
"""

from __future__ import annotations

import bisect
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .rng import Xoshiro256StarStar, derive_seed

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, BOS, EOS)


@dataclass
class Vocabulary:
    """Token <-> id mapping with four reserved entries at ids 0..3."""

    tokens: list[str]  # content tokens; tokens[i] has id i + 4
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i + len(RESERVED) for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for tok in RESERVED:
            if tok in self.index:
                raise ValueError("reserved token %r also appears as content" % tok)

    def __len__(self) -> int:
        return len(self.tokens) + len(RESERVED)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if 0 <= token_id < len(RESERVED):
            return RESERVED[token_id]
        content = token_id - len(RESERVED)
        if 0 <= content < len(self.tokens):
            return self.tokens[content]
        raise IndexError("token id %d outside vocabulary of size %d" % (token_id, len(self)))

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of(i) for i in ids]

    @classmethod
    def build(cls, token_stream: Iterable[str], max_size: int) -> "Vocabulary":
        """Keep the (max_size - 4) most frequent tokens, ties broken by first occurrence."""
        if max_size < len(RESERVED) + 1:
            raise ValueError("max_size must be at least %d, got %d" % (len(RESERVED) + 1, max_size))
        counts: Counter[str] = Counter()
        first_seen: dict[str, int] = {}
        for tok in token_stream:
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
        if not counts:
            log.warning("building a vocabulary from an empty token stream; only reserved ids exist")
        ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
        return cls(tokens=ranked[: max_size - len(RESERVED)])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens=tokens)

    def content_hash(self) -> str:
        """sha256 hex digest of the serialized vocabulary file content."""
        import hashlib

        blob = "".join(tok + "\n" for tok in self.tokens).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SentencePair:
    source: list[int]
    target: list[int]


@dataclass
class ParallelCorpus:
    pairs: list[SentencePair]
    source_vocab: Vocabulary
    target_vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.pairs)

    def source_sentences(self) -> list[list[str]]:
        return [self.source_vocab.decode(p.source) for p in self.pairs]

    def target_sentences(self) -> list[list[str]]:
        return [self.target_vocab.decode(p.target) for p in self.pairs]


def _read_token_lines(path: str | Path) -> list[list[str]]:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                raise ValueError("%s: line %d is empty" % (path, lineno))
            sentences.append(tokens)
    return sentences


def load_corpus(
    source_path: str | Path,
    target_path: str | Path,
    source_vocab: Vocabulary,
    target_vocab: Vocabulary,
) -> ParallelCorpus:
    """Read an aligned pair of token files, mapping unknown tokens to UNK."""
    src = _read_token_lines(source_path)
    tgt = _read_token_lines(target_path)
    if len(src) != len(tgt):
        raise ValueError(
            "line count mismatch: %s has %d lines, %s has %d" % (source_path, len(src), target_path, len(tgt))
        )
    if not src:
        raise ValueError("corpus %s is empty" % source_path)
    pairs = [SentencePair(source_vocab.encode(s), target_vocab.encode(t)) for s, t in zip(src, tgt)]
    return ParallelCorpus(pairs, source_vocab, target_vocab)


def write_corpus(corpus: ParallelCorpus, source_path: str | Path, target_path: str | Path) -> None:
    with open(source_path, "w", encoding="utf-8") as fh:
        for sent in corpus.source_sentences():
            fh.write(" ".join(sent) + "\n")
    with open(target_path, "w", encoding="utf-8") as fh:
        for sent in corpus.target_sentences():
            fh.write(" ".join(sent) + "\n")


# ---------------------------------------------------------------------------
# target shuffling


@dataclass(frozen=True)
class ShuffleSpec:
    """Fraction of training targets to permute, plus the seed that fixes which."""

    fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("shuffle fraction must be in [0, 1], got %r" % (self.fraction,))


def select_shuffle_indices(n: int, spec: ShuffleSpec) -> list[int]:
    """The sorted positions whose targets get permuted: round(fraction * n) of them."""
    k = int(spec.fraction * n + 0.5)  # round half up, so round(0.5 * odd) is stable
    rng = Xoshiro256StarStar(derive_seed(spec.seed, "subset"))
    return rng.sample_indices(n, k)


def shuffle_targets(corpus: ParallelCorpus, spec: ShuffleSpec) -> ParallelCorpus:
    """Permute the targets at a seeded subset of positions; sources stay put.

    The permutation runs over the selected positions only and may have fixed
    points.  The multiset of target sentences is unchanged.
    """
    positions = select_shuffle_indices(len(corpus), spec)
    moved = [corpus.pairs[i].target for i in positions]
    rng = Xoshiro256StarStar(derive_seed(spec.seed, "perm"))
    rng.shuffle(moved)
    pairs = [replace(p) for p in corpus.pairs]
    for pos, tgt in zip(positions, moved):
        pairs[pos] = SentencePair(pairs[pos].source, tgt)
    return ParallelCorpus(pairs, corpus.source_vocab, corpus.target_vocab)


# ---------------------------------------------------------------------------
# synthetic transduction tasks


TASK_KINDS = ("copy", "reverse", "cipher-reverse")
TOKEN_DISTRIBUTIONS = ("uniform", "zipf")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    vocab_size: int
    min_len: int
    max_len: int
    count: int
    seed: int
    token_dist: str = "uniform"
    zipf_exponent: float = 1.1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError("unknown task kind %r; expected one of %s" % (self.kind, TASK_KINDS))
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len, got %d..%d" % (self.min_len, self.max_len))
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.token_dist not in TOKEN_DISTRIBUTIONS:
            raise ValueError("unknown token_dist %r; expected one of %s" % (self.token_dist, TOKEN_DISTRIBUTIONS))


def _token_cdf(spec: SyntheticTaskSpec) -> list[float]:
    if spec.token_dist == "uniform":
        weights = [1.0] * spec.vocab_size
    else:
        weights = [1.0 / (rank + 1) ** spec.zipf_exponent for rank in range(spec.vocab_size)]
    total = sum(weights)
    cdf, acc = [], 0.0
    for w in weights:
        acc += w / total
        cdf.append(acc)
    cdf[-1] = 1.0
    return cdf


def generate_synthetic(spec: SyntheticTaskSpec) -> ParallelCorpus:
    """Deterministic toy corpus: source drawn from the task distribution,
    target a fixed transform of it (copy, reversal, or token-cipher reversal)."""
    width = len(str(spec.vocab_size - 1))
    tokens = ["w%0*d" % (width, i) for i in range(spec.vocab_size)]
    vocab = Vocabulary(tokens=tokens)

    rng = Xoshiro256StarStar(derive_seed(spec.seed, "synthesis"))
    cipher = list(range(spec.vocab_size))
    if spec.kind == "cipher-reverse":
        rng.shuffle(cipher)
    cdf = _token_cdf(spec)

    base = len(RESERVED)
    pairs = []
    for _ in range(spec.count):
        length = spec.min_len + rng.randrange(spec.max_len - spec.min_len + 1)
        src = [bisect.bisect_left(cdf, rng.random()) for _ in range(length)]
        if spec.kind == "copy":
            tgt = list(src)
        elif spec.kind == "reverse":
            tgt = src[::-1]
        else:
            tgt = [cipher[t] for t in reversed(src)]
        pairs.append(SentencePair([t + base for t in src], [t + base for t in tgt]))
    return ParallelCorpus(pairs, vocab, vocab)
