"""Output metrics: corpus BLEU, length statistics, unigram information
measures, and a linear probe for positional information in hidden states.

Conventions
-----------
BLEU runs on raw token sequences.  The length, entropy and negative
log-probability metrics all run on repetition-capped streams: any run of one
token longer than four is truncated to four (``cap_repeats``).  Information
measures default to base-2 logarithms (bits).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import model as mdl
from . import numerics as nm
from .corpus import ParallelCorpus, UNK
from .rng import Xoshiro256StarStar, derive_seed

MAX_RUN = 4


def cap_repeats(tokens: Sequence, max_run: int = MAX_RUN) -> list:
    """Truncate every run of an identical token to at most max_run copies."""
    out: list = []
    run = 0
    for tok in tokens:
        run = run + 1 if out and tok == out[-1] else 1
        if run <= max_run:
            out.append(tok)
    return out


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def combine_bleu(precisions_pct: Sequence[float], cand_len: int, ref_len: int) -> float:
    """Scale-100 BLEU from per-order precisions (percent) and corpus lengths.

    Geometric mean of the precisions times the brevity penalty
    min(1, exp(1 - ref_len / cand_len)).  Any zero precision gives zero.
    """
    if any(p <= 0.0 for p in precisions_pct):
        return 0.0
    if cand_len <= 0:
        return 0.0
    log_mean = math.fsum(math.log(p / 100.0) for p in precisions_pct) / len(precisions_pct)
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return 100.0 * bp * math.exp(log_mean)


def bleu(
    candidates: Sequence[Sequence],
    references: Sequence[Sequence],
    max_order: int = 4,
) -> tuple[float, list[float]]:
    """Corpus-level BLEU with clipped counts, one reference per candidate.

    Returns (bleu, [p1..pn]) on the 0..100 scale.  The per-order precisions
    carry no brevity penalty.  No smoothing: an order with zero matches (or
    zero candidate n-grams) zeroes the combined score.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError(
            "bleu needs equal nonzero counts, got %d candidates and %d references"
            % (len(candidates), len(references))
        )
    matched = [0] * max_order
    total = [0] * max_order
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    precisions = [100.0 * m / t if t else 0.0 for m, t in zip(matched, total)]
    return combine_bleu(precisions, cand_len, ref_len), precisions


# ---------------------------------------------------------------------------
# length and information measures


def length_stats(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> tuple[float, float]:
    """(mean capped candidate length, percent of mean capped reference length)."""
    if not candidates or len(candidates) != len(references):
        raise ValueError("length_stats needs equal nonzero candidate/reference counts")
    avg_cand = sum(len(cap_repeats(c)) for c in candidates) / len(candidates)
    avg_ref = sum(len(cap_repeats(r)) for r in references) / len(references)
    if avg_ref <= 0:
        raise ValueError("reference corpus has no tokens")
    return avg_cand, 100.0 * avg_cand / avg_ref


class UnigramModel:
    """Relative-frequency unigram distribution with a floor for unseen tokens.

    Unseen tokens score as UNK, whose count is floored at one, so every query
    has finite log-probability and the distribution still sums to one.
    """

    def __init__(self, counts: Counter, log_base: float = 2.0):
        self.counts = Counter(counts)
        self.counts[UNK] = max(self.counts.get(UNK, 0), 1)
        self.total = sum(self.counts.values())
        self.log_base = log_base

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]], log_base: float = 2.0) -> "UnigramModel":
        counts: Counter = Counter()
        for sent in sentences:
            counts.update(sent)
        return cls(counts, log_base)

    def prob(self, token: str) -> float:
        return self.counts.get(token, self.counts[UNK]) / self.total

    def log_prob(self, token: str) -> float:
        return math.log(self.prob(token), self.log_base)


def neg_log_prob(candidates: Sequence[Sequence[str]], train_unigrams: UnigramModel) -> float:
    """Mean over candidate tokens of -log p(token) under the training unigrams.

    Callers should pass repetition-capped candidates.
    """
    n_tokens = sum(len(c) for c in candidates)
    if not candidates or n_tokens == 0:
        raise ValueError("neg_log_prob needs at least one candidate token")
    return -math.fsum(train_unigrams.log_prob(t) for c in candidates for t in c) / n_tokens


def entropy(candidates: Sequence[Sequence], log_base: float = 2.0) -> float:
    """Shannon entropy of the candidates' empirical unigram distribution.

    Callers should pass repetition-capped candidates.
    """
    counts: Counter = Counter(t for c in candidates for t in c)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("entropy needs at least one candidate token")
    return -math.fsum((c / total) * math.log(c / total, log_base) for c in counts.values())


# ---------------------------------------------------------------------------
# positional probe


RIDGE = 1e-8


def fit_position_r2(states: np.ndarray, positions: np.ndarray) -> float:
    """In-sample R^2 of ordinary least squares (with intercept) predicting
    1-based positions from state vectors.

    The normal equations get a ridge of 1e-8 on the diagonal for rank safety;
    on well-conditioned data this perturbs R^2 only at second order.
    """
    states = np.asarray(states, dtype=np.float64)
    y = np.asarray(positions, dtype=np.float64)
    if states.ndim != 2 or y.shape != (states.shape[0],):
        raise ValueError("expected states [n, d] with positions [n]")
    n, d = states.shape
    if n < d + 2:
        raise ValueError("need at least dim + 2 = %d samples, got %d" % (d + 2, n))
    x = np.hstack([np.ones((n, 1)), states])
    gram = x.T @ x + RIDGE * np.eye(d + 1)
    coef = np.linalg.solve(gram, x.T @ y)
    residual = y - x @ coef
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("positions have zero variance")
    return 1.0 - ss_res / ss_tot


def _collect_states(model: mdl.ModelParameters, corpus: ParallelCorpus, side: str, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states and their 1-based time indices, teacher-forced, no grad."""
    from .training import make_batches  # local import to avoid a cycle

    vec_dim = 2 * model.hyper.hidden if side == "encoder" else model.hyper.hidden
    states: list[np.ndarray] = []
    positions: list[int] = []
    with nm.no_grad():
        for batch in make_batches(corpus, batch_size, seed=0, max_len=0):
            enc = mdl.encode(model.encoder, batch.src, batch.src_mask)
            if side == "encoder":
                data = enc.states.data  # [L, B, 2H]
                for t in range(data.shape[0]):
                    keep = batch.src_mask[:, t] > 0
                    states.extend(data[t, keep])
                    positions.extend([t + 1] * int(keep.sum()))
            else:
                keys = mdl.attention_keys(model.decoder.attention, enc)
                h = mdl.initial_state(model.decoder, enc)
                for j in range(batch.tgt_in.shape[1]):
                    h, _, _ = mdl.decoder_step(model.decoder, batch.tgt_in[:, j], h, enc, keys)
                    keep = batch.tgt_mask[:, j] > 0
                    states.extend(h.data[keep])
                    positions.extend([j + 1] * int(keep.sum()))
    return np.asarray(states).reshape(-1, vec_dim), np.asarray(positions, dtype=np.float64)


def r2_probe(
    model: mdl.ModelParameters,
    corpus: ParallelCorpus,
    side: str,
    sample_cap: int = 100_000,
    seed: int = 0,
) -> tuple[float, int]:
    """R^2 of a linear read-out of time position from hidden states.

    side is "encoder" (concatenated bidirectional states per source token) or
    "decoder" (post-attention recurrent states under teacher forcing).
    Returns (r2, samples used); at most sample_cap state vectors enter the
    fit, chosen by a seeded subsample when more are available.
    """
    if side not in ("encoder", "decoder"):
        raise ValueError("side must be 'encoder' or 'decoder', got %r" % side)
    states, positions = _collect_states(model, corpus, side)
    if states.shape[0] > sample_cap:
        rng = Xoshiro256StarStar(derive_seed(seed, "probe-subsample", side))
        idx = rng.sample_indices(states.shape[0], sample_cap)
        states, positions = states[idx], positions[idx]
    return fit_position_r2(states, positions), states.shape[0]


# ---------------------------------------------------------------------------
# report containers


@dataclass
class MetricsReport:
    bleu: float
    bleu_n: list[float]
    avg_length: float
    length_pct_of_ref: float
    neg_log_prob: float
    entropy: float
    sentences: int


@dataclass
class ProbeReport:
    r2_encoder: float
    r2_decoder: float
    encoder_samples: int
    decoder_samples: int


def evaluate_outputs(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    train_unigrams: UnigramModel,
) -> MetricsReport:
    """All output metrics in one pass; capping applied once, uniformly."""
    capped = [cap_repeats(c) for c in candidates]
    score, by_order = bleu(candidates, references)
    avg_len, pct = length_stats(capped, references)
    return MetricsReport(
        bleu=score,
        bleu_n=by_order,
        avg_length=avg_len,
        length_pct_of_ref=pct,
        neg_log_prob=neg_log_prob(capped, train_unigrams),
        entropy=entropy(capped),
        sentences=len(candidates),
    )
