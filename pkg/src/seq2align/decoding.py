"""Greedy and beam-search decoding.

Both decoders run the model in inference mode (no gradient graph), never emit
PAD or BOS, and stop a hypothesis when it emits EOS or reaches max_length
steps.  Returned sequences exclude the terminal EOS.  Scoring is the sum of
per-step natural log probabilities; with length normalization on, the final
hypothesis choice divides that sum by the number of steps taken (EOS
included).  All ties break deterministically: lower token id first, then
earlier hypothesis order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import numerics as nm
from .corpus import BOS_ID, EOS_ID, PAD_ID

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    beam_size: int = 12
    max_length: int = 50
    length_normalization: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)  # includes terminal EOS when finished
    log_prob: float = 0.0
    finished: bool = False

    def score(self, length_normalization: bool) -> float:
        if length_normalization:
            return self.log_prob / max(len(self.tokens), 1)
        return self.log_prob


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))


def _tile_encoder(enc: mdl.EncoderOutput, keys: nm.Tensor, k: int) -> tuple[mdl.EncoderOutput, nm.Tensor]:
    """Repeat a batch-of-one encoding across k beam rows (constant tensors)."""
    states = nm.constant(np.repeat(enc.states.data, k, axis=1))
    mask = np.repeat(enc.mask, k, axis=0)
    return mdl.EncoderOutput(states=states, mask=mask), nm.constant(np.repeat(keys.data, k, axis=1))


def _first_state(model: mdl.ModelParameters, source_ids: list[int]) -> tuple[mdl.EncoderOutput, nm.Tensor, np.ndarray]:
    if not source_ids:
        raise ValueError("cannot decode an empty source sentence")
    enc = mdl.encode(model.encoder, np.asarray([source_ids], dtype=np.int64))
    keys = mdl.attention_keys(model.decoder.attention, enc)
    h0 = mdl.initial_state(model.decoder, enc).data
    return enc, keys, h0


def greedy_decode(model: mdl.ModelParameters, source_ids: list[int], config: DecodeConfig) -> list[int]:
    """Argmax decoding; ties go to the lowest token id (argmax convention)."""
    with nm.no_grad():
        enc, keys, h = _first_state(model, source_ids)
        h = nm.constant(h)
        out: list[int] = []
        y_prev = BOS_ID
        for _ in range(config.max_length):
            h, logits, _ = mdl.decoder_step(model.decoder, np.asarray([y_prev]), h, enc, keys)
            row = logits.data[0].copy()
            row[PAD_ID] = -np.inf
            row[BOS_ID] = -np.inf
            y_prev = int(np.argmax(row))
            if y_prev == EOS_ID:
                break
            out.append(y_prev)
    return out


def beam_search(
    model: mdl.ModelParameters,
    source_ids: list[int],
    config: DecodeConfig,
    return_hypothesis: bool = False,
) -> list[int] | Hypothesis:
    """Beam decoding; pruning uses raw log probability, the final pick uses
    ``Hypothesis.score`` under the configured normalization mode.

    If nothing finishes within max_length, the best unfinished hypothesis is
    returned and a warning logged.
    """
    with nm.no_grad():
        enc1, keys1, h0 = _first_state(model, source_ids)
        tiled: dict[int, tuple[mdl.EncoderOutput, nm.Tensor]] = {1: (enc1, keys1)}

        active: list[tuple[Hypothesis, np.ndarray]] = [(Hypothesis(), h0[0])]
        finished: list[Hypothesis] = []
        for _ in range(config.max_length):
            if not active:
                break
            k = len(active)
            if k not in tiled:
                tiled[k] = _tile_encoder(enc1, keys1, k)
            enc_k, keys_k = tiled[k]
            y_prev = np.asarray([h.tokens[-1] if h.tokens else BOS_ID for h, _ in active])
            h_prev = nm.constant(np.stack([s for _, s in active]))
            h_new, logits, _ = mdl.decoder_step(model.decoder, y_prev, h_prev, enc_k, keys_k)
            log_probs = _log_softmax(logits.data)
            log_probs[:, PAD_ID] = -np.inf
            log_probs[:, BOS_ID] = -np.inf

            candidates = []  # (negated score, token, hyp index) for deterministic order
            for i, (hyp, _) in enumerate(active):
                for tok in range(log_probs.shape[1]):
                    lp = log_probs[i, tok]
                    if np.isfinite(lp):
                        candidates.append((-(hyp.log_prob + lp), tok, i))
            candidates.sort()
            next_active = []
            for neg_score, tok, i in candidates[: config.beam_size]:
                hyp, _ = active[i]
                new = Hypothesis(tokens=hyp.tokens + [tok], log_prob=-neg_score, finished=tok == EOS_ID)
                if new.finished:
                    finished.append(new)
                else:
                    next_active.append((new, h_new.data[i]))
            active = next_active

        pool = finished
        if not pool:
            log.warning("beam search hit max_length %d with no finished hypothesis", config.max_length)
            pool = [h for h, _ in active]
        best = min(pool, key=lambda h: (-h.score(config.length_normalization), h.tokens))
    if return_hypothesis:
        return best
    return best.tokens[:-1] if best.finished else list(best.tokens)


def decode_corpus(
    model: mdl.ModelParameters,
    sources: list[list[int]],
    config: DecodeConfig,
) -> list[list[int]]:
    """Beam-decode every source sentence (beam_size 1 uses the greedy path)."""
    outputs = []
    for ids in sources:
        if config.beam_size == 1:
            outputs.append(greedy_decode(model, ids, config))
        else:
            outputs.append(beam_search(model, ids, config))
    return outputs
