"""Teacher-forced training: batching, masked loss, Adam, the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import model as mdl
from .corpus import BOS_ID, EOS_ID, PAD_ID, ParallelCorpus
from .rng import Xoshiro256StarStar, derive_seed

log = logging.getLogger(__name__)


@dataclass
class Batch:
    """Padded id matrices plus 0/1 masks; label rows end with EOS."""

    src: np.ndarray  # int64 [B, Ls]
    src_mask: np.ndarray  # float64 [B, Ls]
    tgt_in: np.ndarray  # int64 [B, Lt], starts with BOS
    labels: np.ndarray  # int64 [B, Lt], ends with EOS
    tgt_mask: np.ndarray  # float64 [B, Lt]

    @property
    def label_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def make_batches(corpus: ParallelCorpus, batch_size: int, seed: int, max_len: int = 0) -> list[Batch]:
    """Shuffle the corpus into padded batches; the final short batch is kept.

    Sentences longer than max_len (when positive) are truncated; the count of
    truncations is logged once per call.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = Xoshiro256StarStar(derive_seed(seed, "batch-order"))
    order = rng.permutation(len(corpus.pairs))

    truncated = 0
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [corpus.pairs[i] for i in order[start : start + batch_size]]
        sources, targets = [], []
        for p in chunk:
            s, t = p.source, p.target
            if max_len > 0 and len(s) > max_len:
                s = s[:max_len]
                truncated += 1
            if max_len > 0 and len(t) > max_len:
                t = t[:max_len]
                truncated += 1
            sources.append(s)
            targets.append(t)
        b = len(chunk)
        ls = max(len(s) for s in sources)
        lt = max(len(t) for t in targets) + 1  # room for BOS in, EOS out
        src = np.full((b, ls), PAD_ID, dtype=np.int64)
        src_mask = np.zeros((b, ls))
        tgt_in = np.full((b, lt), PAD_ID, dtype=np.int64)
        labels = np.full((b, lt), PAD_ID, dtype=np.int64)
        tgt_mask = np.zeros((b, lt))
        for i, (s, t) in enumerate(zip(sources, targets)):
            src[i, : len(s)] = s
            src_mask[i, : len(s)] = 1.0
            tgt_in[i, 0] = BOS_ID
            tgt_in[i, 1 : len(t) + 1] = t
            labels[i, : len(t)] = t
            labels[i, len(t)] = EOS_ID
            tgt_mask[i, : len(t) + 1] = 1.0
        batches.append(Batch(src, src_mask, tgt_in, labels, tgt_mask))
    if truncated:
        log.warning("truncated %d sentences to max length %d", truncated, max_len)
    return batches


class Dropout:
    """Inverted dropout: scales kept activations by 1 / (1 - rate)."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1), got %r" % rate)
        self.rate = rate
        self.rng = rng

    def __call__(self, t: nm.Tensor) -> nm.Tensor:
        if self.rate == 0.0:
            return t
        keep = (self.rng.random(t.data.shape) >= self.rate).astype(np.float64)
        return nm.mul(t, nm.constant(keep / (1.0 - self.rate)))


def sentence_loss(model: mdl.ModelParameters, batch: Batch, emb_dropout: Dropout | None = None, state_dropout: Dropout | None = None) -> nm.Tensor:
    """Mean negative log-likelihood per unmasked label token (natural log).

    Teacher forcing throughout: decoder inputs come from the gold target.
    Masked positions contribute exactly zero to the value and the gradients.
    """
    enc = mdl.encode(model.encoder, batch.src, batch.src_mask, emb_dropout)
    keys = mdl.attention_keys(model.decoder.attention, enc)
    h = mdl.initial_state(model.decoder, enc)
    step_losses = []
    for j in range(batch.tgt_in.shape[1]):
        h, logits, _ = mdl.decoder_step(
            model.decoder, batch.tgt_in[:, j], h, enc, keys, emb_dropout, state_dropout
        )
        step_losses.append(nm.masked_nll(logits, batch.labels[:, j], batch.tgt_mask[:, j]))
    total = nm.add_n(step_losses) if len(step_losses) > 1 else step_losses[0]
    return nm.scale(total, 1.0 / batch.label_tokens)


@dataclass
class AdamState:
    """First/second moment accumulators per parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params: list[nm.Parameter]) -> bool:
    """One Adam step over all parameters; returns False if the step was rejected.

    A step with any non-finite gradient leaves parameters, moments and the
    step counter untouched.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            log.warning("rejecting optimizer step %d: non-finite gradient in %s", state.t + 1, p.name)
            return False
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad**2
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_gradients(params: list[nm.Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last written checkpoint is still on disk."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 60
    dropout_rate: float = 0.2
    seed: int = 0
    max_sentence_length: int = 50
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only
    learning_rate: float = 1e-4
    max_grad_norm: float = 0.0  # 0 disables clipping


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    tokens_per_second: float
    checkpoint_path: str


def write_training_log(path: str | Path, rows: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tmean_loss\ttokens_per_second\tcheckpoint_path\n")
        for r in rows:
            fh.write("%d\t%.6f\t%.1f\t%s\n" % (r.epoch, r.mean_loss, r.tokens_per_second, r.checkpoint_path))


def train(
    config: TrainConfig,
    corpus: ParallelCorpus,
    model: mdl.ModelParameters,
    checkpoint_dir: str | Path | None = None,
) -> tuple[mdl.ModelParameters, list[EpochStats]]:
    """Run the training loop; returns the model and per-epoch statistics.

    Deterministic given config.seed: batch order, dropout masks and hence the
    final parameter values are reproducible bit for bit.
    """
    params = model.parameters()
    adam = AdamState(lr=config.learning_rate)
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    emb_drop = Dropout(config.dropout_rate, dropout_rng) if config.dropout_rate > 0 else None
    state_drop = Dropout(config.dropout_rate, dropout_rng) if config.dropout_rate > 0 else None

    src_hash = corpus.source_vocab.content_hash()
    tgt_hash = corpus.target_vocab.content_hash()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def save(name: str) -> str:
        if not ckpt_dir:
            return ""
        path = ckpt_dir / name
        mdl.save_checkpoint(path, model, src_hash, tgt_hash)
        return str(path)

    stats: list[EpochStats] = []
    last_good = ""
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(
            corpus, config.batch_size, derive_seed(config.seed, "epoch", epoch), config.max_sentence_length
        )
        started = time.perf_counter()
        loss_sum = 0.0
        token_sum = 0
        for batch in batches:
            model.zero_grad()
            loss = sentence_loss(model, batch, emb_drop, state_drop)
            if not np.isfinite(loss.data):
                log.error("training diverged at epoch %d (non-finite loss)", epoch)
                raise TrainingDiverged("non-finite loss at epoch %d; last checkpoint: %s" % (epoch, last_good))
            nm.backward(loss)
            if config.max_grad_norm > 0:
                clip_gradients(params, config.max_grad_norm)
            adam_update(adam, params)
            loss_sum += loss.item() * batch.label_tokens
            token_sum += batch.label_tokens
        elapsed = max(time.perf_counter() - started, 1e-9)
        path = ""
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            path = save("checkpoint_ep%04d.bin" % epoch)
        if epoch == config.epochs:
            path = save("checkpoint_final.bin")
        if path:
            last_good = path
        stats.append(EpochStats(epoch, loss_sum / max(token_sum, 1), token_sum / elapsed, path))
        log.info("epoch %d: mean loss %.4f (%.0f tokens/s)", epoch, stats[-1].mean_loss, stats[-1].tokens_per_second)
    return model, stats
