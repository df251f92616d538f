"""Batching, loss, Adam and the training loop."""

import numpy as np
import pytest

from seq2align import model as mdl
from seq2align import numerics as nm
from seq2align.corpus import BOS_ID, EOS_ID, PAD_ID, ParallelCorpus, SentencePair, SyntheticTaskSpec, Vocabulary, generate_synthetic
from seq2align.training import (
    AdamState,
    Dropout,
    TrainConfig,
    TrainingDiverged,
    adam_update,
    clip_gradients,
    make_batches,
    sentence_loss,
    train,
)

from test_model import tiny_hyper, zeroed_model


def small_corpus(n=12, vocab=8, min_len=1, max_len=4, seed=0):
    return generate_synthetic(SyntheticTaskSpec("copy", vocab, min_len, max_len, n, seed))


# ---------------------------------------------------------------------------
# batching


def test_make_batches_covers_corpus_and_keeps_short_tail():
    corpus = small_corpus(n=103)
    batches = make_batches(corpus, batch_size=10, seed=1)
    assert len(batches) == 11
    assert batches[-1].src.shape[0] == 3
    assert sum(b.src.shape[0] for b in batches) == 103


def test_make_batches_is_seeded():
    corpus = small_corpus(n=40)
    a = make_batches(corpus, 8, seed=3)
    b = make_batches(corpus, 8, seed=3)
    c = make_batches(corpus, 8, seed=4)
    assert all(np.array_equal(x.src, y.src) for x, y in zip(a, b))
    assert any(not np.array_equal(x.src, y.src) for x, y in zip(a, c))


def test_batch_layout_bos_eos_and_masks():
    vocab = Vocabulary(tokens=["a", "b", "c"])
    pairs = [SentencePair([4, 5], [6, 5, 4]), SentencePair([6], [4])]
    corpus = ParallelCorpus(pairs, vocab, vocab)
    (batch,) = make_batches(corpus, batch_size=2, seed=0)
    for row in range(2):
        n_src = int(batch.src_mask[row].sum())
        n_tgt = int(batch.tgt_mask[row].sum())
        assert batch.tgt_in[row, 0] == BOS_ID
        assert batch.labels[row, n_tgt - 1] == EOS_ID
        assert np.all(batch.src[row, n_src:] == PAD_ID)
        assert np.all(batch.tgt_mask[row, n_tgt:] == 0.0)
        # teacher inputs are the labels shifted right by one
        np.testing.assert_array_equal(batch.tgt_in[row, 1:n_tgt], batch.labels[row, : n_tgt - 1])
    assert batch.label_tokens == 4 + 2


def test_make_batches_truncates_and_logs(caplog):
    vocab = Vocabulary(tokens=["a"])
    pairs = [SentencePair([4] * 9, [4] * 9)]
    corpus = ParallelCorpus(pairs, vocab, vocab)
    with caplog.at_level("WARNING"):
        (batch,) = make_batches(corpus, 1, seed=0, max_len=5)
    assert batch.src.shape[1] == 5
    assert batch.labels.shape[1] == 6
    assert any("truncated 2" in rec.message for rec in caplog.records)


# ---------------------------------------------------------------------------
# loss


def test_uniform_model_loss_is_log_vocab():
    hyper = tiny_hyper(src=9, tgt=9)
    model = zeroed_model(hyper)
    corpus = small_corpus(n=6, vocab=5)
    (batch,) = make_batches(corpus, 6, seed=0)
    loss = sentence_loss(model, batch)
    np.testing.assert_allclose(loss.item(), np.log(9.0), rtol=1e-12)


def test_loss_is_positive_on_random_model():
    model = mdl.init_parameters(tiny_hyper(), seed=1)
    (batch,) = make_batches(small_corpus(n=4, vocab=4), 4, seed=0)
    assert sentence_loss(model, batch).item() > 0


def test_loss_matches_per_step_numpy_recomputation():
    model = mdl.init_parameters(tiny_hyper(), seed=2)
    vocab = Vocabulary(tokens=["a", "b", "c", "d"])
    corpus = ParallelCorpus([SentencePair([4, 6], [7, 5, 4])], vocab, vocab)
    (batch,) = make_batches(corpus, 1, seed=0)
    got = sentence_loss(model, batch).item()

    with nm.no_grad():
        enc = mdl.encode(model.encoder, batch.src, batch.src_mask)
        h = mdl.initial_state(model.decoder, enc)
        nll = []
        for j in range(batch.tgt_in.shape[1]):
            h, logits, _ = mdl.decoder_step(model.decoder, batch.tgt_in[:, j], h, enc)
            row = logits.data[0]
            log_probs = row - (row.max() + np.log(np.exp(row - row.max()).sum()))
            nll.append(-log_probs[batch.labels[0, j]])
    np.testing.assert_allclose(got, np.mean(nll), rtol=1e-12)


def test_masked_positions_contribute_nothing():
    model = mdl.init_parameters(tiny_hyper(), seed=3)
    vocab = Vocabulary(tokens=["a", "b", "c"])
    pairs = [SentencePair([4, 5], [6, 5, 4]), SentencePair([6], [4])]
    corpus = ParallelCorpus(pairs, vocab, vocab)
    (batch,) = make_batches(corpus, 2, seed=0)

    model.zero_grad()
    base = sentence_loss(model, batch)
    nm.backward(base)
    base_grads = {p.name: p.grad.copy() for p in model.parameters()}

    masked = np.where(batch.tgt_mask == 0.0)
    assert masked[0].size > 0
    batch.labels[masked] = 5  # rewrite labels under the mask
    batch.src[batch.src_mask == 0.0] = 6  # and the padded source ids

    model.zero_grad()
    changed = sentence_loss(model, batch)
    nm.backward(changed)
    np.testing.assert_array_equal(base.data, changed.data)
    for p in model.parameters():
        np.testing.assert_array_equal(base_grads[p.name], p.grad)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_changes_nothing():
    p = nm.Parameter("p", np.array([1.0, -2.0]))
    state = AdamState(lr=0.1)
    assert adam_update(state, [p])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_learning_rate():
    p = nm.Parameter("p", np.array([5.0]))
    p.grad[:] = 2.0
    state = AdamState(lr=1e-4)
    adam_update(state, [p])
    delta = 5.0 - p.data[0]
    np.testing.assert_allclose(delta, 1e-4 * 2.0 / (2.0 + 1e-8), rtol=1e-9)
    np.testing.assert_allclose(delta, 1e-4, rtol=1e-6)


def test_adam_two_steps_match_hand_iteration():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta = 1.0
    m = v = 0.0
    want = []
    for t in (1, 2):
        g = theta  # gradient of theta^2 / 2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        want.append(theta)

    p = nm.Parameter("p", np.array([1.0]))
    state = AdamState(lr=lr)
    got = []
    for _ in range(2):
        p.zero_grad()
        p.grad[:] = p.data
        adam_update(state, [p])
        got.append(p.data[0])
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert state.t == 2


def test_adam_rejects_non_finite_gradients():
    p = nm.Parameter("p", np.array([1.0]))
    p.grad[:] = np.nan
    state = AdamState()
    assert not adam_update(state, [p])
    assert state.t == 0
    np.testing.assert_array_equal(p.data, [1.0])


def test_clip_gradients_scales_global_norm():
    a = nm.Parameter("a", np.zeros(3))
    b = nm.Parameter("b", np.zeros(4))
    a.grad[:] = 3.0
    b.grad[:] = 4.0
    norm = clip_gradients([a, b], max_norm=1.0)
    assert norm > 1.0
    total = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    np.testing.assert_allclose(total, 1.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_zero_rate_is_identity():
    d = Dropout(0.0, np.random.default_rng(0))
    t = nm.constant(np.ones((3, 3)))
    assert d(t) is t


def test_dropout_scales_kept_entries():
    d = Dropout(0.5, np.random.default_rng(1))
    t = nm.constant(np.ones((100, 100)))
    out = d(t).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 2.0)
    assert 0.3 < kept.size / out.size < 0.7


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        Dropout(1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# training loop


def test_train_zero_epochs_leaves_model_unchanged():
    corpus = small_corpus(n=10)
    hyper = tiny_hyper(src=len(corpus.source_vocab), tgt=len(corpus.target_vocab))
    model = mdl.init_parameters(hyper, seed=4)
    before = {p.name: p.data.copy() for p in model.parameters()}
    model, stats = train(TrainConfig(epochs=0, seed=0), corpus, model)
    assert stats == []
    for p in model.parameters():
        np.testing.assert_array_equal(before[p.name], p.data)


def test_training_loss_decreases_on_copy_task():
    corpus = small_corpus(n=120, vocab=10, min_len=1, max_len=4, seed=5)
    hyper = mdl.Hyper(len(corpus.source_vocab), len(corpus.target_vocab), embed=8, hidden=12, att=8)
    model = mdl.init_parameters(hyper, seed=6)
    cfg = TrainConfig(epochs=3, batch_size=12, dropout_rate=0.0, seed=7, learning_rate=5e-3)
    _, stats = train(cfg, corpus, model)
    losses = [s.mean_loss for s in stats]
    assert losses[1] < losses[0] and losses[2] < losses[1]
    assert all(s.tokens_per_second > 0 for s in stats)


def test_training_is_bit_reproducible(tmp_path):
    corpus = small_corpus(n=30, vocab=6, seed=8)
    hyper = mdl.Hyper(len(corpus.source_vocab), len(corpus.target_vocab), embed=4, hidden=6, att=4)
    cfg = TrainConfig(epochs=2, batch_size=8, dropout_rate=0.2, seed=11, learning_rate=1e-3)

    for run in ("one", "two"):
        model = mdl.init_parameters(hyper, seed=12)
        train(cfg, corpus, model, checkpoint_dir=tmp_path / run)
    first = (tmp_path / "one" / "checkpoint_final.bin").read_bytes()
    second = (tmp_path / "two" / "checkpoint_final.bin").read_bytes()
    assert first == second


def test_training_aborts_on_divergence():
    corpus = small_corpus(n=10)
    hyper = tiny_hyper(src=len(corpus.source_vocab), tgt=len(corpus.target_vocab))
    model = mdl.init_parameters(hyper, seed=13)
    model.encoder.embedding.data[:] = np.nan  # forces a non-finite loss
    with pytest.raises(TrainingDiverged):
        train(TrainConfig(epochs=1, seed=0), corpus, model)


def test_periodic_checkpoints_written(tmp_path):
    corpus = small_corpus(n=10)
    hyper = tiny_hyper(src=len(corpus.source_vocab), tgt=len(corpus.target_vocab))
    model = mdl.init_parameters(hyper, seed=14)
    cfg = TrainConfig(epochs=2, batch_size=5, dropout_rate=0.0, seed=1, checkpoint_every=1)
    _, stats = train(cfg, corpus, model, checkpoint_dir=tmp_path)
    assert (tmp_path / "checkpoint_ep0001.bin").exists()
    assert (tmp_path / "checkpoint_final.bin").exists()
    assert stats[-1].checkpoint_path.endswith("checkpoint_final.bin")
