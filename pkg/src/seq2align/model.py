"""Recurrent encoder-decoder with additive attention.

Encoder: token embeddings feed a forward and a backward GRU; the per-token
state is the concatenation of the two directions.  Decoder: a first GRU
consumes the previous output token's embedding, attention over the encoder
states produces a context vector, a second GRU consumes that context, and a
tanh layer plus softmax classifier over the target vocabulary produces the
next-token distribution.  GRU and attention weights carry no bias terms; the
output classifier does.

All activations are batch-first float64 tensors; stacked encoder state
sequences are [time, batch, features].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import numerics as nm
from .numerics import Parameter, Tensor
from .rng import Xoshiro256StarStar, derive_seed

CHECKPOINT_MAGIC = b"S2ALCKPT"
CHECKPOINT_VERSION = 1

DropoutFn = Optional[Callable[[Tensor], Tensor]]


@dataclass
class Hyper:
    """Model widths.  Defaults are the desk-scale settings for synthetic tasks."""

    source_vocab: int
    target_vocab: int
    embed: int = 32
    hidden: int = 64
    att: int = 64

    def to_dict(self) -> dict:
        return {
            "source_vocab": self.source_vocab,
            "target_vocab": self.target_vocab,
            "embed": self.embed,
            "hidden": self.hidden,
            "att": self.att,
        }


@dataclass
class GruCellParams:
    """One GRU cell: update/reset/candidate weights, no biases."""

    w_update: Parameter  # [hidden, input]
    u_update: Parameter  # [hidden, hidden]
    w_reset: Parameter
    u_reset: Parameter
    w_cand: Parameter
    u_cand: Parameter

    def all(self) -> list[Parameter]:
        return [self.w_update, self.u_update, self.w_reset, self.u_reset, self.w_cand, self.u_cand]


@dataclass
class AttentionParams:
    """Additive attention: energy = score_v . tanh(query_proj h + keys_proj s)."""

    score_v: Parameter  # [att]
    query_proj: Parameter  # [att, hidden]
    keys_proj: Parameter  # [att, 2 * hidden]

    def all(self) -> list[Parameter]:
        return [self.score_v, self.query_proj, self.keys_proj]


@dataclass
class EncoderParams:
    embedding: Parameter  # [source_vocab, embed]
    fwd: GruCellParams
    bwd: GruCellParams

    def all(self) -> list[Parameter]:
        return [self.embedding] + self.fwd.all() + self.bwd.all()


@dataclass
class DecoderParams:
    embedding: Parameter  # [target_vocab, embed]
    gru_in: GruCellParams  # consumes the previous token embedding
    gru_ctx: GruCellParams  # consumes the attention context
    attention: AttentionParams
    init_proj: Parameter  # [hidden, 2 * hidden], maps mean encoder state to h0
    out_state: Parameter  # [att, hidden]
    out_prev: Parameter  # [att, embed]
    out_ctx: Parameter  # [att, 2 * hidden]
    out_proj: Parameter  # [target_vocab, att]
    out_bias: Parameter  # [target_vocab]

    def all(self) -> list[Parameter]:
        return (
            [self.embedding]
            + self.gru_in.all()
            + self.gru_ctx.all()
            + self.attention.all()
            + [self.init_proj, self.out_state, self.out_prev, self.out_ctx, self.out_proj, self.out_bias]
        )


@dataclass
class ModelParameters:
    hyper: Hyper
    encoder: EncoderParams
    decoder: DecoderParams

    def parameters(self) -> list[Parameter]:
        params = self.encoder.all() + self.decoder.all()
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in model")
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _uniform_init(rng: Xoshiro256StarStar, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Parameter:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    flat = np.empty(int(np.prod(shape)), dtype=np.float64)
    for i in range(flat.size):
        flat[i] = rng.uniform(-bound, bound)
    return Parameter(name, flat.reshape(shape))


def _init_cell(rng: Xoshiro256StarStar, prefix: str, input_dim: int, hidden: int) -> GruCellParams:
    def mat(suffix, rows, cols):
        return _uniform_init(rng, prefix + "." + suffix, (rows, cols), cols, rows)

    return GruCellParams(
        w_update=mat("w_update", hidden, input_dim),
        u_update=mat("u_update", hidden, hidden),
        w_reset=mat("w_reset", hidden, input_dim),
        u_reset=mat("u_reset", hidden, hidden),
        w_cand=mat("w_cand", hidden, input_dim),
        u_cand=mat("u_cand", hidden, hidden),
    )


def init_parameters(hyper: Hyper, seed: int) -> ModelParameters:
    """Fresh model with uniform [-s, s] weights, s = sqrt(6 / (fan_in + fan_out))."""
    rng = Xoshiro256StarStar(derive_seed(seed, "init"))
    h, e, a = hyper.hidden, hyper.embed, hyper.att

    encoder = EncoderParams(
        embedding=_uniform_init(rng, "encoder.embedding", (hyper.source_vocab, e), hyper.source_vocab, e),
        fwd=_init_cell(rng, "encoder.fwd", e, h),
        bwd=_init_cell(rng, "encoder.bwd", e, h),
    )
    attention = AttentionParams(
        score_v=_uniform_init(rng, "decoder.attention.score_v", (a,), a, 1),
        query_proj=_uniform_init(rng, "decoder.attention.query_proj", (a, h), h, a),
        keys_proj=_uniform_init(rng, "decoder.attention.keys_proj", (a, 2 * h), 2 * h, a),
    )
    decoder = DecoderParams(
        embedding=_uniform_init(rng, "decoder.embedding", (hyper.target_vocab, e), hyper.target_vocab, e),
        gru_in=_init_cell(rng, "decoder.gru_in", e, h),
        gru_ctx=_init_cell(rng, "decoder.gru_ctx", 2 * h, h),
        attention=attention,
        init_proj=_uniform_init(rng, "decoder.init_proj", (h, 2 * h), 2 * h, h),
        out_state=_uniform_init(rng, "decoder.out_state", (a, h), h, a),
        out_prev=_uniform_init(rng, "decoder.out_prev", (a, e), e, a),
        out_ctx=_uniform_init(rng, "decoder.out_ctx", (a, 2 * h), 2 * h, a),
        out_proj=_uniform_init(rng, "decoder.out_proj", (hyper.target_vocab, a), a, hyper.target_vocab),
        out_bias=Parameter("decoder.out_bias", np.zeros(hyper.target_vocab)),
    )
    return ModelParameters(hyper, encoder, decoder)


# ---------------------------------------------------------------------------
# forward pieces


def gru_step(cell: GruCellParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU transition on a [batch, *] slab.

    update z = sigmoid(Wz x + Uz h); reset r = sigmoid(Wr x + Ur h);
    candidate = tanh(r * (U h) + W x); new h = (1 - z) * candidate + z * h.
    """
    a_update = nm.add(nm.linear(x, cell.w_update), nm.linear(h_prev, cell.u_update))
    a_reset = nm.add(nm.linear(x, cell.w_reset), nm.linear(h_prev, cell.u_reset))
    a_rec = nm.linear(h_prev, cell.u_cand)
    a_in = nm.linear(x, cell.w_cand)
    return nm.gru_combine(a_update, a_reset, a_rec, a_in, h_prev)


@dataclass
class EncoderOutput:
    """Per-token encoder states plus the masked mean used to start the decoder."""

    states: Tensor  # [src_len, batch, 2 * hidden]
    mask: np.ndarray  # [batch, src_len] float 0/1
    pooled: Tensor = field(init=False)  # [batch, 2 * hidden]

    def __post_init__(self):
        lengths = self.mask.sum(axis=1)
        if np.any(lengths <= 0):
            raise ValueError("every sentence in a batch needs at least one real token")
        weights = nm.constant(self.mask / lengths[:, None])
        self.pooled = nm.attention_context(weights, self.states)

    @property
    def src_len(self) -> int:
        return self.states.data.shape[0]

    @property
    def batch(self) -> int:
        return self.states.data.shape[1]


def encode(params: EncoderParams, src_ids: np.ndarray, src_mask: np.ndarray | None = None, emb_dropout: DropoutFn = None) -> EncoderOutput:
    """Run both GRU directions over a padded [batch, src_len] id matrix.

    Padded positions keep the previous hidden state in each direction, so the
    states at real positions match an unpadded per-sentence encoding exactly.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.ndim != 2 or src_ids.shape[1] == 0:
        raise ValueError("src_ids must be [batch, src_len] with src_len >= 1")
    batch, src_len = src_ids.shape
    if src_mask is None:
        src_mask = np.ones((batch, src_len))
    src_mask = np.asarray(src_mask, dtype=np.float64)

    hidden = params.fwd.u_update.shape[0]
    embeds = []
    for t in range(src_len):
        e = nm.embedding(params.embedding, src_ids[:, t])
        embeds.append(emb_dropout(e) if emb_dropout else e)

    all_real = bool(src_mask.all())
    fwd_states: list[Tensor] = []
    h = nm.constant(np.zeros((batch, hidden)))
    for t in range(src_len):
        h_new = gru_step(params.fwd, h, embeds[t])
        h = h_new if all_real else nm.mask_mix(h_new, h, src_mask[:, t])
        fwd_states.append(h)

    bwd_states: list[Tensor] = [None] * src_len  # type: ignore[list-item]
    h = nm.constant(np.zeros((batch, hidden)))
    for t in range(src_len - 1, -1, -1):
        h_new = gru_step(params.bwd, h, embeds[t])
        h = h_new if all_real else nm.mask_mix(h_new, h, src_mask[:, t])
        bwd_states[t] = h

    states = nm.stack([nm.concat([fwd_states[t], bwd_states[t]], axis=1) for t in range(src_len)])
    return EncoderOutput(states=states, mask=src_mask)


def attention_keys(att: AttentionParams, enc: EncoderOutput) -> Tensor:
    """Projected encoder states [src_len, batch, att]; reusable across decoder steps."""
    L, B, D = enc.states.data.shape
    flat = nm.reshape(enc.states, (L * B, D))
    return nm.reshape(nm.linear(flat, att.keys_proj), (L, B, att.keys_proj.shape[0]))


def attend(att: AttentionParams, h_query: Tensor, enc: EncoderOutput, keys: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Attention weights over source positions and the resulting context vector.

    Returns (weights [batch, src_len], context [batch, 2 * hidden]); the
    weights of each row sum to one and padded positions get exactly zero.
    """
    if keys is None:
        keys = attention_keys(att, enc)
    query = nm.linear(h_query, att.query_proj)
    scores = nm.attention_scores(keys, query, att.score_v)
    if not enc.mask.all():
        scores = nm.add(scores, nm.constant((enc.mask - 1.0) * 1e30))
    weights = nm.softmax(scores, axis=1)
    context = nm.attention_context(weights, enc.states)
    return weights, context


def initial_state(dec: DecoderParams, enc: EncoderOutput) -> Tensor:
    """Decoder start state: tanh of a projection of the mean encoder state."""
    return nm.tanh(nm.linear(enc.pooled, dec.init_proj))


def decoder_step(
    dec: DecoderParams,
    y_prev: np.ndarray,
    h_prev: Tensor,
    enc: EncoderOutput,
    keys: Tensor | None = None,
    emb_dropout: DropoutFn = None,
    state_dropout: DropoutFn = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """One decoding step.

    y_prev is the previous output token id per batch row (BOS on the first
    step).  Returns (new hidden state [B, hidden], logits [B, target_vocab],
    attention weights [B, src_len]).  state_dropout applies only to the copy
    of the state feeding the output layer, never to the recurrent path.
    """
    e = nm.embedding(dec.embedding, np.asarray(y_prev, dtype=np.int64))
    if emb_dropout:
        e = emb_dropout(e)
    h_mid = gru_step(dec.gru_in, h_prev, e)
    weights, context = attend(dec.attention, h_mid, enc, keys)
    h_new = gru_step(dec.gru_ctx, h_mid, context)
    h_out = state_dropout(h_new) if state_dropout else h_new
    inner = nm.tanh(
        nm.add_n([nm.linear(h_out, dec.out_state), nm.linear(e, dec.out_prev), nm.linear(context, dec.out_ctx)])
    )
    logits = nm.bias_add(nm.linear(inner, dec.out_proj), dec.out_bias)
    return h_new, logits, weights


# ---------------------------------------------------------------------------
# checkpoint container
#
# Byte layout (all integers big-endian):
#   8 bytes   magic "S2ALCKPT"
#   1 byte    format version (1)
#   4 bytes   uint32 length M of the metadata blob
#   M bytes   UTF-8 JSON with sorted keys:
#               {"hyper": {...},
#                "params": [[name, [dim, ...]], ...],   # model order
#                "source_vocab_sha256": hex, "target_vocab_sha256": hex}
#   then, for each manifest entry in order, the row-major float64
#   little-endian bytes of that parameter.


def save_checkpoint(path: str | Path, model: ModelParameters, source_vocab_hash: str, target_vocab_hash: str) -> None:
    params = model.parameters()
    meta = {
        "hyper": model.hyper.to_dict(),
        "params": [[p.name, list(p.shape)] for p in params],
        "source_vocab_sha256": source_vocab_hash,
        "target_vocab_sha256": target_vocab_hash,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">B", CHECKPOINT_VERSION))
        fh.write(struct.pack(">I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParameters, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("%s is not a checkpoint (bad magic %r)" % (path, magic))
        (version,) = struct.unpack(">B", fh.read(1))
        if version != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %d" % version)
        (meta_len,) = struct.unpack(">I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        model = init_parameters(Hyper(**meta["hyper"]), seed=0)
        by_name = {p.name: p for p in model.parameters()}
        if [list(s) for _, s in meta["params"]] != [list(by_name[n].shape) for n, _ in meta["params"]]:
            raise ValueError("checkpoint manifest shapes do not match the model layout")
        for name, shape in meta["params"]:
            n_vals = int(np.prod(shape))
            raw = fh.read(n_vals * 8)
            if len(raw) != n_vals * 8:
                raise ValueError("checkpoint truncated while reading %r" % name)
            values = np.frombuffer(raw, dtype="<f8").reshape(shape)
            if not np.all(np.isfinite(values)):
                raise ValueError("checkpoint parameter %r has non-finite values" % name)
            by_name[name].data = values.astype(np.float64)
        trailing = fh.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes")
    return model, meta
