"""Attention seq2seq trained under controlled target shuffling.

The package trains a GRU encoder-decoder with additive attention on aligned
or deliberately misaligned (shuffled-target) parallel corpora and measures
how translation quality, output statistics and positional information in the
hidden states respond to the degree of misalignment.
"""

from .corpus import (
    ParallelCorpus,
    SentencePair,
    ShuffleSpec,
    SyntheticTaskSpec,
    Vocabulary,
    generate_synthetic,
    load_corpus,
    shuffle_targets,
    write_corpus,
)
from .decoding import DecodeConfig, beam_search, greedy_decode
from .harness import ExperimentConfig, run_experiment
from .metrics import UnigramModel, bleu, cap_repeats, entropy, length_stats, neg_log_prob, r2_probe
from .model import Hyper, ModelParameters, init_parameters, load_checkpoint, save_checkpoint
from .numerics import Parameter, Tensor, backward, no_grad
from .training import AdamState, TrainConfig, adam_update, make_batches, sentence_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "DecodeConfig",
    "ExperimentConfig",
    "Hyper",
    "ModelParameters",
    "ParallelCorpus",
    "Parameter",
    "SentencePair",
    "ShuffleSpec",
    "SyntheticTaskSpec",
    "Tensor",
    "TrainConfig",
    "UnigramModel",
    "Vocabulary",
    "adam_update",
    "backward",
    "beam_search",
    "bleu",
    "cap_repeats",
    "entropy",
    "generate_synthetic",
    "greedy_decode",
    "init_parameters",
    "length_stats",
    "load_checkpoint",
    "load_corpus",
    "make_batches",
    "neg_log_prob",
    "no_grad",
    "r2_probe",
    "run_experiment",
    "save_checkpoint",
    "sentence_loss",
    "shuffle_targets",
    "train",
    "write_corpus",
]
